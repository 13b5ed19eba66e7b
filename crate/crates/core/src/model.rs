//! GPT-style decoder-only language model.
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, then `x + mlp(ln2(x))`), learned
//! absolute position embeddings, tanh-GELU MLP of width `4 * d_model`, a final
//! layer norm and an untied vocabulary projection. No dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, AttentionShape};
use crate::tensor::{freeze_params, Objective, ParamKind, ParamVars, ParameterSet, Scalar, Tape, Tensor, Var};

/// Token id; byte-level corpora use `0..256`.
pub type TokenId = u32;

pub const FFN_MULT: usize = 4;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 2 {
            return bad(format!("context_len must be at least 2, got {}", self.context_len));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `V*d + C*d + L*(12*d^2 + 13*d) + 2*d + d*V`.
    pub fn param_count(&self) -> usize {
        let (v, c, d, l) = (self.vocab_size, self.context_len, self.d_model, self.n_layers);
        v * d + c * d + l * (12 * d * d + 13 * d) + 2 * d + d * v
    }

    /// Every parameter's name, tag and shape, in construction order.
    pub fn param_layout(&self) -> Vec<(String, ParamKind, Vec<usize>)> {
        let d = self.d_model;
        let h = FFN_MULT * d;
        let mut out = vec![
            ("tok_emb".to_string(), ParamKind::Embedding, vec![self.vocab_size, d]),
            ("pos_emb".to_string(), ParamKind::Embedding, vec![self.context_len, d]),
        ];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("h{i}.{s}");
            out.extend([
                (p("ln1.g"), ParamKind::Norm, vec![d]),
                (p("ln1.b"), ParamKind::Norm, vec![d]),
                (p("attn.wq"), ParamKind::Attention, vec![d, d]),
                (p("attn.bq"), ParamKind::Bias, vec![d]),
                (p("attn.wk"), ParamKind::Attention, vec![d, d]),
                (p("attn.bk"), ParamKind::Bias, vec![d]),
                (p("attn.wv"), ParamKind::Attention, vec![d, d]),
                (p("attn.bv"), ParamKind::Bias, vec![d]),
                (p("attn.wo"), ParamKind::Attention, vec![d, d]),
                (p("attn.bo"), ParamKind::Bias, vec![d]),
                (p("ln2.g"), ParamKind::Norm, vec![d]),
                (p("ln2.b"), ParamKind::Norm, vec![d]),
                (p("mlp.w1"), ParamKind::Dense, vec![d, h]),
                (p("mlp.b1"), ParamKind::Bias, vec![h]),
                (p("mlp.w2"), ParamKind::Dense, vec![h, d]),
                (p("mlp.b2"), ParamKind::Bias, vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.g".to_string(), ParamKind::Norm, vec![d]),
            ("ln_f.b".to_string(), ParamKind::Norm, vec![d]),
            ("head.w".to_string(), ParamKind::Head, vec![d, self.vocab_size]),
        ]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    params: ParameterSet<f32>,
}

impl LanguageModel {
    /// Fresh model: N(0, 0.02) matrices and embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
        let mut params = ParameterSet::new();
        for (name, kind, shape) in config.param_layout() {
            let n: usize = shape.iter().product();
            let data = match kind {
                ParamKind::Bias => vec![0.0; n],
                ParamKind::Norm if name.ends_with(".g") => vec![1.0; n],
                ParamKind::Norm => vec![0.0; n],
                _ => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            };
            params.insert(name, kind, Tensor::new(shape, data)?)?;
        }
        Ok(LanguageModel { config, params })
    }

    /// Wraps existing parameters, checking names, tags and shapes.
    pub fn from_params(config: ModelConfig, params: ParameterSet<f32>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Contract(format!(
                "config expects {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, kind, shape) in &layout {
            match (params.get(name), params.kind(name)) {
                (Some(t), Some(k)) if t.shape() == shape.as_slice() && k == *kind => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "parameter {name:?} missing or not a {kind:?} of shape {shape:?}"
                    )))
                }
            }
        }
        Ok(LanguageModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<f32> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet<f32> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.context_len {
            return Err(Error::Contract(format!(
                "{} tokens exceed context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[len, vocab]` for a single sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor<f32>> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on an empty sequence".into()));
        }
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut tape = Tape::new();
        let vars = freeze_params(&mut tape, &self.params)?;
        let logits = record_logits(&self.config, &mut tape, &vars, &ids, 1, ids.len())?;
        Ok(tape.value(logits).clone())
    }

    /// Mean next-token NLL (nats) over positions `1..len`.
    pub fn sequence_loss(&self, tokens: &[TokenId]) -> Result<f32> {
        Ok(self.sequence_losses(&[tokens])?[0])
    }

    /// [`LanguageModel::sequence_loss`] for many sequences in one batched
    /// pass. Shorter sequences are padded and masked.
    pub fn sequence_losses(&self, seqs: &[&[TokenId]]) -> Result<Vec<f32>> {
        let batch = LmBatch::new(&self.config, seqs)?;
        let mut tape = Tape::new();
        let vars = freeze_params(&mut tape, &self.params)?;
        let logits = record_logits(&self.config, &mut tape, &vars, &batch.inputs, batch.batch, batch.seq)?;
        let nll = ops::token_nll(tape.value(logits), &batch.targets)?;
        let mut out = Vec::with_capacity(seqs.len());
        for b in 0..batch.batch {
            let rows = b * batch.seq..(b + 1) * batch.seq;
            let (sum, n) = rows
                .filter(|&r| batch.mask[r])
                .fold((0.0f32, 0usize), |(s, n), r| (s + nll[r], n + 1));
            out.push(sum / n as f32);
        }
        Ok(out)
    }
}

/// A padded next-token prediction batch: row `b * seq + i` predicts
/// `targets[..]` from `inputs[..=i]` of sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl LmBatch {
    pub fn new(config: &ModelConfig, seqs: &[&[TokenId]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut longest = 0;
        for s in seqs {
            if s.len() < 2 {
                return Err(Error::Contract(format!(
                    "next-token loss needs at least 2 tokens, got {}",
                    s.len()
                )));
            }
            if s.len() > config.context_len {
                return Err(Error::Contract(format!(
                    "sequence of {} tokens exceeds context length {}",
                    s.len(),
                    config.context_len
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::Contract(format!(
                    "token id {t} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            longest = longest.max(s.len());
        }
        let seq = longest - 1;
        let n = seqs.len() * seq;
        let mut inputs = vec![0usize; n];
        let mut targets = vec![0usize; n];
        let mut mask = vec![false; n];
        for (b, s) in seqs.iter().enumerate() {
            for i in 0..s.len() - 1 {
                inputs[b * seq + i] = s[i] as usize;
                targets[b * seq + i] = s[i + 1] as usize;
                mask[b * seq + i] = true;
            }
        }
        Ok(LmBatch {
            inputs,
            targets,
            mask,
            batch: seqs.len(),
            seq,
        })
    }

    /// Number of predicted (unmasked) positions.
    pub fn n_targets(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Records the forward pass for `batch` packed sequences of `seq` positions
/// and returns the logits `[batch * seq, vocab]`.
pub fn record_logits<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &ParamVars,
    ids: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if ids.len() != batch * seq {
        return Err(Error::Contract(format!(
            "{} ids for {batch} x {seq} positions",
            ids.len()
        )));
    }
    if seq > cfg.context_len {
        return Err(Error::Contract(format!(
            "{seq} positions exceed context length {}",
            cfg.context_len
        )));
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.embedding(p.get("tok_emb")?, ids)?;
    let pos = tape.embedding(p.get("pos_emb")?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let shape = AttentionShape {
        batch,
        seq,
        heads: cfg.n_heads,
    };
    for i in 0..cfg.n_layers {
        let w = |s: &str| p.get(&format!("h{i}.{s}"));
        let h = tape.layer_norm(x, w("ln1.g")?, w("ln1.b")?)?;
        let q = linear(tape, h, w("attn.wq")?, w("attn.bq")?)?;
        let k = linear(tape, h, w("attn.wk")?, w("attn.bk")?)?;
        let v = linear(tape, h, w("attn.wv")?, w("attn.bv")?)?;
        let a = tape.causal_attention(q, k, v, shape)?;
        let a = linear(tape, a, w("attn.wo")?, w("attn.bo")?)?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, w("ln2.g")?, w("ln2.b")?)?;
        let f = linear(tape, h, w("mlp.w1")?, w("mlp.b1")?)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, w("mlp.w2")?, w("mlp.b2")?)?;
        x = tape.add(x, f)?;
    }
    let x = tape.layer_norm(x, p.get("ln_f.g")?, p.get("ln_f.b")?)?;
    tape.matmul(x, p.get("head.w")?)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Mean next-token NLL of a batch, as a differentiable objective.
pub struct LmObjective<'a> {
    pub config: &'a ModelConfig,
    pub batch: LmBatch,
}

impl<'a> LmObjective<'a> {
    pub fn new(config: &'a ModelConfig, seqs: &[&[TokenId]]) -> Result<Self> {
        Ok(LmObjective {
            config,
            batch: LmBatch::new(config, seqs)?,
        })
    }
}

impl<T: Scalar> Objective<T> for LmObjective<'_> {
    fn loss(&self, tape: &mut Tape<T>, params: &ParamVars) -> Result<Var> {
        let b = &self.batch;
        let logits = record_logits(self.config, tape, params, &b.inputs, b.batch, b.seq)?;
        tape.cross_entropy(logits, &b.targets, Some(&b.mask))
    }
}
