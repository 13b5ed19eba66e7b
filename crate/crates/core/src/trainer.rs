//! Optimization loop shared by the proxy and main models.
//!
//! Step `s` means "after `s` optimizer updates". Checkpoints keep the early
//! snapshot at `t0` plus a rolling window of the three most recent late
//! snapshots, taken every `late_ckpt_interval` steps counted back from `T`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, fmt6, parse_f64, Provenance};
use crate::checkpoint::Checkpoint;
use crate::corpus::PackedSequence;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, LmObjective, TokenId};
use crate::tensor::{grad, GradientSet, Tensor};

/// Number of late checkpoints averaged for the late-stage loss.
pub const LATE_CHECKPOINTS: usize = 3;

/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_grad_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_ckpt_step: usize,
    /// Defaults to `max(1, total_steps / 20)`.
    #[serde(default)]
    pub late_ckpt_interval: Option<usize>,
    pub eval_interval: usize,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl TrainConfig {
    /// Config with the conventional optimizer defaults.
    pub fn new(total_steps: usize, batch_size: usize, early_ckpt_step: usize, seed: u64) -> Self {
        TrainConfig {
            total_steps,
            batch_size,
            learning_rate: 3e-4,
            early_ckpt_step,
            late_ckpt_interval: None,
            eval_interval: total_steps.max(1),
            seed,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            grad_clip: default_grad_clip(),
        }
    }

    pub fn late_interval(&self) -> usize {
        self.late_ckpt_interval.unwrap_or((self.total_steps / 20).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0 < self.early_ckpt_step && self.early_ckpt_step < self.total_steps) {
            return bad(format!(
                "early_ckpt_step must satisfy 0 < t0 < total_steps (t0 = {}, T = {})",
                self.early_ckpt_step, self.total_steps
            ));
        }
        if self.late_ckpt_interval == Some(0) {
            return bad("late_ckpt_interval must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("adam_eps must be positive and grad_clip non-negative".into());
        }
        Ok(())
    }
}

/// Steps whose checkpoints survive a full run, ascending: `t0` followed by
/// the last three late steps.
pub fn retained_checkpoint_steps(cfg: &TrainConfig) -> Vec<usize> {
    let sched = CheckpointSchedule::new(cfg);
    let mut kept = Vec::new();
    let mut late = Vec::new();
    for s in 1..=cfg.total_steps {
        match sched.role(s) {
            Some(CheckpointRole::Early) => kept.push(s),
            Some(CheckpointRole::Late) => {
                late.push(s);
                if late.len() > LATE_CHECKPOINTS {
                    late.remove(0);
                }
            }
            None => {}
        }
    }
    kept.extend(late);
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CheckpointRole {
    Early,
    Late,
}

struct CheckpointSchedule {
    t0: usize,
    total: usize,
    interval: usize,
}

impl CheckpointSchedule {
    fn new(cfg: &TrainConfig) -> Self {
        CheckpointSchedule {
            t0: cfg.early_ckpt_step,
            total: cfg.total_steps,
            interval: cfg.late_interval(),
        }
    }

    fn role(&self, step: usize) -> Option<CheckpointRole> {
        if step == self.t0 {
            Some(CheckpointRole::Early)
        } else if step > self.t0 && (self.total - step).is_multiple_of(self.interval) {
            Some(CheckpointRole::Late)
        } else {
            None
        }
    }
}

/// Supplies training batches as indices into the sequence pool handed to
/// [`train`].
pub trait BatchSource {
    fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>>;
}

/// Observer called with the model at step 0 and after every update.
pub trait TrainHook {
    fn after_step(&mut self, step: usize, model: &LanguageModel) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub domain: String,
    pub log_ppl: f64,
}

/// Training loss per step and per-domain validation log-perplexity per
/// evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub train_loss: Vec<(usize, f64)>,
    pub validation: Vec<ValRecord>,
}

impl TrainLog {
    pub fn train_csv(&self) -> String {
        let mut out = String::from("step,train_loss\n");
        for (s, l) in &self.train_loss {
            out.push_str(&format!("{s},{}\n", fmt6(*l)));
        }
        out
    }

    pub fn validation_csv(&self) -> String {
        let mut out = String::from("step,domain,val_log_ppl\n");
        for r in &self.validation {
            out.push_str(&format!("{},{},{}\n", r.step, r.domain, fmt6(r.log_ppl)));
        }
        out
    }

    pub fn last_eval_step(&self) -> Option<usize> {
        self.validation.last().map(|r| r.step)
    }

    /// Per-domain log-perplexity at the last evaluation.
    pub fn final_validation(&self) -> BTreeMap<String, f64> {
        let Some(last) = self.last_eval_step() else {
            return BTreeMap::new();
        };
        self.validation
            .iter()
            .filter(|r| r.step == last)
            .map(|r| (r.domain.clone(), r.log_ppl))
            .collect()
    }

    pub fn save(&self, train_path: &Path, val_path: &Path, provenance: &Provenance) -> Result<()> {
        artifact::write_csv(train_path, provenance, &self.train_csv())?;
        artifact::write_csv(val_path, provenance, &self.validation_csv())
    }

    /// Reads the validation CSV back (training loss is not needed downstream).
    pub fn parse_validation_csv(body: &str) -> Result<Vec<ValRecord>> {
        let mut lines = body.lines();
        if lines.next() != Some("step,domain,val_log_ppl") {
            return Err(Error::format("validation log", "unexpected column header"));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 {
                    return Err(Error::format("validation log", format!("bad row {line:?}")));
                }
                Ok(ValRecord {
                    step: f[0]
                        .parse()
                        .map_err(|_| Error::format("validation log", format!("bad step {:?}", f[0])))?,
                    domain: f[1].to_string(),
                    log_ppl: parse_f64("validation log", f[2])?,
                })
            })
            .collect()
    }
}

/// Per-domain and domain-uniform average log-perplexity (nats per token).
#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityReport {
    pub per_domain: BTreeMap<String, f64>,
    pub average: f64,
}

/// Token-weighted mean NLL per domain, averaged uniformly over domains.
pub fn evaluate_perplexity(model: &LanguageModel, validation: &[PackedSequence]) -> Result<PerplexityReport> {
    evaluate_domains(model, validation, &[])
}

/// [`evaluate_perplexity`] that also names the domains expected in the
/// report; an expected domain without validation data is excluded with a
/// warning.
pub fn evaluate_domains(
    model: &LanguageModel,
    validation: &[PackedSequence],
    expected: &[String],
) -> Result<PerplexityReport> {
    if validation.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for chunk in validation.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let losses = model.sequence_losses(&seqs)?;
        for (s, l) in chunk.iter().zip(losses) {
            let n = s.tokens.len() - 1;
            let e = sums.entry(s.domain.clone()).or_insert((0.0, 0));
            e.0 += f64::from(l) * n as f64;
            e.1 += n;
        }
    }
    for d in expected {
        if !sums.contains_key(d) {
            log::warn!("domain {d:?} has no validation sequences; excluded from the average");
        }
    }
    let per_domain: BTreeMap<String, f64> = sums.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect();
    let average = per_domain.values().sum::<f64>() / per_domain.len() as f64;
    Ok(PerplexityReport { per_domain, average })
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    t: i32,
    m: GradientSet<f32>,
    v: GradientSet<f32>,
}

impl Adam {
    fn new(cfg: &TrainConfig, model: &LanguageModel) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            lr: cfg.learning_rate,
            t: 0,
            m: GradientSet::zeros_like(model.params()),
            v: GradientSet::zeros_like(model.params()),
        }
    }

    fn step(&mut self, model: &mut LanguageModel, grads: &GradientSet<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let lr = (self.lr / c1) as f32;
        let rc2 = (1.0 / c2).sqrt() as f32;
        let eps = self.eps as f32;
        for (name, p) in model.params_mut().iter_mut() {
            let g = grads.get(name).expect("gradients mirror parameters");
            let m = self.m.get_mut(name).expect("moments mirror parameters");
            let v = self.v.get_mut(name).expect("moments mirror parameters");
            update(p, g, m, v, b1, b2, lr, rc2, eps);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut Tensor<f32>,
    g: &Tensor<f32>,
    m: &mut Tensor<f32>,
    v: &mut Tensor<f32>,
    b1: f32,
    b2: f32,
    lr: f32,
    rc2: f32,
    eps: f32,
) {
    for (((p, &g), m), v) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * *m / ((*v).sqrt() * rc2 + eps);
    }
}

/// What [`train`] returns.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: LanguageModel,
    /// Early checkpoint first, then the late ones by ascending step.
    pub checkpoints: Vec<Checkpoint>,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn early(&self) -> Option<&Checkpoint> {
        self.checkpoints.first()
    }

    pub fn late(&self) -> &[Checkpoint] {
        self.checkpoints.get(1..).unwrap_or(&[])
    }
}

/// Runs `cfg.total_steps` Adam updates on batches drawn from `pool`.
///
/// Validation log-perplexity is recorded at step 0, every `eval_interval`
/// steps and at `T` (skipped when `validation` is empty).
pub fn train(
    mut model: LanguageModel,
    pool: &[PackedSequence],
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    validation: &[PackedSequence],
    hooks: &mut [&mut dyn TrainHook],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let domains: Vec<String> = {
        let mut d: Vec<String> = validation.iter().map(|s| s.domain.clone()).collect();
        d.sort();
        d.dedup();
        d
    };
    let mut log = TrainLog::default();
    let mut adam = Adam::new(cfg, &model);
    let sched = CheckpointSchedule::new(cfg);
    let mut early = None;
    let mut late: Vec<Checkpoint> = Vec::new();

    let evaluate = |model: &LanguageModel, step: usize, log: &mut TrainLog| -> Result<()> {
        if validation.is_empty() {
            return Ok(());
        }
        let rep = evaluate_domains(model, validation, &domains)?;
        log::info!("step {step}: validation log-perplexity {:.4}", rep.average);
        for (domain, v) in rep.per_domain {
            log.validation.push(ValRecord {
                step,
                domain,
                log_ppl: v,
            });
        }
        Ok(())
    };

    evaluate(&model, 0, &mut log)?;
    for h in hooks.iter_mut() {
        h.after_step(0, &model)?;
    }
    for step in 1..=cfg.total_steps {
        let idx = source.next_batch(cfg.batch_size)?;
        if idx.len() != cfg.batch_size {
            return Err(Error::Contract(format!(
                "batch source returned {} sequences, expected {}",
                idx.len(),
                cfg.batch_size
            )));
        }
        let seqs = idx
            .iter()
            .map(|&i| {
                pool.get(i)
                    .map(|s| s.tokens.as_slice())
                    .ok_or_else(|| Error::Contract(format!("batch index {i} outside pool of {}", pool.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let diagnose = |e: Error| -> Error {
            let ids: Vec<&str> = idx.iter().map(|&i| pool[i].sample_id.as_str()).collect();
            match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}; batch sample_ids {ids:?}")),
                other => other,
            }
        };
        let objective = LmObjective::new(model.config(), &seqs)?;
        let (loss, mut grads) = grad(&objective, model.params()).map_err(diagnose)?;
        if !loss.is_finite() {
            return Err(diagnose(Error::Numeric(format!("loss is {loss}"))));
        }
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(diagnose(Error::Numeric(format!("gradient norm is {norm}"))));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grads.scale((cfg.grad_clip / norm) as f32);
        }
        adam.step(&mut model, &grads);
        log.train_loss.push((step, f64::from(loss)));

        match sched.role(step) {
            Some(CheckpointRole::Early) => early = Some(Checkpoint::of(&model, step)),
            Some(CheckpointRole::Late) => {
                late.push(Checkpoint::of(&model, step));
                if late.len() > LATE_CHECKPOINTS {
                    late.remove(0);
                }
            }
            None => {}
        }
        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            evaluate(&model, step, &mut log)?;
        }
        for h in hooks.iter_mut() {
            h.after_step(step, &model)?;
        }
    }
    let mut checkpoints: Vec<Checkpoint> = early.into_iter().collect();
    checkpoints.extend(late);
    Ok(TrainOutcome {
        model,
        checkpoints,
        log,
    })
}

/// Replays a fixed list of batches, cycling when exhausted.
#[derive(Clone, Debug)]
pub struct FixedBatches {
    batches: Vec<Vec<usize>>,
    next: usize,
}

impl FixedBatches {
    pub fn new(batches: Vec<Vec<usize>>) -> Self {
        FixedBatches { batches, next: 0 }
    }
}

impl BatchSource for FixedBatches {
    fn next_batch(&mut self, _batch_size: usize) -> Result<Vec<usize>> {
        if self.batches.is_empty() {
            return Err(Error::Contract("no batches to replay".into()));
        }
        let b = self.batches[self.next % self.batches.len()].clone();
        self.next += 1;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(t: usize, t0: usize, interval: usize) -> TrainConfig {
        let mut c = TrainConfig::new(t, 2, t0, 0);
        c.late_ckpt_interval = Some(interval);
        c
    }

    #[test]
    fn checkpoint_schedule_example() {
        assert_eq!(retained_checkpoint_steps(&cfg(10, 3, 2)), vec![3, 6, 8, 10]);
        assert_eq!(retained_checkpoint_steps(&cfg(10, 9, 5)), vec![9, 10]);
        assert_eq!(retained_checkpoint_steps(&cfg(100, 20, 1)), vec![20, 98, 99, 100]);
        let c = TrainConfig::new(2000, 32, 400, 0);
        assert_eq!(c.late_interval(), 100);
        assert_eq!(retained_checkpoint_steps(&c), vec![400, 1800, 1900, 2000]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 0, 1).validate().is_err());
        assert!(cfg(10, 10, 1).validate().is_err());
        assert!(cfg(10, 3, 0).validate().is_err());
        assert!(cfg(10, 3, 2).validate().is_ok());
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            vocab_size: 32,
            context_len: 8,
        }
    }

    fn seq(id: &str, domain: &str, tokens: Vec<TokenId>) -> PackedSequence {
        PackedSequence {
            sample_id: id.into(),
            domain: domain.into(),
            tokens,
        }
    }

    #[test]
    fn train_keeps_scheduled_checkpoints_and_logs() {
        let pool = vec![
            seq("a", "x", vec![1, 2, 3, 4, 5, 6, 7, 8]),
            seq("b", "y", vec![8, 7, 6, 5, 4, 3, 2, 1]),
        ];
        let mut c = cfg(10, 3, 2);
        c.eval_interval = 4;
        let model = LanguageModel::init(tiny(), 3).unwrap();
        let mut src = FixedBatches::new(vec![vec![0, 1]]);
        let out = train(model, &pool, &mut src, &c, &pool, &mut []).unwrap();
        let steps: Vec<usize> = out.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![3, 6, 8, 10]);
        assert_eq!(out.log.train_loss.len(), 10);
        let evals: Vec<usize> = out.log.validation.iter().map(|r| r.step).collect();
        assert_eq!(evals, vec![0, 0, 4, 4, 8, 8, 10, 10]);
        assert_eq!(out.checkpoints.last().unwrap().params, *out.model.params());
    }

    #[test]
    fn uniform_model_log_ppl_is_log_vocab() {
        let mut model = LanguageModel::init(tiny(), 1).unwrap();
        for x in model.params_mut().get_mut("head.w").unwrap().data_mut() {
            *x = 0.0;
        }
        let val = vec![seq("a", "x", vec![1, 2, 3, 4]), seq("b", "y", vec![5, 6, 7, 8, 9])];
        let rep = evaluate_perplexity(&model, &val).unwrap();
        for v in rep.per_domain.values() {
            assert!((v - (32f64).ln()).abs() < 1e-5);
        }
        assert!(evaluate_perplexity(&model, &[]).is_err());
    }

    #[test]
    fn duplicating_a_domain_keeps_its_mean_and_average_is_domain_uniform() {
        let model = LanguageModel::init(tiny(), 5).unwrap();
        let val = vec![
            seq("a", "x", vec![1, 2, 3, 4]),
            seq("b", "x", vec![3, 1, 2, 9]),
            seq("c", "y", vec![5, 6, 7, 8]),
        ];
        let rep = evaluate_perplexity(&model, &val).unwrap();
        let mut doubled = val.clone();
        doubled.extend(val.iter().filter(|s| s.domain == "x").cloned());
        let rep2 = evaluate_perplexity(&model, &doubled).unwrap();
        assert!((rep.per_domain["x"] - rep2.per_domain["x"]).abs() < 1e-9);
        assert!((rep2.average - (rep2.per_domain["x"] + rep2.per_domain["y"]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn validation_csv_roundtrip() {
        let log = TrainLog {
            train_loss: vec![(1, 2.5)],
            validation: vec![ValRecord {
                step: 0,
                domain: "x".into(),
                log_ppl: 1.25,
            }],
        };
        assert_eq!(log.train_csv(), "step,train_loss\n1,2.500000\n");
        assert_eq!(
            TrainLog::parse_validation_csv(&log.validation_csv()).unwrap(),
            log.validation
        );
    }
}
