//! Checks shared by the integration tests and the acceptance harness. Each
//! returns an [`Outcome`] carrying the measured quantity, so the harness can
//! print it and the tests can assert on it.
#![allow(dead_code)]

pub mod desk;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use curriculum_core::analysis::{flop_overhead, FlopCostModel};
use curriculum_core::artifact::{file_sha256, Provenance};
use curriculum_core::checkpoint::Checkpoint;
use curriculum_core::config::RunConfig;
use curriculum_core::corpus::PackedSequence;
use curriculum_core::curriculum::{
    eligible_pool, threshold_score, unlocked_fraction, CurriculumSampler, CurriculumSchedule, Mode,
};
use curriculum_core::learnability::{rank, score_corpus, LearnabilityTable, Ranking, Scope, ScoreRow};
use curriculum_core::model::{LanguageModel, LmObjective, ModelConfig, TokenId};
use curriculum_core::pipeline::{Pipeline, Stage};
use curriculum_core::sharpness::power_method;
use curriculum_core::tensor::ops::AttentionShape;
use curriculum_core::tensor::{
    grad, register_params, Objective, ParamKind, ParamVars, ParameterSet, Tape, Tensor, Var,
};
use curriculum_core::Result;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn assert(self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config_path(name: &str) -> PathBuf {
    workspace_root().join("configs").join(name)
}

// ---------------------------------------------------------------------------
// gradients

pub const GRAD_TOLERANCE: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            std * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn loss_value<O: Objective<f64> + ?Sized>(objective: &O, params: &ParameterSet<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params).unwrap();
    let loss = objective.loss(&mut tape, &vars).unwrap();
    tape.value(loss).item().unwrap()
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over
/// every coordinate of every parameter.
pub fn max_relative_grad_error<O: Objective<f64> + ?Sized>(objective: &O, params: &ParameterSet<f64>) -> f64 {
    let (_, analytic) = grad(objective, params).unwrap();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let len = params.get(name).unwrap().len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (loss_value(objective, &plus) - loss_value(objective, &minus)) / (2.0 * FD_STEP);
            let a = analytic.get(name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

type Graph = Box<dyn Fn(&mut Tape<f64>, &ParamVars) -> Result<Var>>;

/// Random small computation number `index`, cycling through five graph
/// shapes that between them use every differentiable op.
pub fn random_computation(index: usize) -> (ParameterSet<f64>, Graph) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index as u64);
    let rows = rng.random_range(2..=4);
    let cols = rng.random_range(2..=4);
    let hidden = rng.random_range(2..=5);
    let mut p = ParameterSet::new();
    let put = |p: &mut ParameterSet<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]| {
        p.insert(name, ParamKind::Dense, gaussian(rng, shape, 0.8)).unwrap();
    };
    match index % 5 {
        0 => {
            put(&mut p, &mut rng, "x", &[rows, cols]);
            put(&mut p, &mut rng, "w1", &[cols, hidden]);
            put(&mut p, &mut rng, "b1", &[hidden]);
            put(&mut p, &mut rng, "w2", &[hidden, cols]);
            let graph: Graph = Box::new(|t, v| {
                let h = t.matmul(v.get("x")?, v.get("w1")?)?;
                let h = t.add_bias(h, v.get("b1")?)?;
                let h = t.gelu(h)?;
                let y = t.matmul(h, v.get("w2")?)?;
                let half = t.scale(v.get("x")?, 0.5)?;
                let y = t.add(y, half)?;
                let sq = t.mul(y, y)?;
                t.mean(sq)
            });
            (p, graph)
        }
        1 => {
            put(&mut p, &mut rng, "x", &[rows, cols]);
            put(&mut p, &mut rng, "w", &[cols, hidden]);
            put(&mut p, &mut rng, "gain", &[hidden]);
            put(&mut p, &mut rng, "shift", &[hidden]);
            let weights = gaussian(&mut rng, &[rows, hidden], 1.0);
            let graph: Graph = Box::new(move |t, v| {
                let z = t.matmul(v.get("x")?, v.get("w")?)?;
                let z = t.layer_norm(z, v.get("gain")?, v.get("shift")?)?;
                let s = t.softmax(z)?;
                let c = t.constant(weights.clone())?;
                let y = t.mul(s, c)?;
                t.sum(y)
            });
            (p, graph)
        }
        2 => {
            put(&mut p, &mut rng, "x", &[rows, cols]);
            put(&mut p, &mut rng, "w", &[cols, hidden]);
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..hidden)).collect();
            let mask: Vec<bool> = (0..rows).map(|i| i == 0 || rng.random_bool(0.7)).collect();
            let graph: Graph = Box::new(move |t, v| {
                let x = t.gelu(v.get("x")?)?;
                let logits = t.matmul(x, v.get("w")?)?;
                t.cross_entropy(logits, &targets, Some(&mask))
            });
            (p, graph)
        }
        3 => {
            let heads = rng.random_range(1..=2);
            let d = heads * rng.random_range(1..=3);
            let batch = rng.random_range(1..=2);
            let seq = rng.random_range(2..=4);
            put(&mut p, &mut rng, "x", &[batch * seq, cols]);
            for w in ["wq", "wk", "wv"] {
                put(&mut p, &mut rng, w, &[cols, d]);
            }
            let weights = gaussian(&mut rng, &[batch * seq, d], 1.0);
            let shape = AttentionShape { batch, seq, heads };
            let graph: Graph = Box::new(move |t, v| {
                let x = v.get("x")?;
                let q = t.matmul(x, v.get("wq")?)?;
                let k = t.matmul(x, v.get("wk")?)?;
                let val = t.matmul(x, v.get("wv")?)?;
                let o = t.causal_attention(q, k, val, shape)?;
                let c = t.constant(weights.clone())?;
                let y = t.mul(o, c)?;
                t.sum(y)
            });
            (p, graph)
        }
        _ => {
            let vocab = hidden + 2;
            put(&mut p, &mut rng, "table", &[vocab, cols]);
            put(&mut p, &mut rng, "gain", &[cols]);
            put(&mut p, &mut rng, "shift", &[cols]);
            put(&mut p, &mut rng, "head", &[cols, vocab]);
            let ids: Vec<usize> = (0..rows + 1).map(|_| rng.random_range(0..vocab)).collect();
            let targets: Vec<usize> = (0..rows + 1).map(|_| rng.random_range(0..vocab)).collect();
            let graph: Graph = Box::new(move |t, v| {
                let e = t.embedding(v.get("table")?, &ids)?;
                let z = t.layer_norm(e, v.get("gain")?, v.get("shift")?)?;
                let logits = t.matmul(z, v.get("head")?)?;
                t.cross_entropy(logits, &targets, None)
            });
            (p, graph)
        }
    }
}

/// A 1-layer transformer in f64 with weights spread out enough that every
/// nonlinearity is exercised.
pub fn transformer_case() -> (ModelConfig, ParameterSet<f64>, Vec<Vec<TokenId>>) {
    let config = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        vocab_size: 12,
        context_len: 6,
    };
    let model = LanguageModel::init(config.clone(), 5).unwrap();
    let mut params = model.params().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += 0.3 * z;
        }
    }
    let seqs = (0..2)
        .map(|_| (0..6).map(|_| rng.random_range(0..12)).collect())
        .collect();
    (config, params, seqs)
}

pub fn gradient_suite() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (params, graph) = random_computation(i);
        worst = worst.max(max_relative_grad_error(&graph, &params));
    }
    let (config, params, seqs) = transformer_case();
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let objective = LmObjective::new(&config, &refs).unwrap();
    let transformer = max_relative_grad_error(&objective, &params);
    let pass = worst < GRAD_TOLERANCE && transformer < GRAD_TOLERANCE;
    Outcome::new(
        pass,
        format!("max rel err {worst:.2e} over 20 computations, {transformer:.2e} on the 1-layer transformer (< {GRAD_TOLERANCE:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// power method

pub const POWER_TOLERANCE: f64 = 1e-6;

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| -> f64 { StandardNormal.sample(&mut *rng) });
    a.qr().q()
}

/// Symmetric matrix whose dominant eigenvalue (by magnitude) leads the rest
/// by at least 5%.
pub fn gapped_symmetric(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let top: f64 = rng.random_range(0.5..10.0) * if rng.random_bool(0.3) { -1.0 } else { 1.0 };
    let bound = 0.95 * top.abs();
    let eig: Vec<f64> = (0..dim)
        .map(|i| if i == 0 { top } else { rng.random_range(-bound..bound) })
        .collect();
    let q = random_orthogonal(dim, rng);
    &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig)) * q.transpose()
}

/// Eigenvalue of largest magnitude from a dense symmetric eigensolver.
pub fn dominant_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    e.iter()
        .copied()
        .fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a })
}

pub fn power_on(m: &DMatrix<f64>, seed: u64) -> curriculum_core::sharpness::PowerResult {
    let dim = m.nrows();
    power_method(
        |v| Ok((m * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec()),
        dim,
        20_000,
        1e-14,
        seed,
    )
    .unwrap()
}

pub fn power_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let mut unconverged = 0;
    let mut cases: Vec<DMatrix<f64>> = (0..48)
        .map(|_| {
            let dim = rng.random_range(2..=20);
            gapped_symmetric(dim, &mut rng)
        })
        .collect();
    cases.push(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        1.0, -7.0, 3.0, 6.5,
    ])));
    cases.push(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        4.0, 0.5, -2.0,
    ])));
    for (i, m) in cases.iter().enumerate() {
        let r = power_on(m, i as u64);
        let want = dominant_eigenvalue(m);
        worst = worst.max((r.eigenvalue - want).abs() / want.abs());
        unconverged += usize::from(!r.converged);
    }
    let zero = power_on(&DMatrix::zeros(6, 6), 1);
    let zero_ok = zero.eigenvalue == 0.0 && zero.converged;
    Outcome::new(
        worst < POWER_TOLERANCE && unconverged == 0 && zero_ok,
        format!(
            "max rel err {worst:.2e} over 50 matrices (< {POWER_TOLERANCE:.0e}), {unconverged} unconverged, zero matrix -> {} (converged {})",
            zero.eigenvalue, zero.converged
        ),
    )
}

// ---------------------------------------------------------------------------
// schedule and pools

pub fn random_table(n_per_domain: usize, domains: &[&str], seed: u64, tie_every: usize) -> LearnabilityTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for d in domains {
        for i in 0..n_per_domain {
            let late: f64 = rng.random_range(1.0..3.0);
            let gain: f64 = if tie_every > 0 && i % tie_every == 0 {
                0.5
            } else {
                rng.random_range(-0.5..2.0)
            };
            rows.push(ScoreRow::new(format!("{d}/{i:04}"), *d, late + gain, late));
        }
    }
    LearnabilityTable::new(rows, Provenance::default()).unwrap()
}

/// Schedule values on the swept grid, pool nesting and curriculum / anti
/// mirroring.
pub fn schedule_suite() -> Outcome {
    let total = 10_000usize;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for lambda0 in [0.25, 0.5] {
        for t_c in [2000usize, 5000, 10_000] {
            let s = CurriculumSchedule {
                lambda0,
                t_c,
                mode: Mode::Curriculum,
                scope: Scope::Global,
            };
            for t in [0, t_c / 2, t_c, total] {
                let want = if t >= t_c {
                    1.0
                } else {
                    lambda0 + (1.0 - lambda0) * t as f64 / t_c as f64
                };
                worst = worst.max((unlocked_fraction(t, &s) - want).abs());
                checked += 1;
            }
            // Anchors: λ0 at 0, halfway between λ0 and 1 at T_c/2, 1 from T_c on.
            worst = worst.max((unlocked_fraction(0, &s) - lambda0).abs());
            worst = worst.max((unlocked_fraction(t_c / 2, &s) - (1.0 + lambda0) / 2.0).abs());
            worst = worst.max((unlocked_fraction(t_c, &s) - 1.0).abs());
        }
    }
    let values_ok = worst < 1e-12;

    let mut problems = Vec::new();
    for scope in [Scope::Global, Scope::PerDomain] {
        let table = random_table(37, &["a", "b", "c"], 3, 5);
        let ranking = rank(&table, scope);
        let mut reversed = ranking.clone();
        for g in &mut reversed.groups {
            g.sample_ids.reverse();
            g.scores.reverse();
        }
        let mut prev: Option<(std::collections::BTreeSet<String>, std::collections::BTreeSet<String>)> = None;
        for k in 1..=40 {
            let f = k as f64 / 40.0;
            let cur = eligible_pool(&ranking, f, Mode::Curriculum).unwrap();
            let anti = eligible_pool(&ranking, f, Mode::AntiCurriculum).unwrap();
            if anti != eligible_pool(&reversed, f, Mode::Curriculum).unwrap() {
                problems.push(format!(
                    "{scope:?}: anti pool at f={f} is not the mirrored curriculum pool"
                ));
            }
            if cur.len() != anti.len() {
                problems.push(format!("{scope:?}: pool sizes differ at f={f}"));
            }
            if let Some((pc, pa)) = &prev {
                if !pc.is_subset(&cur) || !pa.is_subset(&anti) {
                    problems.push(format!("{scope:?}: pools not nested at f={f}"));
                }
            }
            prev = Some((cur, anti));
        }
        let (full, _) = prev.unwrap();
        if full.len() != table.len() {
            problems.push(format!("{scope:?}: f=1 pool misses samples"));
        }
    }
    Outcome::new(
        values_ok && problems.is_empty(),
        format!(
            "{checked} grid values, max abs err {worst:.1e}; nesting/mirroring problems: {}",
            if problems.is_empty() {
                "none".to_string()
            } else {
                problems.join("; ")
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// learnability scores

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        vocab_size: 256,
        context_len: 12,
    }
}

pub fn random_sequences(n: usize, context_len: usize, seed: u64) -> Vec<PackedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let domain = if i % 2 == 0 { "even" } else { "odd" };
            // Odd-domain samples repeat a short motif, even ones are noise.
            let tokens = (0..context_len)
                .map(|j| {
                    if i % 2 == 1 {
                        40 + (j % 3) as TokenId
                    } else {
                        rng.random_range(1..256)
                    }
                })
                .collect();
            PackedSequence {
                sample_id: format!("train/{domain}/{i:06}"),
                domain: domain.to_string(),
                tokens,
            }
        })
        .collect()
}

fn jittered_checkpoint(config: &ModelConfig, step: usize, seed: u64) -> Checkpoint {
    let mut model = LanguageModel::init(config.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params_mut().iter_mut() {
        for x in t.data_mut() {
            *x += 0.05 * rng.random_range(-1.0f32..1.0);
        }
    }
    Checkpoint::of(&model, step)
}

/// Mean next-token NLL of one sequence, recomputed in f64.
pub fn oracle_loss(ckpt: &Checkpoint, tokens: &[TokenId]) -> f64 {
    let params = ckpt.params.cast::<f64>();
    let objective = LmObjective::new(&ckpt.config, &[tokens]).unwrap();
    grad(&objective, &params).unwrap().0
}

pub fn learnability_suite() -> Outcome {
    let config = tiny_config();
    let seqs = random_sequences(10, config.context_len, 4);
    let early = jittered_checkpoint(&config, 2, 1);
    let late: Vec<Checkpoint> = (0..3)
        .map(|k| jittered_checkpoint(&config, 5 + k, 20 + k as u64))
        .collect();
    let table = score_corpus(&early, &late, &seqs, Provenance::new("learnability", "test")).unwrap();

    let identity_breaks = table
        .rows
        .iter()
        .filter(|r| r.learnability.0 != Some(r.l_early.0.unwrap() - r.l_late.0.unwrap()))
        .count();
    let round_trip = LearnabilityTable::from_csv(&table.to_csv())
        .map(|t| t == table)
        .unwrap_or(false);

    let mut oracle_err = 0.0f64;
    for row in &table.rows {
        let s = seqs.iter().find(|s| s.sample_id == row.sample_id).unwrap();
        let e = oracle_loss(&early, &s.tokens);
        let l = late.iter().map(|c| oracle_loss(c, &s.tokens)).sum::<f64>() / 3.0;
        oracle_err = oracle_err
            .max((row.l_early.nats() - e).abs())
            .max((row.l_late.nats() - l).abs())
            .max((row.score() - (e - l)).abs());
    }

    let same: Vec<Checkpoint> = (0..3)
        .map(|k| Checkpoint {
            step: 10 + k,
            ..early.clone()
        })
        .collect();
    let zero = score_corpus(&early, &same, &seqs, Provenance::default()).unwrap();
    let nonzero = zero.rows.iter().filter(|r| r.learnability.0 != Some(0)).count();

    let pass = identity_breaks == 0 && round_trip && oracle_err < 1e-4 && nonzero == 0 && table.len() == 10;
    Outcome::new(
        pass,
        format!(
            "{identity_breaks} identity breaks, csv round trip {round_trip}, max |table - f64 oracle| {oracle_err:.1e} nats (< 1e-4), \
             {nonzero} nonzero scores with identical checkpoints"
        ),
    )
}

// ---------------------------------------------------------------------------
// pipeline determinism

pub fn artifact_checksums(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, file_sha256(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn run_toy(out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(&config_path("toy.toml"), seed)?;
    Pipeline::new(cfg, out).run(Stage::All)
}

pub fn determinism_suite() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = run_toy(a.path(), None).and_then(|_| run_toy(b.path(), None)) {
        return Outcome::new(false, format!("toy pipeline failed: {e}"));
    }
    let ca = artifact_checksums(a.path());
    let cb = artifact_checksums(b.path());
    let differing: Vec<&String> = ca.keys().filter(|k| ca.get(*k) != cb.get(*k)).collect();
    let expected = [
        "scores/learnability.csv",
        "main/curriculum/val_log.csv",
        "main/anti-curriculum/val_log.csv",
        "main/uniform/val_log.csv",
        "main/uniform/sharpness.csv",
        "analysis/comparison.csv",
    ];
    let missing: Vec<&&str> = expected.iter().filter(|f| !ca.contains_key(**f)).collect();
    Outcome::new(
        differing.is_empty() && ca.len() == cb.len() && missing.is_empty(),
        format!(
            "{} artifacts compared, {} differ, missing {:?}",
            ca.len(),
            differing.len(),
            missing
        ),
    )
}

// ---------------------------------------------------------------------------
// sampler statistics

pub const CHI_SQUARE_ALPHA: f64 = 0.001;

pub fn uniform_chi_square(draws: usize, seed: u64) -> (f64, f64) {
    let table = random_table(10, &["only"], 9, 0);
    let ranking = rank(&table, Scope::Global);
    let ids: Vec<&str> = table.rows.iter().map(|r| r.sample_id.as_str()).collect();
    let schedule = CurriculumSchedule {
        lambda0: 0.5,
        t_c: 100,
        mode: Mode::Uniform,
        scope: Scope::Global,
    };
    let mut sampler = CurriculumSampler::new(&ranking, schedule, &ids, seed, true).unwrap();
    let mut counts = [0u64; 10];
    let batch = 100;
    for _ in 0..draws / batch {
        for i in sampler.sample_batch(batch).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = draws as f64 / 10.0;
    let stat = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum::<f64>();
    let critical = ChiSquared::new(9.0).unwrap().inverse_cdf(1.0 - CHI_SQUARE_ALPHA);
    (stat, critical)
}

/// Draws `draws` samples across a curriculum schedule and counts any that
/// fall below the current threshold or outside the eligible pool.
pub fn curriculum_violations(draws: usize, scope: Scope, mode: Mode, with_replacement: bool) -> usize {
    let table = random_table(40, &["a", "b", "c"], 12, 7);
    let ranking: Ranking = rank(&table, scope);
    let ids: Vec<&str> = table.rows.iter().map(|r| r.sample_id.as_str()).collect();
    let score: BTreeMap<&str, f64> = table.rows.iter().map(|r| (r.sample_id.as_str(), r.score())).collect();
    let group_of: BTreeMap<&str, usize> = ranking
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| grp.sample_ids.iter().map(move |id| (id.as_str(), g)))
        .collect();
    let schedule = CurriculumSchedule {
        lambda0: 0.25,
        t_c: 800,
        mode,
        scope,
    };
    let mut sampler = CurriculumSampler::new(&ranking, schedule.clone(), &ids, 5, with_replacement).unwrap();
    let batch = 9;
    let mut violations = 0;
    for step in 0..draws / batch {
        let f = unlocked_fraction(step, &schedule);
        let pool = eligible_pool(&ranking, f, mode).unwrap();
        let thresholds: Vec<f64> = ranking
            .groups
            .iter()
            .map(|g| threshold_score(g, f, mode).unwrap())
            .collect();
        for i in sampler.sample_batch(batch).unwrap() {
            let id = ids[i];
            let s = score[id];
            let th = thresholds[group_of[id]];
            let below = match mode {
                Mode::Curriculum => s < th,
                Mode::AntiCurriculum => s > th,
                Mode::Uniform => false,
            };
            if below || !pool.contains(id) {
                violations += 1;
            }
        }
    }
    violations
}

pub fn sampler_suite() -> Outcome {
    let (stat, critical) = uniform_chi_square(1_000_000, 31);
    let violations = curriculum_violations(100_000, Scope::PerDomain, Mode::Curriculum, true)
        + curriculum_violations(100_000, Scope::Global, Mode::Curriculum, false);
    Outcome::new(
        stat < critical && violations == 0,
        format!(
            "uniform chi-square {stat:.2} vs critical {critical:.2} (df 9, alpha {CHI_SQUARE_ALPHA}); \
             {violations} below-threshold draws in 2 x 1e5 curriculum draws"
        ),
    )
}

// ---------------------------------------------------------------------------
// FLOP model

pub fn flop_suite() -> Outcome {
    let m = FlopCostModel {
        c1: 10,
        c2: 1,
        steps: 100,
        presample_batch: 320,
        train_batch: 64,
        train_size: 6400,
        curriculum_steps: 100,
    };
    let o = flop_overhead(&m).unwrap();
    Outcome::new(
        o.rho_loss == 416_000 && o.curriculum == 6400 && o.ratio < 0.02,
        format!(
            "online selection {} (want 416000), curriculum {} (want 6400), ratio {:.4} (< 0.02)",
            o.rho_loss, o.curriculum, o.ratio
        ),
    )
}
