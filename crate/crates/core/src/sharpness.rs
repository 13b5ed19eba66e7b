//! Sharpness: the top Hessian eigenvalue of the loss restricted to the
//! feed-forward weight matrices, found by power iteration on
//! finite-difference Hessian-vector products.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{fmt6, parse_f64};
use crate::corpus::PackedSequence;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, LmObjective, TokenId};
use crate::tensor::{hvp, GradientSet, ParamKind};
use crate::trainer::TrainHook;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerResult {
    /// Signed Rayleigh quotient of the final iterate.
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    /// Number of operator applications.
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Power iteration from a seeded Gaussian unit vector.
///
/// Stops once successive Rayleigh quotients differ by less than
/// `tol * max(1, |λ|)`, or after `max_iters` applications. An operator that
/// maps the iterate to zero yields eigenvalue 0, converged.
pub fn power_method(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<PowerResult> {
    if max_iters == 0 || !(tol > 0.0) || dim == 0 {
        return Err(Error::Contract(format!(
            "power method needs dim, max_iters >= 1 and tol > 0 (dim {dim}, max_iters {max_iters}, tol {tol})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut prev: Option<f64> = None;
    for it in 1..=max_iters {
        let hv = apply(&v)?;
        if hv.len() != dim {
            return Err(Error::Contract(format!(
                "operator returned {} entries for dim {dim}",
                hv.len()
            )));
        }
        let lambda = dot(&v, &hv);
        let hn = norm(&hv);
        if !lambda.is_finite() || !hn.is_finite() {
            return Err(Error::Numeric(format!(
                "operator produced non-finite values at iteration {it}"
            )));
        }
        if hn == 0.0 {
            return Ok(PowerResult {
                eigenvalue: 0.0,
                eigenvector: v,
                iterations: it,
                converged: true,
            });
        }
        if let Some(p) = prev {
            if (lambda - p).abs() < tol * lambda.abs().max(1.0) {
                return Ok(PowerResult {
                    eigenvalue: lambda,
                    eigenvector: v,
                    iterations: it,
                    converged: true,
                });
            }
        }
        if it == max_iters {
            return Ok(PowerResult {
                eigenvalue: lambda,
                eigenvector: v,
                iterations: it,
                converged: false,
            });
        }
        prev = Some(lambda);
        v = hv.into_iter().map(|x| x / hn).collect();
    }
    unreachable!("loop returns on its last iteration")
}

fn default_n_samples() -> usize {
    8
}
fn default_max_iters() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-4
}
fn default_hvp_eps() -> f64 {
    1e-3
}
fn default_every_k() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    /// Probe sequences drawn per validation domain.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Finite-difference step of the Hessian-vector product.
    #[serde(default = "default_hvp_eps")]
    pub hvp_eps: f64,
    #[serde(default = "default_every_k")]
    pub every_k: usize,
    pub seed: u64,
}

impl SharpnessConfig {
    pub fn with_seed(seed: u64) -> Self {
        SharpnessConfig {
            n_samples: default_n_samples(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            hvp_eps: default_hvp_eps(),
            every_k: default_every_k(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.max_iters == 0 || self.every_k == 0 {
            return Err(Error::Config(
                "sharpness n_samples, max_iters and every_k must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0) || !(self.hvp_eps > 0.0) {
            return Err(Error::Config("sharpness tol and hvp_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessRecord {
    pub step: usize,
    pub top_eigenvalue: f64,
    pub n_probe_samples: usize,
    pub power_iterations_used: usize,
    pub converged: bool,
}

/// Probe seed for a given training step, so a standalone probe of a saved
/// checkpoint can replay the in-training probe exactly.
pub fn probe_seed(seed: u64, step: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n_samples` distinct sequences per domain (all of them when a
/// domain has fewer), domains in name order.
pub fn select_probe_set(validation: &[PackedSequence], n_samples: usize, seed: u64) -> Result<Vec<&PackedSequence>> {
    let mut by_domain: BTreeMap<&str, Vec<&PackedSequence>> = BTreeMap::new();
    for s in validation {
        by_domain.entry(s.domain.as_str()).or_default().push(s);
    }
    if by_domain.is_empty() {
        return Err(Error::Contract("probe needs validation sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (domain, seqs) in by_domain {
        if seqs.len() < n_samples {
            log::warn!(
                "domain {domain:?} has {} validation sequences, fewer than the {n_samples} probe samples",
                seqs.len()
            );
        }
        let k = n_samples.min(seqs.len());
        let mut picked = sample(&mut rng, seqs.len(), k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| seqs[i]));
    }
    Ok(out)
}

/// Top eigenvalue of the Hessian of the mean probe loss with respect to the
/// dense (feed-forward) weights, at the model's current parameters.
///
/// Hessian-vector products run in the model's f32 precision; the power
/// iteration itself accumulates in f64.
pub fn probe_sharpness(
    model: &LanguageModel,
    validation: &[PackedSequence],
    cfg: &SharpnessConfig,
    seed: u64,
    step: usize,
) -> Result<SharpnessRecord> {
    cfg.validate()?;
    let probe = select_probe_set(validation, cfg.n_samples, seed)?;
    let seqs: Vec<&[TokenId]> = probe.iter().map(|s| s.tokens.as_slice()).collect();
    let objective = LmObjective::new(model.config(), &seqs)?;
    let params = model.params();
    let dense = params.names_of_kind(ParamKind::Dense);
    let dim: usize = dense.iter().map(|n| params.get(n).map_or(0, |t| t.len())).sum();
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let dir = GradientSet::unflatten(&v32, &dense, params)?;
        let hv = hvp(&objective, params, &dir, cfg.hvp_eps as f32)?.flatten(&dense)?;
        Ok(hv.into_iter().map(f64::from).collect())
    };
    let record = match power_method(apply, dim, cfg.max_iters, cfg.tol, seed) {
        Ok(r) => {
            if r.eigenvalue < 0.0 {
                log::warn!(
                    "step {step}: dominant Hessian eigenvalue is negative ({}); magnitude {} reported with its sign",
                    r.eigenvalue,
                    r.eigenvalue.abs()
                );
            }
            if !r.converged {
                log::warn!(
                    "step {step}: power method stopped after {} iterations unconverged",
                    r.iterations
                );
            }
            SharpnessRecord {
                step,
                top_eigenvalue: r.eigenvalue,
                n_probe_samples: probe.len(),
                power_iterations_used: r.iterations,
                converged: r.converged,
            }
        }
        Err(Error::Numeric(m)) => {
            log::warn!("step {step}: sharpness probe hit a non-finite value: {m}");
            SharpnessRecord {
                step,
                top_eigenvalue: f64::NAN,
                n_probe_samples: probe.len(),
                power_iterations_used: 0,
                converged: false,
            }
        }
        Err(e) => return Err(e),
    };
    Ok(record)
}

/// Trainer hook probing at steps `0, k, 2k, ...` and at the final step.
pub struct SharpnessTrace<'a> {
    pub config: SharpnessConfig,
    pub total_steps: usize,
    pub validation: &'a [PackedSequence],
    pub records: Vec<SharpnessRecord>,
}

impl<'a> SharpnessTrace<'a> {
    pub fn new(config: SharpnessConfig, total_steps: usize, validation: &'a [PackedSequence]) -> Self {
        SharpnessTrace {
            config,
            total_steps,
            validation,
            records: Vec::new(),
        }
    }

    pub fn probes_at(&self, step: usize) -> bool {
        step.is_multiple_of(self.config.every_k) || step == self.total_steps
    }
}

impl TrainHook for SharpnessTrace<'_> {
    fn after_step(&mut self, step: usize, model: &LanguageModel) -> Result<()> {
        if self.probes_at(step) {
            let seed = probe_seed(self.config.seed, step);
            let rec = probe_sharpness(model, self.validation, &self.config, seed, step)?;
            log::info!(
                "step {step}: top eigenvalue {:.4} ({} iterations)",
                rec.top_eigenvalue,
                rec.power_iterations_used
            );
            self.records.push(rec);
        }
        Ok(())
    }
}

/// Steps probed by a trace over `total_steps` with cadence `every_k`.
pub fn trace_steps(total_steps: usize, every_k: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..=total_steps).step_by(every_k.max(1)).collect();
    if steps.last() != Some(&total_steps) {
        steps.push(total_steps);
    }
    steps
}

pub fn trace_csv(records: &[SharpnessRecord]) -> String {
    let mut out = String::from("step,top_eigenvalue,converged,iters\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            fmt6(r.top_eigenvalue),
            r.converged,
            r.power_iterations_used
        ));
    }
    out
}

/// Parses [`trace_csv`] output; `n_probe_samples` is not persisted and
/// comes back as 0.
pub fn parse_trace_csv(body: &str) -> Result<Vec<SharpnessRecord>> {
    let mut lines = body.lines();
    if lines.next() != Some("step,top_eigenvalue,converged,iters") {
        return Err(Error::format("sharpness trace", "unexpected column header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format("sharpness trace", format!("bad row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(SharpnessRecord {
                step: f[0].parse().map_err(|_| bad())?,
                top_eigenvalue: parse_f64("sharpness trace", f[1])?,
                n_probe_samples: 0,
                converged: f[2].parse().map_err(|_| bad())?,
                power_iterations_used: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
