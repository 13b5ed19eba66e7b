//! Threshold-decay curriculum sampler.
//!
//! At step `t` the unlocked fraction is `f(t) = min(1, λ0 + (1 - λ0) t / T_c)`.
//! Curriculum mode draws from the top `ceil(f * N)` of each ranking group,
//! anti-curriculum from the bottom `ceil(f * N)` and uniform from all `N`.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learnability::{RankGroup, Ranking, Scope};
use crate::trainer::BatchSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Curriculum,
    AntiCurriculum,
    Uniform,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Curriculum, Mode::AntiCurriculum, Mode::Uniform];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Curriculum => "curriculum",
            Mode::AntiCurriculum => "anti-curriculum",
            Mode::Uniform => "uniform",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub lambda0: f64,
    pub t_c: usize,
    pub mode: Mode,
    pub scope: Scope,
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0 <= 1.0) {
            return Err(Error::Config(format!(
                "lambda0 must lie in (0, 1], got {}",
                self.lambda0
            )));
        }
        if self.t_c == 0 {
            return Err(Error::Config("t_c must be at least 1".into()));
        }
        Ok(())
    }
}

/// `min(1, λ0 + (1 - λ0) t / T_c)`.
pub fn unlocked_fraction(t: usize, schedule: &CurriculumSchedule) -> f64 {
    if t >= schedule.t_c {
        return 1.0;
    }
    let f = schedule.lambda0 + (1.0 - schedule.lambda0) * t as f64 / schedule.t_c as f64;
    f.min(1.0)
}

/// `ceil(f * n)` clamped to `1..=n`. A hair of slack keeps values like
/// `0.37 * 100 = 37.000000000000004` from rounding up to 38.
pub fn pool_size(f: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let m = (f * n as f64 - 1e-9).ceil();
    (m.max(1.0) as usize).min(n)
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Contract(format!(
            "unlocked fraction must lie in (0, 1], got {f}"
        )));
    }
    Ok(())
}

/// Positions `start..start + len` of a group's descending ranking that are
/// eligible.
fn pool_range(n: usize, f: f64, mode: Mode) -> (usize, usize) {
    match mode {
        Mode::Uniform => (0, n),
        Mode::Curriculum => (0, pool_size(f, n)),
        Mode::AntiCurriculum => {
            let m = pool_size(f, n);
            (n - m, m)
        }
    }
}

/// Sample ids eligible at fraction `f`; the scope is the ranking's.
pub fn eligible_pool(ranking: &Ranking, f: f64, mode: Mode) -> Result<BTreeSet<String>> {
    check_fraction(f)?;
    let mut out = BTreeSet::new();
    for g in &ranking.groups {
        if g.is_empty() {
            return Err(Error::Config(format!("ranking group {:?} is empty", g.domain)));
        }
        let (start, len) = pool_range(g.len(), f, mode);
        out.extend(g.sample_ids[start..start + len].iter().cloned());
    }
    Ok(out)
}

/// Score at the pool boundary: the `ceil(f * N)`-th score counted from the
/// top in curriculum mode, from the bottom in anti-curriculum mode, and the
/// lowest score in uniform mode.
pub fn threshold_score(group: &RankGroup, f: f64, mode: Mode) -> Result<f64> {
    check_fraction(f)?;
    if group.is_empty() {
        return Err(Error::Config("threshold of an empty ranking group".into()));
    }
    let n = group.len();
    let m = pool_size(f, n);
    Ok(match mode {
        Mode::Curriculum => group.scores[m - 1],
        Mode::AntiCurriculum => group.scores[n - m],
        Mode::Uniform => group.scores[n - 1],
    })
}

/// Stateful batch sampler over a fixed ranking.
///
/// Batches are returned as indices into the training pool the sampler was
/// built against. Each call advances the step by one.
#[derive(Clone, Debug)]
pub struct CurriculumSampler {
    schedule: CurriculumSchedule,
    /// Per group: pool indices in descending rank order.
    groups: Vec<Vec<usize>>,
    /// Per group: current eligible range in `groups`.
    ranges: Vec<(usize, usize)>,
    /// Per group: remaining pool positions of the current epoch
    /// (without-replacement mode only).
    queues: Vec<Vec<usize>>,
    pool_units: usize,
    step: usize,
    rng: ChaCha8Rng,
    with_replacement: bool,
}

impl CurriculumSampler {
    /// `pool_ids[i]` is the sample id at pool index `i`. Every ranked id must
    /// appear in the pool; pool entries missing from the ranking (for
    /// instance quarantined samples) are never drawn.
    pub fn new(
        ranking: &Ranking,
        schedule: CurriculumSchedule,
        pool_ids: &[&str],
        seed: u64,
        with_replacement: bool,
    ) -> Result<Self> {
        schedule.validate()?;
        if ranking.scope != schedule.scope {
            return Err(Error::Contract(format!(
                "ranking scope {:?} does not match schedule scope {:?}",
                ranking.scope, schedule.scope
            )));
        }
        if ranking.groups.is_empty() {
            return Err(Error::Config("cannot sample from an empty ranking".into()));
        }
        let index: HashMap<&str, usize> = pool_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut groups = Vec::with_capacity(ranking.groups.len());
        for g in &ranking.groups {
            if g.is_empty() {
                return Err(Error::Config(format!("ranking group {:?} is empty", g.domain)));
            }
            let idx = g
                .sample_ids
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Contract(format!("ranked sample {id:?} is not in the training pool")))
                })
                .collect::<Result<Vec<_>>>()?;
            groups.push(idx);
        }
        let n = groups.len();
        Ok(CurriculumSampler {
            schedule,
            groups,
            ranges: vec![(0, 0); n],
            queues: vec![Vec::new(); n],
            pool_units: usize::MAX,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            with_replacement,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &CurriculumSchedule {
        &self.schedule
    }

    /// Pool indices eligible at the current step.
    pub fn current_pool(&self) -> Vec<usize> {
        let f = unlocked_fraction(self.step, &self.schedule);
        let mut out: Vec<usize> = self
            .groups
            .iter()
            .flat_map(|g| {
                let (s, l) = pool_range(g.len(), f, self.schedule.mode);
                g[s..s + l].iter().copied()
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Recomputes eligible ranges only when some group's pool size changes.
    fn refresh(&mut self) {
        let f = unlocked_fraction(self.step, &self.schedule);
        let ranges: Vec<(usize, usize)> = self
            .groups
            .iter()
            .map(|g| pool_range(g.len(), f, self.schedule.mode))
            .collect();
        let units: usize = ranges.iter().map(|r| r.1).sum();
        if units != self.pool_units || ranges != self.ranges {
            self.ranges = ranges;
            self.pool_units = units;
            for q in &mut self.queues {
                q.clear();
            }
        }
    }

    fn quotas(&self, batch_size: usize) -> Vec<usize> {
        let n = self.groups.len();
        let base = batch_size / n;
        let rem = batch_size % n;
        let start = (self.step * rem) % n;
        (0..n)
            .map(|g| {
                let extra = (g + n - start) % n < rem;
                base + usize::from(extra)
            })
            .collect()
    }

    fn draw(&mut self, g: usize, count: usize, out: &mut Vec<usize>) -> Result<()> {
        let (start, len) = self.ranges[g];
        if self.with_replacement {
            for _ in 0..count {
                let pos = start + self.rng.random_range(0..len);
                out.push(self.groups[g][pos]);
            }
            return Ok(());
        }
        if count > len {
            return Err(Error::Contract(format!(
                "batch quota {count} exceeds the eligible pool of {len} in without-replacement mode"
            )));
        }
        for _ in 0..count {
            if self.queues[g].is_empty() {
                let mut q: Vec<usize> = (start..start + len).collect();
                q.shuffle(&mut self.rng);
                self.queues[g] = q;
            }
            let pos = self.queues[g].pop().expect("queue refilled above");
            out.push(self.groups[g][pos]);
        }
        Ok(())
    }

    /// Draws one batch and advances the step.
    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::Contract("batch_size must be at least 1".into()));
        }
        self.refresh();
        let quotas = self.quotas(batch_size);
        let mut out = Vec::with_capacity(batch_size);
        for (g, q) in quotas.into_iter().enumerate() {
            self.draw(g, q, &mut out)?;
        }
        self.step += 1;
        Ok(out)
    }
}

impl BatchSource for CurriculumSampler {
    fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        self.sample_batch(batch_size)
    }
}
