//! Post-hoc analytics over finished artifacts: learnability quartiles, the
//! forward-FLOP overhead comparison and the run comparison table.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::artifact::fmt6;
use crate::error::{Error, Result};
use crate::learnability::{rank, LearnabilityTable, RankGroup, Scope};
use crate::model::ModelConfig;
use crate::sharpness::SharpnessRecord;
use crate::trainer::ValRecord;

/// End rank (exclusive) of each quarter: `ceil(N/4)`, `ceil(N/2)`,
/// `ceil(3N/4)`, `N`.
pub fn quarter_bounds(n: usize) -> [usize; 4] {
    [n.div_ceil(4), n.div_ceil(2), (3 * n).div_ceil(4), n]
}

fn quarters_of(n: usize) -> [(usize, usize); 4] {
    let b = quarter_bounds(n);
    [(0, b[0]), (b[0], b[1]), (b[1], b[2]), (b[2], b[3])]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quarter {
    pub size: usize,
    pub counts: BTreeMap<String, usize>,
    /// `counts / size`, zero for domains absent from the quarter.
    pub composition: BTreeMap<String, f64>,
}

/// Domain composition of each quarter of the global ranking (highest scores
/// first), and per domain the mean score of each quarter of that domain's
/// own ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct QuartileReport {
    pub domains: Vec<String>,
    pub quarters: [Quarter; 4],
    /// `None` when a domain has too few rows to fill a quarter.
    pub domain_quarter_means: BTreeMap<String, [Option<f64>; 4]>,
}

fn quarter_means(g: &RankGroup) -> [Option<f64>; 4] {
    quarters_of(g.len()).map(|(a, b)| (b > a).then(|| g.scores[a..b].iter().sum::<f64>() / (b - a) as f64))
}

/// Quarantined rows are ignored.
pub fn quartile_report(table: &LearnabilityTable) -> Result<QuartileReport> {
    let global = rank(table, Scope::Global);
    let Some(all) = global.groups.first() else {
        return Err(Error::Contract("quartile report of an empty table".into()));
    };
    if all.len() < 4 {
        return Err(Error::Contract(format!(
            "quartile report needs at least 4 scored rows, got {}",
            all.len()
        )));
    }
    let domain_of: BTreeMap<&str, &str> = table
        .rows
        .iter()
        .map(|r| (r.sample_id.as_str(), r.domain.as_str()))
        .collect();
    let domains: Vec<String> = domain_of
        .values()
        .map(|d| d.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let quarters = quarters_of(all.len()).map(|(a, b)| {
        let mut counts: BTreeMap<String, usize> = domains.iter().map(|d| (d.clone(), 0)).collect();
        for id in &all.sample_ids[a..b] {
            *counts.get_mut(domain_of[id.as_str()]).expect("domain listed") += 1;
        }
        let size = b - a;
        let composition = counts
            .iter()
            .map(|(d, &c)| (d.clone(), c as f64 / size as f64))
            .collect();
        Quarter {
            size,
            counts,
            composition,
        }
    });
    let per_domain = rank(table, Scope::PerDomain);
    let domain_quarter_means = per_domain
        .groups
        .iter()
        .map(|g| (g.domain.clone().expect("per-domain group"), quarter_means(g)))
        .collect();
    Ok(QuartileReport {
        domains,
        quarters,
        domain_quarter_means,
    })
}

impl QuartileReport {
    /// `quarter,domain,count,fraction` rows.
    pub fn composition_csv(&self) -> String {
        let mut out = String::from("quarter,domain,count,fraction\n");
        for (q, quarter) in self.quarters.iter().enumerate() {
            for d in &self.domains {
                out.push_str(&format!(
                    "{},{d},{},{}\n",
                    q + 1,
                    quarter.counts[d],
                    fmt6(quarter.composition[d])
                ));
            }
        }
        out
    }

    /// `domain,quarter,mean_learnability` rows; empty quarters print `nan`.
    pub fn domain_means_csv(&self) -> String {
        let mut out = String::from("domain,quarter,mean_learnability\n");
        for (d, means) in &self.domain_quarter_means {
            for (q, m) in means.iter().enumerate() {
                out.push_str(&format!("{d},{},{}\n", q + 1, fmt6(m.unwrap_or(f64::NAN))));
            }
        }
        out
    }
}

/// Inputs of the forward-FLOP comparison between online batch selection and
/// the offline curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCostModel {
    /// Forward FLOPs of the main model per sample.
    pub c1: u128,
    /// Forward FLOPs of the proxy model per sample.
    pub c2: u128,
    pub steps: u128,
    /// Pre-sampled candidate batch size of online selection.
    pub presample_batch: u128,
    pub train_batch: u128,
    pub train_size: u128,
    pub curriculum_steps: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopOverhead {
    /// `T*C1*(B + b) + T*C2*B`.
    pub rho_loss: u128,
    /// `C2*D`.
    pub curriculum: u128,
    /// `C2*T_c*b`, the smallest `curriculum` can be when every sample seen
    /// during the curriculum phase is scored.
    pub curriculum_lower_bound: u128,
    pub ratio: f64,
}

impl FlopCostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.c1,
            self.c2,
            self.steps,
            self.presample_batch,
            self.train_batch,
            self.train_size,
            self.curriculum_steps,
        ];
        if all.contains(&0) {
            return Err(Error::Contract("FLOP model inputs must be positive".into()));
        }
        if self.presample_batch < self.train_batch {
            return Err(Error::Contract(format!(
                "presample batch {} is smaller than the train batch {}",
                self.presample_batch, self.train_batch
            )));
        }
        Ok(())
    }
}

/// Forward FLOPs per sequence estimated as `2 * params * context_len`.
pub fn estimate_forward_flops(config: &ModelConfig) -> u128 {
    2 * config.param_count() as u128 * config.context_len as u128
}

pub fn flop_overhead(m: &FlopCostModel) -> Result<FlopOverhead> {
    m.validate()?;
    let overflow = || Error::Contract("FLOP count overflows u128".into());
    let rho_a = m
        .steps
        .checked_mul(m.c1)
        .and_then(|x| x.checked_mul(m.presample_batch + m.train_batch))
        .ok_or_else(overflow)?;
    let rho_b = m
        .steps
        .checked_mul(m.c2)
        .and_then(|x| x.checked_mul(m.presample_batch))
        .ok_or_else(overflow)?;
    let rho = rho_a.checked_add(rho_b).ok_or_else(overflow)?;
    let curriculum = m.c2.checked_mul(m.train_size).ok_or_else(overflow)?;
    let lower =
        m.c2.checked_mul(m.curriculum_steps)
            .and_then(|x| x.checked_mul(m.train_batch))
            .ok_or_else(overflow)?;
    Ok(FlopOverhead {
        rho_loss: rho,
        curriculum,
        curriculum_lower_bound: lower,
        ratio: curriculum as f64 / rho as f64,
    })
}

/// One finished run as seen by [`compare_runs`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    /// Hash of the validation manifest the run was evaluated on.
    pub validation_manifest: String,
    pub validation: Vec<ValRecord>,
    pub sharpness: Vec<SharpnessRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub avg_log_ppl: f64,
    pub per_domain: BTreeMap<String, f64>,
    /// Mean over the finite probes of the trace; `None` without probes.
    pub mean_sharpness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub domains: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Column name -> indices of the rows holding that column's lowest value.
    pub best: BTreeMap<String, Vec<usize>>,
}

pub const AVG_COLUMN: &str = "avg_log_ppl";
pub const SHARPNESS_COLUMN: &str = "mean_sharpness";

/// Final per-domain and domain-uniform average log-perplexity per run.
pub fn compare_runs(runs: &[RunSummary]) -> Result<ComparisonTable> {
    let Some(first) = runs.first() else {
        return Err(Error::Contract("no runs to compare".into()));
    };
    if let Some(r) = runs.iter().find(|r| r.validation_manifest != first.validation_manifest) {
        return Err(Error::Contract(format!(
            "run {:?} was evaluated on a different validation set than {:?}",
            r.label, first.label
        )));
    }
    let mut rows = Vec::with_capacity(runs.len());
    let mut domains: Option<Vec<String>> = None;
    for r in runs {
        let Some(last) = r.validation.iter().map(|v| v.step).max() else {
            return Err(Error::Contract(format!("run {:?} has no validation records", r.label)));
        };
        let per_domain: BTreeMap<String, f64> = r
            .validation
            .iter()
            .filter(|v| v.step == last)
            .map(|v| (v.domain.clone(), v.log_ppl))
            .collect();
        let names: Vec<String> = per_domain.keys().cloned().collect();
        match &domains {
            None => domains = Some(names),
            Some(d) if *d != names => {
                return Err(Error::Contract(format!(
                    "run {:?} reports domains {names:?}, expected {d:?}",
                    r.label
                )))
            }
            Some(_) => {}
        }
        let avg = per_domain.values().sum::<f64>() / per_domain.len() as f64;
        let finite: Vec<f64> = r
            .sharpness
            .iter()
            .map(|s| s.top_eigenvalue)
            .filter(|x| x.is_finite())
            .collect();
        let mean_sharpness = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        rows.push(ComparisonRow {
            label: r.label.clone(),
            avg_log_ppl: avg,
            per_domain,
            mean_sharpness,
        });
    }
    let domains = domains.unwrap_or_default();
    let mut best = BTreeMap::new();
    best.insert(
        AVG_COLUMN.to_string(),
        argmins(rows.iter().map(|r| Some(r.avg_log_ppl))),
    );
    for d in &domains {
        best.insert(d.clone(), argmins(rows.iter().map(|r| r.per_domain.get(d).copied())));
    }
    best.insert(
        SHARPNESS_COLUMN.to_string(),
        argmins(rows.iter().map(|r| r.mean_sharpness)),
    );
    Ok(ComparisonTable { domains, rows, best })
}

fn argmins(values: impl Iterator<Item = Option<f64>>) -> Vec<usize> {
    let vals: Vec<Option<f64>> = values.collect();
    let min = vals
        .iter()
        .flatten()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::INFINITY, f64::min);
    vals.iter()
        .enumerate()
        .filter(|(_, v)| **v == Some(min))
        .map(|(i, _)| i)
        .collect()
}

impl ComparisonTable {
    pub fn is_best(&self, column: &str, row: usize) -> bool {
        self.best.get(column).is_some_and(|v| v.contains(&row))
    }

    /// `label,avg_log_ppl,<domain>...,mean_sharpness,best` where `best`
    /// lists (space-separated) the columns in which the row is lowest.
    pub fn to_csv(&self) -> String {
        let mut out = format!("label,{AVG_COLUMN}");
        for d in &self.domains {
            out.push_str(&format!(",{d}"));
        }
        out.push_str(&format!(",{SHARPNESS_COLUMN},best\n"));
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!("{},{}", r.label, fmt6(r.avg_log_ppl)));
            for d in &self.domains {
                out.push_str(&format!(",{}", fmt6(r.per_domain[d])));
            }
            let best: Vec<&str> = self
                .best
                .iter()
                .filter(|(_, rows)| rows.contains(&i))
                .map(|(c, _)| c.as_str())
                .collect();
            out.push_str(&format!(
                ",{},{}\n",
                fmt6(r.mean_sharpness.unwrap_or(f64::NAN)),
                best.join(" ")
            ));
        }
        out
    }

    /// Fixed-width text table; `*` marks the best value of each column.
    pub fn summary(&self) -> String {
        let mut cols = vec![AVG_COLUMN.to_string()];
        cols.extend(self.domains.iter().cloned());
        cols.push(SHARPNESS_COLUMN.to_string());
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let widths: Vec<usize> = cols.iter().map(|c| c.len().max(12)).collect();
        let mut out = format!("{:<label_w$}", "run");
        for (c, w) in cols.iter().zip(&widths) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!("{:<label_w$}", r.label));
            for (c, w) in cols.iter().zip(&widths) {
                let v = if c == AVG_COLUMN {
                    Some(r.avg_log_ppl)
                } else if c == SHARPNESS_COLUMN {
                    r.mean_sharpness
                } else {
                    r.per_domain.get(c).copied()
                };
                let mark = if self.is_best(c, i) { "*" } else { " " };
                let cell = format!("{}{mark}", v.map_or("-".to_string(), |x| format!("{x:.4}")));
                out.push_str(&format!("  {cell:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}
