//! Desk-scale trend runs: curriculum vs uniform vs anti-curriculum over
//! several seeds, and global vs per-domain scope on a skewed corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use curriculum_core::analysis::quartile_report;
use curriculum_core::artifact::read_csv;
use curriculum_core::config::RunConfig;
use curriculum_core::curriculum::Mode;
use curriculum_core::learnability::Scope;
use curriculum_core::pipeline::{Pipeline, Stage};
use curriculum_core::trainer::TrainLog;
use curriculum_core::Result;

use super::{config_path, Outcome};

pub const SCALE_ENV: &str = "CURRICULUM_ACCEPTANCE_SCALE";
pub const TREND_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Smaller models and fewer steps; the default.
    Quick,
    /// The sizes written into the criterion (hours on one core).
    Full,
}

impl Scale {
    pub fn from_env() -> Self {
        match std::env::var(SCALE_ENV).as_deref() {
            Ok("full") => Scale::Full,
            _ => Scale::Quick,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scale::Quick => "quick scale",
            Scale::Full => "full scale",
        }
    }

    pub fn trend_config(self) -> &'static str {
        match self {
            Scale::Quick => "desk-quick.toml",
            Scale::Full => "desk.toml",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub avg_log_ppl: f64,
    pub per_domain: BTreeMap<String, f64>,
    pub mean_sharpness: Option<f64>,
}

/// Reads `analysis/comparison.csv` keyed by run label.
pub fn read_comparison(path: &Path) -> Result<BTreeMap<String, RunRow>> {
    let (_, body) = read_csv(path, "analyze")?;
    let mut lines = body.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let n = header.len();
    let mut out = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        let per_domain = header[2..n - 2]
            .iter()
            .zip(&f[2..n - 2])
            .map(|(d, v)| (d.to_string(), num(v)))
            .collect();
        out.insert(
            f[0].to_string(),
            RunRow {
                avg_log_ppl: num(f[1]),
                per_domain,
                mean_sharpness: (!f[n - 2].is_empty()).then(|| num(f[n - 2])),
            },
        );
    }
    Ok(out)
}

pub fn trend_seed(scale: Scale, seed: u64, out: &Path) -> Result<BTreeMap<String, RunRow>> {
    let cfg = RunConfig::load(&config_path(scale.trend_config()), Some(seed))?;
    Pipeline::new(cfg, out).run(Stage::All)?;
    read_comparison(&out.join("analysis/comparison.csv"))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Perplexity ordering over seeds, and the (soft) sharpness ordering on the
/// same runs.
pub fn trend_criteria(scale: Scale, results: &[BTreeMap<String, RunRow>]) -> (Outcome, Outcome) {
    let get = |r: &BTreeMap<String, RunRow>, m: Mode| r[m.as_str()].clone();
    let mut ordered = 0;
    let mut lines = Vec::new();
    for r in results {
        let (c, u, a) = (
            get(r, Mode::Curriculum).avg_log_ppl,
            get(r, Mode::Uniform).avg_log_ppl,
            get(r, Mode::AntiCurriculum).avg_log_ppl,
        );
        if c <= u && u <= a {
            ordered += 1;
        }
        lines.push(format!("{c:.4}/{u:.4}/{a:.4}"));
    }
    let m = |mode: Mode| mean(results.iter().map(|r| get(r, mode).avg_log_ppl));
    let (mc, mu, ma) = (m(Mode::Curriculum), m(Mode::Uniform), m(Mode::AntiCurriculum));
    let ppl = Outcome::new(
        ordered * 3 >= 2 * results.len() && mc < mu,
        format!(
            "[{}] cur/uni/anti per seed {}; ordered in {ordered}/{} seeds; means {mc:.4}/{mu:.4}/{ma:.4}",
            scale.label(),
            lines.join(", "),
            results.len()
        ),
    );
    let s = |mode: Mode| mean(results.iter().map(|r| get(r, mode).mean_sharpness.unwrap_or(f64::NAN)));
    let (sc, su, sa) = (s(Mode::Curriculum), s(Mode::Uniform), s(Mode::AntiCurriculum));
    let sharp = Outcome::new(
        sc <= sa,
        format!(
            "[{}] mean top eigenvalue cur/uni/anti {sc:.4}/{su:.4}/{sa:.4} over {} seeds",
            scale.label(),
            results.len()
        ),
    );
    (ppl, sharp)
}

fn final_per_domain(pipeline: &Pipeline, mode: Mode) -> Result<BTreeMap<String, f64>> {
    let (_, body) = read_csv(&pipeline.layout.main_val_log(mode), "train-main")?;
    let log = TrainLog {
        train_loss: Vec::new(),
        validation: TrainLog::parse_validation_csv(&body)?,
    };
    Ok(log.final_validation())
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for e in fs::read_dir(from)? {
        let p = e?.path();
        let target = to.join(p.file_name().expect("entry name"));
        if p.is_dir() {
            copy_dir(&p, &target)?;
        } else {
            fs::copy(&p, &target)?;
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct SkewResult {
    pub top_quarter: BTreeMap<String, f64>,
    pub high_domain: String,
    /// Per scope: (curriculum, uniform) final per-domain log-perplexity.
    pub global: (BTreeMap<String, f64>, BTreeMap<String, f64>),
    pub per_domain: (BTreeMap<String, f64>, BTreeMap<String, f64>),
}

/// Scores the skewed corpus once, then trains curriculum and uniform runs
/// under per-domain and global scope from the same scores.
pub fn domain_skew_runs(config: &Path, out: &Path) -> Result<SkewResult> {
    let mut cfg = RunConfig::load(config, None)?;
    cfg.curriculum.scope = Scope::PerDomain;
    let local = Pipeline::new(cfg.clone(), out.join("per-domain"));
    for stage in [Stage::Ingest, Stage::TrainProxy, Stage::Score] {
        local.run(stage)?;
    }
    let table = local.load_scores()?;
    let report = quartile_report(&table)?;
    let mut means: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| !r.is_quarantined()) {
        let e = means.entry(r.domain.as_str()).or_default();
        e.0 += r.score();
        e.1 += 1;
    }
    let high_domain = means
        .iter()
        .max_by(|a, b| (a.1 .0 / a.1 .1 as f64).total_cmp(&(b.1 .0 / b.1 .1 as f64)))
        .map(|(d, _)| d.to_string())
        .unwrap_or_default();

    for mode in [Mode::Curriculum, Mode::Uniform] {
        local.train_main(mode)?;
    }
    let mut gcfg = cfg;
    gcfg.curriculum.scope = Scope::Global;
    let global = Pipeline::new(gcfg, out.join("global"));
    for dir in ["corpus", "proxy", "scores"] {
        copy_dir(&local.layout.root.join(dir), &global.layout.root.join(dir))
            .map_err(|e| curriculum_core::Error::Config(format!("copying {dir}: {e}")))?;
    }
    for mode in [Mode::Curriculum, Mode::Uniform] {
        global.train_main(mode)?;
    }
    Ok(SkewResult {
        top_quarter: report.quarters[0].composition.clone(),
        high_domain,
        global: (
            final_per_domain(&global, Mode::Curriculum)?,
            final_per_domain(&global, Mode::Uniform)?,
        ),
        per_domain: (
            final_per_domain(&local, Mode::Curriculum)?,
            final_per_domain(&local, Mode::Uniform)?,
        ),
    })
}

pub fn domain_skew_criterion(r: &SkewResult) -> Outcome {
    let top_share = r.top_quarter.get(&r.high_domain).copied().unwrap_or(0.0);
    let diff = |(c, u): &(BTreeMap<String, f64>, BTreeMap<String, f64>)| -> BTreeMap<String, f64> {
        c.iter().map(|(d, v)| (d.clone(), v - u[d])).collect()
    };
    let g = diff(&r.global);
    let p = diff(&r.per_domain);
    let diverges = g.values().any(|&d| d < 0.0) && g.values().any(|&d| d > 0.0);
    let both_improve = !p.is_empty() && p.values().all(|&d| d < 0.0);
    let fmt = |m: &BTreeMap<String, f64>| {
        m.iter()
            .map(|(d, v)| format!("{d} {v:+.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Outcome::new(
        top_share > 0.5 && diverges && both_improve,
        format!(
            "{} holds {:.0}% of the top quarter (> 50%); curriculum - uniform log-ppl: global scope [{}], per-domain scope [{}]",
            r.high_domain,
            100.0 * top_share,
            fmt(&g),
            fmt(&p)
        ),
    )
}
