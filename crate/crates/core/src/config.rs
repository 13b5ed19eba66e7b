//! Run configuration file (TOML) with line-numbered diagnostics.
//!
//! Every seed is derived from the top-level `seed` unless a section pins its
//! own, so a run is fully determined by the file (and an optional `--seed`
//! override of the top-level value).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::BYTE_VOCAB;
use crate::curriculum::{CurriculumSchedule, Mode};
use crate::error::{Error, Result};
use crate::learnability::Scope;
use crate::model::ModelConfig;
use crate::sharpness::SharpnessConfig;
use crate::synthetic::SyntheticSpec;
use crate::trainer::TrainConfig;

fn default_proxy_frac() -> f64 {
    0.5
}
fn default_val_frac() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory of domain subdirectories or a record file; relative paths
    /// resolve against the config file's directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default = "default_proxy_frac")]
    pub proxy_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// [`SyntheticSpec`] with an optional seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(default)]
    pub seed: Option<u64>,
    pub domains: Vec<crate::synthetic::DomainSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRun {
    pub model: ModelConfig,
    pub train: TrainSection,
}

/// [`TrainConfig`] as written in the file: the seed may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub early_ckpt_step: usize,
    #[serde(default)]
    pub late_ckpt_interval: Option<usize>,
    pub eval_interval: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default)]
    pub adam_eps: Option<f64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_lr() -> f64 {
    3e-4
}

impl TrainSection {
    fn resolve(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(self.total_steps, self.batch_size, self.early_ckpt_step, seed);
        c.learning_rate = self.learning_rate;
        c.late_ckpt_interval = self.late_ckpt_interval;
        c.eval_interval = self.eval_interval;
        c.beta1 = self.beta1.unwrap_or(c.beta1);
        c.beta2 = self.beta2.unwrap_or(c.beta2);
        c.adam_eps = self.adam_eps.unwrap_or(c.adam_eps);
        c.grad_clip = self.grad_clip.unwrap_or(c.grad_clip);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSection {
    pub lambda0: f64,
    pub t_c: usize,
    pub mode: Mode,
    pub scope: Scope,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_true")]
    pub with_replacement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub hvp_eps: Option<f64>,
    #[serde(default)]
    pub every_k: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Online-selection candidate batch `|B_t|`; defaults to ten times the
    /// main batch size.
    #[serde(default)]
    pub presample_batch: Option<u64>,
    /// Forward FLOPs per sequence of the main / proxy model; estimated as
    /// `2 * params * context_len` when absent.
    #[serde(default)]
    pub main_forward_flops: Option<u64>,
    #[serde(default)]
    pub proxy_forward_flops: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub proxy: ModelRun,
    pub main: ModelRun,
    pub curriculum: CurriculumSection,
    #[serde(default)]
    pub sharpness: Option<SharpnessSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    /// Directory the config was read from; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A stable seed for one consumer of the master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line of `key` inside table `table` (dotted path, `""` for the root), or
/// of the table header when the key is absent.
pub fn locate_key(src: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_start_matches('[').split(']').next().unwrap_or("").trim();
            current = name.to_string();
            if current == table && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current != table {
            continue;
        }
        if let Some(rest) = line.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return Some(i + 1);
            }
        }
    }
    header_line
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&src, &path.display().to_string(), &base, seed_override)
    }

    /// Parses and validates; `origin` names the source in diagnostics.
    pub fn parse(src: &str, origin: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(src).map_err(|e| Error::ConfigAt {
            path: origin.to_string(),
            line: e.span().map_or(1, |s| line_of_offset(src, s.start)),
            message: e.message().to_string(),
        })?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate().map_err(|(table, key, message)| Error::ConfigAt {
            path: origin.to_string(),
            line: locate_key(src, table, key).unwrap_or(1),
            message,
        })?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let c = &self.corpus;
        match (&c.path, &c.synthetic) {
            (None, None) => {
                return Err((
                    "corpus",
                    "path",
                    "corpus needs either `path` or a [corpus.synthetic] table".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err((
                    "corpus",
                    "path",
                    "corpus `path` and [corpus.synthetic] are mutually exclusive".into(),
                ))
            }
            (Some(_), None) => {
                let p = self.corpus_path().expect("path set");
                if !p.exists() {
                    return Err(("corpus", "path", format!("corpus path {} does not exist", p.display())));
                }
            }
            (None, Some(_)) => {
                self.synthetic_spec()
                    .expect("synthetic set")
                    .validate()
                    .map_err(|e| ("corpus.synthetic", "domains", e.to_string()))?;
            }
        }
        if !(c.proxy_frac > 0.0 && c.val_frac > 0.0 && c.proxy_frac + c.val_frac < 1.0) {
            return Err((
                "corpus",
                "proxy_frac",
                format!(
                    "need 0 < proxy_frac, val_frac and proxy_frac + val_frac < 1 (got {}, {})",
                    c.proxy_frac, c.val_frac
                ),
            ));
        }
        for (table, run) in [("proxy.model", &self.proxy), ("main.model", &self.main)] {
            run.model.validate().map_err(|e| (table, "d_model", e.to_string()))?;
            if run.model.vocab_size != BYTE_VOCAB {
                return Err((
                    table,
                    "vocab_size",
                    format!("byte-level corpora need vocab_size = {BYTE_VOCAB}"),
                ));
            }
        }
        if self.proxy.model.context_len != self.main.model.context_len {
            return Err((
                "main.model",
                "context_len",
                format!(
                    "proxy and main models must share context_len (proxy {}, main {})",
                    self.proxy.model.context_len, self.main.model.context_len
                ),
            ));
        }
        self.proxy_train()
            .validate()
            .map_err(|e| ("proxy.train", "early_ckpt_step", e.to_string()))?;
        self.main_train()
            .validate()
            .map_err(|e| ("main.train", "early_ckpt_step", e.to_string()))?;
        let s = self.schedule(self.curriculum.mode);
        if !(s.lambda0 > 0.0 && s.lambda0 <= 1.0) {
            return Err((
                "curriculum",
                "lambda0",
                format!("lambda0 must lie in (0, 1], got {}", s.lambda0),
            ));
        }
        if s.t_c == 0 {
            return Err(("curriculum", "t_c", "t_c must be at least 1".into()));
        }
        if let Some(sh) = self.sharpness_config() {
            sh.validate().map_err(|e| ("sharpness", "every_k", e.to_string()))?;
        }
        if let Some(b) = self.analysis.presample_batch {
            if b < self.main.train.batch_size as u64 {
                return Err((
                    "analysis",
                    "presample_batch",
                    "presample_batch must be at least the main batch size".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        self.corpus.path.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        self.corpus.synthetic.as_ref().map(|s| SyntheticSpec {
            seed: s.seed.unwrap_or_else(|| derive_seed(self.seed, "corpus.synthetic")),
            domains: s.domains.clone(),
        })
    }

    pub fn split_seed(&self) -> u64 {
        self.corpus
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, "corpus.split"))
    }

    pub fn proxy_train(&self) -> TrainConfig {
        let seed = self
            .proxy
            .train
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, "proxy.train"));
        self.proxy.train.resolve(seed)
    }

    pub fn main_train(&self) -> TrainConfig {
        let seed = self
            .main
            .train
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, "main.train"));
        self.main.train.resolve(seed)
    }

    pub fn schedule(&self, mode: Mode) -> CurriculumSchedule {
        CurriculumSchedule {
            lambda0: self.curriculum.lambda0,
            t_c: self.curriculum.t_c,
            mode,
            scope: self.curriculum.scope,
        }
    }

    pub fn sampler_seed(&self) -> u64 {
        self.curriculum
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, "curriculum"))
    }

    /// `None` when the section is absent or disabled.
    pub fn sharpness_config(&self) -> Option<SharpnessConfig> {
        let s = self.sharpness.as_ref().filter(|s| s.enabled)?;
        let mut c = SharpnessConfig::with_seed(s.seed.unwrap_or_else(|| derive_seed(self.seed, "sharpness")));
        c.n_samples = s.n_samples.unwrap_or(c.n_samples);
        c.max_iters = s.max_iters.unwrap_or(c.max_iters);
        c.tol = s.tol.unwrap_or(c.tol);
        c.hvp_eps = s.hvp_eps.unwrap_or(c.hvp_eps);
        c.every_k = s.every_k.unwrap_or(c.every_k);
        Some(c)
    }

    pub fn context_len(&self) -> usize {
        self.main.model.context_len
    }
}
