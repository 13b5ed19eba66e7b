//! Stage runner: ingest, train-proxy, score, train-main, probe, analyze.
//!
//! Every artifact carries a provenance header whose `config_hash` is the
//! hash of exactly the settings (and upstream stage hashes) that produced
//! it. A stage recomputes the hashes its inputs should carry from the
//! current config and refuses stale ones.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;

use crate::analysis::{self, FlopCostModel, RunSummary};
use crate::artifact::{self, fmt6, value_hash, Provenance};
use crate::checkpoint::Checkpoint;
use crate::config::{derive_seed, RunConfig};
use crate::corpus::{self, CorpusSplit, Document};
use crate::curriculum::{CurriculumSampler, CurriculumSchedule, Mode};
use crate::error::{Error, Result};
use crate::learnability::{self, LearnabilityTable, Ranking, Scope};
use crate::model::LanguageModel;
use crate::sharpness::{self, SharpnessConfig, SharpnessTrace};
use crate::synthetic;
use crate::trainer::{self, TrainHook, TrainLog, LATE_CHECKPOINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    TrainProxy,
    Score,
    TrainMain,
    Probe,
    Analyze,
    All,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::TrainProxy,
        Stage::Score,
        Stage::TrainMain,
        Stage::Probe,
        Stage::Analyze,
        Stage::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainProxy => "train-proxy",
            Stage::Score => "score",
            Stage::TrainMain => "train-main",
            Stage::Probe => "probe",
            Stage::Analyze => "analyze",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// File locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus_records(&self) -> PathBuf {
        self.root.join("corpus/corpus.tsv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.csv")
    }
    pub fn sequences(&self) -> PathBuf {
        self.root.join("corpus/sequences.bin")
    }
    pub fn proxy_early(&self) -> PathBuf {
        self.root.join("proxy/early.ckpt")
    }
    pub fn proxy_late(&self, k: usize) -> PathBuf {
        self.root.join(format!("proxy/late-{k}.ckpt"))
    }
    pub fn proxy_logs(&self) -> (PathBuf, PathBuf) {
        (
            self.root.join("proxy/train_log.csv"),
            self.root.join("proxy/val_log.csv"),
        )
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores/learnability.csv")
    }
    pub fn main_dir(&self, mode: Mode) -> PathBuf {
        self.root.join("main").join(mode.as_str())
    }
    pub fn main_final(&self, mode: Mode) -> PathBuf {
        self.main_dir(mode).join("final.ckpt")
    }
    pub fn main_train_log(&self, mode: Mode) -> PathBuf {
        self.main_dir(mode).join("train_log.csv")
    }
    pub fn main_val_log(&self, mode: Mode) -> PathBuf {
        self.main_dir(mode).join("val_log.csv")
    }
    pub fn main_sharpness(&self, mode: Mode) -> PathBuf {
        self.main_dir(mode).join("sharpness.csv")
    }
    pub fn probe(&self, mode: Mode) -> PathBuf {
        self.root.join("probe").join(format!("{}.csv", mode.as_str()))
    }
    pub fn analysis(&self, file: &str) -> PathBuf {
        self.root.join("analysis").join(file)
    }
}

/// Expected `config_hash` of each stage's artifacts under a config.
pub struct StageHashes<'a> {
    cfg: &'a RunConfig,
}

impl<'a> StageHashes<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        StageHashes { cfg }
    }

    pub fn ingest(&self) -> String {
        let c = self.cfg;
        value_hash(&json!({
            "stage": "ingest",
            "path": c.corpus.path,
            "synthetic": c.synthetic_spec(),
            "proxy_frac": c.corpus.proxy_frac,
            "val_frac": c.corpus.val_frac,
            "split_seed": c.split_seed(),
            "context_len": c.context_len(),
        }))
    }

    pub fn train_proxy(&self) -> String {
        let c = self.cfg;
        value_hash(&json!({
            "stage": "train-proxy",
            "ingest": self.ingest(),
            "model": c.proxy.model,
            "train": c.proxy_train(),
            "sampler_seed": proxy_sampler_seed(c),
            "with_replacement": c.curriculum.with_replacement,
        }))
    }

    pub fn score(&self) -> String {
        value_hash(&json!({ "stage": "score", "train-proxy": self.train_proxy() }))
    }

    pub fn train_main(&self, mode: Mode) -> String {
        let c = self.cfg;
        value_hash(&json!({
            "stage": "train-main",
            "score": self.score(),
            "model": c.main.model,
            "train": c.main_train(),
            "schedule": c.schedule(mode),
            "sampler_seed": c.sampler_seed(),
            "with_replacement": c.curriculum.with_replacement,
            "sharpness": c.sharpness_config(),
        }))
    }

    pub fn probe(&self, mode: Mode) -> String {
        value_hash(&json!({
            "stage": "probe",
            "train-main": self.train_main(mode),
            "sharpness": probe_config(self.cfg),
        }))
    }

    pub fn analyze(&self, modes: &[Mode]) -> String {
        let runs: Vec<String> = modes.iter().map(|&m| self.train_main(m)).collect();
        value_hash(&json!({
            "stage": "analyze",
            "score": self.score(),
            "runs": runs,
            "analysis": self.cfg.analysis,
        }))
    }
}

fn proxy_sampler_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "proxy.sampler")
}

/// Probe settings: the configured ones, or defaults when the run has no
/// `[sharpness]` table.
pub fn probe_config(cfg: &RunConfig) -> SharpnessConfig {
    cfg.sharpness_config()
        .unwrap_or_else(|| SharpnessConfig::with_seed(derive_seed(cfg.seed, "sharpness")))
}

fn ensure_fresh(path: &Path, prov: &Provenance, expected: &str, stage: &'static str) -> Result<()> {
    if prov.config_hash != expected {
        return Err(Error::StaleArtifact {
            path: path.to_path_buf(),
            reason: "it was produced under a different configuration".into(),
            stage,
        });
    }
    Ok(())
}

fn validation_manifest_hash(split: &CorpusSplit) -> String {
    let ids: Vec<&str> = split.validation.iter().map(|s| s.sample_id.as_str()).collect();
    artifact::sha256_hex(ids.join("\n").as_bytes())
}

/// Runs stages against one config and output directory.
pub struct Pipeline {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(config: RunConfig, out_dir: impl Into<PathBuf>) -> Self {
        Pipeline {
            config,
            layout: Layout::new(out_dir),
        }
    }

    /// Output directory from the config (relative to its file), falling back
    /// to `out` next to the config.
    pub fn default_out_dir(config: &RunConfig) -> PathBuf {
        match &config.out_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => config.base_dir.join(p),
            None => config.base_dir.join("out"),
        }
    }

    fn hashes(&self) -> StageHashes<'_> {
        StageHashes::new(&self.config)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage}");
        match stage {
            Stage::Ingest => self.ingest().map(|_| ()),
            Stage::TrainProxy => self.train_proxy(),
            Stage::Score => self.score().map(|_| ()),
            Stage::TrainMain => self.train_main(self.config.curriculum.mode),
            Stage::Probe => self.probe(self.config.curriculum.mode),
            Stage::Analyze => self.analyze(),
            Stage::All => {
                self.ingest()?;
                self.train_proxy()?;
                self.score()?;
                for mode in Mode::ALL {
                    log::info!("stage train-main ({})", mode.as_str());
                    self.train_main(mode)?;
                }
                for mode in Mode::ALL {
                    self.probe(mode)?;
                }
                self.analyze()
            }
        }
    }

    fn documents(&self) -> Result<Vec<Document>> {
        match (self.config.corpus_path(), self.config.synthetic_spec()) {
            (Some(p), _) => corpus::load_corpus(&p),
            (None, Some(spec)) => synthetic::generate(&spec),
            (None, None) => Err(Error::Config("no corpus source configured".into())),
        }
    }

    pub fn ingest(&self) -> Result<CorpusSplit> {
        let cfg = &self.config;
        let docs = self.documents()?;
        let records = corpus::format_records(&docs);
        let split = corpus::split_corpus(
            &docs,
            cfg.corpus.proxy_frac,
            cfg.corpus.val_frac,
            cfg.split_seed(),
            cfg.context_len(),
        )?;
        let hash = self.hashes().ingest();
        let source = artifact::sha256_hex(records.as_bytes());
        artifact::write_atomic(&self.layout.corpus_records(), records.as_bytes())?;
        let prov = Provenance::new("split-manifest", &hash)
            .with_upstream("source", &source)
            .with_note("documents", docs.len());
        artifact::write_csv(&self.layout.manifest(), &prov, &split.manifest_csv())?;
        let prov = Provenance::new("sequences", &hash).with_upstream("source", &source);
        artifact::write_atomic(&self.layout.sequences(), &split.to_bytes(&prov))?;
        log::info!(
            "{} documents -> {} proxy / {} train / {} validation sequences",
            docs.len(),
            split.proxy.len(),
            split.train.len(),
            split.validation.len()
        );
        Ok(split)
    }

    /// The packed corpus written by `ingest`, checked for freshness.
    pub fn load_split(&self) -> Result<(CorpusSplit, String)> {
        let path = self.layout.sequences();
        let bytes = artifact::read_container_file(&path, "ingest")?;
        let (split, prov) = CorpusSplit::from_bytes(&bytes)?;
        ensure_fresh(&path, &prov, &self.hashes().ingest(), "ingest")?;
        Ok((split, artifact::sha256_hex(&bytes)))
    }

    pub fn train_proxy(&self) -> Result<()> {
        let cfg = &self.config;
        let (split, seq_hash) = self.load_split()?;
        let tc = cfg.proxy_train();
        let model = LanguageModel::init(cfg.proxy.model.clone(), tc.seed)?;
        let schedule = CurriculumSchedule {
            lambda0: 1.0,
            t_c: 1,
            mode: Mode::Uniform,
            scope: Scope::Global,
        };
        let ranking = Ranking::unscored(&split.proxy, Scope::Global);
        let ids: Vec<&str> = split.proxy.iter().map(|s| s.sample_id.as_str()).collect();
        let mut sampler = CurriculumSampler::new(
            &ranking,
            schedule,
            &ids,
            proxy_sampler_seed(cfg),
            cfg.curriculum.with_replacement,
        )?;
        let out = trainer::train(model, &split.proxy, &mut sampler, &tc, &split.validation, &mut [])?;
        let (Some(early), late) = (out.early(), out.late()) else {
            return Err(Error::Contract("proxy run kept no early checkpoint".into()));
        };
        if late.len() != LATE_CHECKPOINTS {
            return Err(Error::Contract(format!(
                "proxy run kept {} late checkpoints, expected {LATE_CHECKPOINTS}",
                late.len()
            )));
        }
        let prov = Provenance::new("proxy-checkpoint", self.hashes().train_proxy())
            .with_upstream("corpus/sequences.bin", &seq_hash);
        early.save(&self.layout.proxy_early(), &prov.clone().with_note("role", "early"))?;
        for (k, c) in late.iter().enumerate() {
            c.save(&self.layout.proxy_late(k + 1), &prov.clone().with_note("role", "late"))?;
        }
        let (train_log, val_log) = self.layout.proxy_logs();
        out.log.save(
            &train_log,
            &val_log,
            &Provenance::new("proxy-log", self.hashes().train_proxy()),
        )
    }

    fn load_proxy_checkpoint(&self, path: &Path) -> Result<(Checkpoint, String)> {
        let (c, prov) = Checkpoint::load(path, "train-proxy")?;
        ensure_fresh(path, &prov, &self.hashes().train_proxy(), "train-proxy")?;
        Ok((c, artifact::file_sha256(path)?))
    }

    pub fn score(&self) -> Result<LearnabilityTable> {
        let (split, _) = self.load_split()?;
        let (early, early_hash) = self.load_proxy_checkpoint(&self.layout.proxy_early())?;
        let mut prov =
            Provenance::new("learnability", self.hashes().score()).with_upstream("proxy/early.ckpt", early_hash);
        let mut late = Vec::with_capacity(LATE_CHECKPOINTS);
        for k in 1..=LATE_CHECKPOINTS {
            let (c, h) = self.load_proxy_checkpoint(&self.layout.proxy_late(k))?;
            prov = prov.with_upstream(format!("proxy/late-{k}.ckpt"), h);
            late.push(c);
        }
        let table = learnability::score_corpus(&early, &late, &split.train, prov)?;
        let quarantined = table.quarantined().count();
        if quarantined > 0 {
            log::warn!("{quarantined} samples quarantined with non-finite losses");
        }
        table.save(&self.layout.scores())?;
        Ok(table)
    }

    pub fn load_scores(&self) -> Result<LearnabilityTable> {
        let path = self.layout.scores();
        let table = LearnabilityTable::load(&path, "score")?;
        ensure_fresh(&path, &table.provenance, &self.hashes().score(), "score")?;
        Ok(table)
    }

    pub fn train_main(&self, mode: Mode) -> Result<()> {
        let cfg = &self.config;
        let (split, seq_hash) = self.load_split()?;
        let table = self.load_scores()?;
        let score_hash = artifact::file_sha256(&self.layout.scores())?;
        let schedule = cfg.schedule(mode);
        let ranking = learnability::rank(&table, schedule.scope);
        let ids: Vec<&str> = split.train.iter().map(|s| s.sample_id.as_str()).collect();
        let mut sampler = CurriculumSampler::new(
            &ranking,
            schedule,
            &ids,
            cfg.sampler_seed(),
            cfg.curriculum.with_replacement,
        )?;
        let tc = cfg.main_train();
        let model = LanguageModel::init(cfg.main.model.clone(), tc.seed)?;
        let mut trace = cfg
            .sharpness_config()
            .map(|sc| SharpnessTrace::new(sc, tc.total_steps, &split.validation));
        let mut hooks: Vec<&mut dyn TrainHook> = Vec::new();
        if let Some(t) = trace.as_mut() {
            hooks.push(t);
        }
        let out = trainer::train(model, &split.train, &mut sampler, &tc, &split.validation, &mut hooks)?;
        drop(hooks);

        let hash = self.hashes().train_main(mode);
        let prov = Provenance::new("main-run", &hash)
            .with_upstream("corpus/sequences.bin", &seq_hash)
            .with_upstream("scores/learnability.csv", &score_hash)
            .with_upstream("validation_manifest", validation_manifest_hash(&split))
            .with_note("mode", mode.as_str());
        Checkpoint::of(&out.model, tc.total_steps).save(&self.layout.main_final(mode), &prov)?;
        out.log.save(
            &self.layout.main_train_log(mode),
            &self.layout.main_val_log(mode),
            &prov,
        )?;
        if let Some(t) = trace {
            artifact::write_csv(
                &self.layout.main_sharpness(mode),
                &prov,
                &sharpness::trace_csv(&t.records),
            )?;
        }
        let fin = out.log.final_validation();
        let avg = fin.values().sum::<f64>() / fin.len().max(1) as f64;
        log::info!("{}: final average validation log-perplexity {avg:.4}", mode.as_str());
        Ok(())
    }

    /// Probes the final main-run checkpoint with the seed the in-training
    /// trace uses at that step, so the two agree.
    pub fn probe(&self, mode: Mode) -> Result<()> {
        let (split, _) = self.load_split()?;
        let path = self.layout.main_final(mode);
        let (ckpt, prov) = Checkpoint::load(&path, "train-main")?;
        ensure_fresh(&path, &prov, &self.hashes().train_main(mode), "train-main")?;
        let sc = probe_config(&self.config);
        let seed = sharpness::probe_seed(sc.seed, ckpt.step);
        let rec = sharpness::probe_sharpness(&ckpt.model()?, &split.validation, &sc, seed, ckpt.step)?;
        log::info!(
            "{}: top eigenvalue {} at step {}",
            mode.as_str(),
            fmt6(rec.top_eigenvalue),
            ckpt.step
        );
        let out_prov = Provenance::new("probe", self.hashes().probe(mode)).with_upstream(
            format!("main/{}/final.ckpt", mode.as_str()),
            artifact::file_sha256(&path)?,
        );
        artifact::write_csv(&self.layout.probe(mode), &out_prov, &sharpness::trace_csv(&[rec]))
    }

    fn run_summary(&self, mode: Mode) -> Result<Option<RunSummary>> {
        let val_path = self.layout.main_val_log(mode);
        if !val_path.exists() {
            return Ok(None);
        }
        let expected = self.hashes().train_main(mode);
        let (prov, body) = artifact::read_csv(&val_path, "train-main")?;
        ensure_fresh(&val_path, &prov, &expected, "train-main")?;
        let validation = TrainLog::parse_validation_csv(&body)?;
        let sh_path = self.layout.main_sharpness(mode);
        let sharpness = if sh_path.exists() {
            let (sp, body) = artifact::read_csv(&sh_path, "train-main")?;
            ensure_fresh(&sh_path, &sp, &expected, "train-main")?;
            sharpness::parse_trace_csv(&body)?
        } else {
            Vec::new()
        };
        Ok(Some(RunSummary {
            label: mode.as_str().to_string(),
            validation_manifest: prov.upstream.get("validation_manifest").cloned().unwrap_or_default(),
            validation,
            sharpness,
        }))
    }

    /// Quartile report of the scores, comparison of every finished main run
    /// and the FLOP-overhead estimate.
    pub fn analyze(&self) -> Result<()> {
        let cfg = &self.config;
        let (split, _) = self.load_split()?;
        let table = self.load_scores()?;
        let mut runs = Vec::new();
        let mut modes = Vec::new();
        for mode in Mode::ALL {
            if let Some(r) = self.run_summary(mode)? {
                runs.push(r);
                modes.push(mode);
            }
        }
        if runs.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.layout.main_val_log(cfg.curriculum.mode),
                stage: "train-main",
            });
        }
        let prov = Provenance::new("analysis", self.hashes().analyze(&modes))
            .with_upstream("scores/learnability.csv", artifact::file_sha256(&self.layout.scores())?);

        let report = analysis::quartile_report(&table)?;
        artifact::write_csv(&self.layout.analysis("quartiles.csv"), &prov, &report.composition_csv())?;
        artifact::write_csv(
            &self.layout.analysis("domain_quarter_means.csv"),
            &prov,
            &report.domain_means_csv(),
        )?;

        let comparison = analysis::compare_runs(&runs)?;
        artifact::write_csv(&self.layout.analysis("comparison.csv"), &prov, &comparison.to_csv())?;

        let train = cfg.main_train();
        let b = train.batch_size as u128;
        let flops = FlopCostModel {
            c1: cfg
                .analysis
                .main_forward_flops
                .map_or_else(|| analysis::estimate_forward_flops(&cfg.main.model), u128::from),
            c2: cfg
                .analysis
                .proxy_forward_flops
                .map_or_else(|| analysis::estimate_forward_flops(&cfg.proxy.model), u128::from),
            steps: train.total_steps as u128,
            presample_batch: cfg.analysis.presample_batch.map_or(10 * b, u128::from),
            train_batch: b,
            train_size: split.train.len() as u128,
            curriculum_steps: cfg.curriculum.t_c as u128,
        };
        let overhead = analysis::flop_overhead(&flops)?;
        let flops_csv = format!(
            "quantity,value\nmain_forward_flops,{}\nproxy_forward_flops,{}\nsteps,{}\npresample_batch,{}\n\
             train_batch,{}\ntrain_size,{}\ncurriculum_steps,{}\nonline_selection_overhead,{}\n\
             curriculum_overhead,{}\ncurriculum_overhead_lower_bound,{}\noverhead_ratio,{}\n",
            flops.c1,
            flops.c2,
            flops.steps,
            flops.presample_batch,
            flops.train_batch,
            flops.train_size,
            flops.curriculum_steps,
            overhead.rho_loss,
            overhead.curriculum,
            overhead.curriculum_lower_bound,
            fmt6(overhead.ratio)
        );
        artifact::write_csv(&self.layout.analysis("flops.csv"), &prov, &flops_csv)?;

        let mut summary = comparison.summary();
        summary.push_str(&format!(
            "\nscored samples: {} ({} quarantined)\n\
             scoring overhead vs online selection: {} / {} forward FLOPs (ratio {})\n",
            table.len(),
            table.quarantined().count(),
            overhead.curriculum,
            overhead.rho_loss,
            fmt6(overhead.ratio)
        ));
        artifact::write_atomic(&self.layout.analysis("summary.txt"), summary.as_bytes())?;
        log::info!("\n{summary}");
        Ok(())
    }
}
