//! Learnability scores: early proxy-checkpoint loss minus the mean loss
//! under the late checkpoints.
//!
//! Losses are stored in whole micro-nats so that the persisted table obeys
//! `learnability == l_early - l_late` exactly, digit for digit.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::checkpoint::Checkpoint;
use crate::corpus::PackedSequence;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, TokenId};
use crate::trainer::LATE_CHECKPOINTS;

const SCORE_CHUNK: usize = 32;
const MICRO: f64 = 1e6;

/// A loss in integer micro-nats; `None` marks a non-finite value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MicroNats(pub Option<i64>);

impl MicroNats {
    pub fn from_nats(x: f64) -> Self {
        if x.is_finite() {
            MicroNats(Some((x * MICRO).round() as i64))
        } else {
            MicroNats(None)
        }
    }

    pub fn nats(self) -> f64 {
        self.0.map_or(f64::NAN, |v| v as f64 / MICRO)
    }

    pub fn is_finite(self) -> bool {
        self.0.is_some()
    }

    fn sub(self, other: MicroNats) -> MicroNats {
        match (self.0, other.0) {
            (Some(a), Some(b)) => MicroNats(Some(a - b)),
            _ => MicroNats(None),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "nan" {
            return Ok(MicroNats(None));
        }
        let bad = || Error::format("score table", format!("bad value {s:?}"));
        let (neg, digits) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = digits.split_once('.').ok_or_else(bad)?;
        if frac.len() != 6 || int.is_empty() {
            return Err(bad());
        }
        let int: i64 = int.parse().map_err(|_| bad())?;
        let frac: i64 = frac.parse().map_err(|_| bad())?;
        let v = int * 1_000_000 + frac;
        Ok(MicroNats(Some(if neg { -v } else { v })))
    }
}

impl fmt::Display for MicroNats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("nan"),
            Some(v) => {
                let sign = if v < 0 { "-" } else { "" };
                let a = v.unsigned_abs();
                write!(f, "{sign}{}.{:06}", a / 1_000_000, a % 1_000_000)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreRow {
    pub sample_id: String,
    pub domain: String,
    pub l_early: MicroNats,
    pub l_late: MicroNats,
    pub learnability: MicroNats,
}

impl ScoreRow {
    /// Builds a row; the score is the exact difference of the rounded losses.
    pub fn new(sample_id: impl Into<String>, domain: impl Into<String>, l_early: f64, l_late: f64) -> Self {
        let e = MicroNats::from_nats(l_early);
        let l = MicroNats::from_nats(l_late);
        ScoreRow {
            sample_id: sample_id.into(),
            domain: domain.into(),
            l_early: e,
            l_late: l,
            learnability: e.sub(l),
        }
    }

    /// Rows with a non-finite loss are kept in the table but never ranked.
    pub fn is_quarantined(&self) -> bool {
        !self.learnability.is_finite()
    }

    pub fn score(&self) -> f64 {
        self.learnability.nats()
    }
}

/// Score rows sorted by sample id, plus provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LearnabilityTable {
    pub rows: Vec<ScoreRow>,
    pub provenance: Provenance,
}

impl LearnabilityTable {
    /// Sorts rows by sample id and rejects duplicates.
    pub fn new(mut rows: Vec<ScoreRow>, provenance: Provenance) -> Result<Self> {
        rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if let Some(w) = rows.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
            return Err(Error::Contract(format!("duplicate sample id {:?}", w[0].sample_id)));
        }
        Ok(LearnabilityTable { rows, provenance })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn quarantined(&self) -> impl Iterator<Item = &ScoreRow> {
        self.rows.iter().filter(|r| r.is_quarantined())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.provenance.csv_header();
        out.push_str("sample_id,domain,l_early,l_late,learnability\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sample_id, r.domain, r.l_early, r.l_late, r.learnability
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (provenance, body) = Provenance::split_csv(text)?;
        let mut lines = body.lines();
        if lines.next() != Some("sample_id,domain,l_early,l_late,learnability") {
            return Err(Error::format("score table", "unexpected column header"));
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::format("score table", format!("bad row {line:?}")));
            }
            let row = ScoreRow {
                sample_id: f[0].to_string(),
                domain: f[1].to_string(),
                l_early: MicroNats::parse(f[2])?,
                l_late: MicroNats::parse(f[3])?,
                learnability: MicroNats::parse(f[4])?,
            };
            if row.learnability != row.l_early.sub(row.l_late) {
                return Err(Error::format(
                    "score table",
                    format!("row {} breaks learnability = l_early - l_late", row.sample_id),
                ));
            }
            rows.push(row);
        }
        Self::new(rows, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path, stage: &'static str) -> Result<Self> {
        let (prov, body) = artifact::read_csv(path, stage)?;
        let mut text = prov.csv_header();
        text.push_str(&body);
        Self::from_csv(&text)
    }
}

/// Mean next-token loss of every sequence under `model`; a sequence whose
/// loss cannot be computed finitely gets NaN.
pub fn sequence_losses(model: &LanguageModel, seqs: &[&PackedSequence]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(SCORE_CHUNK) {
        let toks: Vec<&[TokenId]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        match model.sequence_losses(&toks) {
            Ok(v) => out.extend(v.into_iter().map(f64::from)),
            // One bad sample poisons the whole chunk; retry one by one.
            Err(Error::Numeric(_)) => {
                for t in toks {
                    out.push(match model.sequence_loss(t) {
                        Ok(l) => f64::from(l),
                        Err(Error::Numeric(_)) => f64::NAN,
                        Err(e) => return Err(e),
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn check_checkpoints(early: &Checkpoint, late: &[Checkpoint]) -> Result<()> {
    if late.len() != LATE_CHECKPOINTS {
        return Err(Error::Contract(format!(
            "need exactly {LATE_CHECKPOINTS} late checkpoints, got {}",
            late.len()
        )));
    }
    let steps: HashSet<usize> = late.iter().map(|c| c.step).collect();
    if steps.len() != late.len() {
        return Err(Error::Contract("late checkpoints must have distinct steps".into()));
    }
    if let Some(c) = late.iter().find(|c| c.step <= early.step) {
        return Err(Error::Contract(format!(
            "late checkpoint at step {} is not after the early one at {}",
            c.step, early.step
        )));
    }
    if let Some(c) = late.iter().find(|c| c.config != early.config) {
        return Err(Error::Contract(format!(
            "checkpoint at step {} has a different model config",
            c.step
        )));
    }
    Ok(())
}

/// Scores every sequence of `train_set`. Rows come back sorted by sample id;
/// non-finite losses are kept as quarantined rows with a warning.
pub fn score_corpus(
    early: &Checkpoint,
    late: &[Checkpoint],
    train_set: &[PackedSequence],
    provenance: Provenance,
) -> Result<LearnabilityTable> {
    check_checkpoints(early, late)?;
    let seqs: Vec<&PackedSequence> = train_set.iter().collect();
    let l_early = sequence_losses(&early.model()?, &seqs)?;
    let mut l_late = vec![0.0f64; seqs.len()];
    for c in late {
        for (acc, l) in l_late.iter_mut().zip(sequence_losses(&c.model()?, &seqs)?) {
            *acc += l;
        }
    }
    let mut rows = Vec::with_capacity(seqs.len());
    for ((s, e), l) in seqs.iter().zip(l_early).zip(l_late) {
        let row = ScoreRow::new(&s.sample_id, &s.domain, e, l / late.len() as f64);
        if row.is_quarantined() {
            log::warn!(
                "sample {} has a non-finite loss; excluded from the curriculum",
                s.sample_id
            );
        }
        rows.push(row);
    }
    let mut steps: Vec<usize> = late.iter().map(|c| c.step).collect();
    steps.sort_unstable();
    let steps: Vec<String> = steps.iter().map(ToString::to_string).collect();
    let provenance = provenance
        .with_note("early_step", early.step)
        .with_note("late_steps", steps.join(" "));
    LearnabilityTable::new(rows, provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    PerDomain,
    Global,
}

/// One scope group's samples in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankGroup {
    /// Domain label, or `None` for the global group.
    pub domain: Option<String>,
    pub sample_ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankGroup {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub scope: Scope,
    pub groups: Vec<RankGroup>,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.groups.iter().map(RankGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A ranking where every sample scores the same, so order is by id.
    pub fn unscored<'a>(samples: impl IntoIterator<Item = &'a PackedSequence>, scope: Scope) -> Self {
        let rows = samples
            .into_iter()
            .map(|s| ScoreRow::new(&s.sample_id, &s.domain, 0.0, 0.0))
            .collect();
        rank_rows(rows, scope)
    }
}

/// Descending-score ranking per scope group; ties by ascending sample id.
/// Quarantined rows are left out. Per-domain groups are ordered by domain.
pub fn rank(table: &LearnabilityTable, scope: Scope) -> Ranking {
    rank_rows(table.rows.clone(), scope)
}

fn rank_rows(rows: Vec<ScoreRow>, scope: Scope) -> Ranking {
    let mut groups: BTreeMap<Option<String>, Vec<ScoreRow>> = BTreeMap::new();
    for r in rows.into_iter().filter(|r| !r.is_quarantined()) {
        let key = match scope {
            Scope::PerDomain => Some(r.domain.clone()),
            Scope::Global => None,
        };
        groups.entry(key).or_default().push(r);
    }
    let groups = groups
        .into_iter()
        .map(|(domain, mut rows)| {
            rows.sort_by(|a, b| {
                b.learnability
                    .cmp(&a.learnability)
                    .then_with(|| a.sample_id.cmp(&b.sample_id))
            });
            RankGroup {
                domain,
                scores: rows.iter().map(ScoreRow::score).collect(),
                sample_ids: rows.into_iter().map(|r| r.sample_id).collect(),
            }
        })
        .collect();
    Ranking { scope, groups }
}
