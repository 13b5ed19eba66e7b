//! Domain-tagged documents, byte-level tokenization, stratified splitting and
//! fixed-length packing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::error::{Error, Result};
use crate::model::TokenId;

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// Token inserted between consecutive documents of a domain before chunking.
pub const DOC_SEPARATOR: TokenId = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub domain: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, domain: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            domain: domain.into(),
            text: text.into(),
        }
    }
}

/// One fixed-length training window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub sample_id: String,
    pub domain: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Proxy,
    Train,
    Validation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Proxy, Split::Train, Split::Validation];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Proxy => "proxy",
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Disjoint proxy / train / validation sequences.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CorpusSplit {
    pub proxy: Vec<PackedSequence>,
    pub train: Vec<PackedSequence>,
    pub validation: Vec<PackedSequence>,
}

impl CorpusSplit {
    pub fn get(&self, split: Split) -> &[PackedSequence] {
        match split {
            Split::Proxy => &self.proxy,
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn domains(&self) -> BTreeSet<String> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.get(s).iter().map(|p| p.domain.clone()))
            .collect()
    }

    /// `(sample_id, split, domain)` rows sorted by sample id.
    pub fn manifest_rows(&self) -> Vec<(&str, Split, &str)> {
        let mut rows: Vec<_> = Split::ALL
            .iter()
            .flat_map(|&s| {
                self.get(s)
                    .iter()
                    .map(move |p| (p.sample_id.as_str(), s, p.domain.as_str()))
            })
            .collect();
        rows.sort();
        rows
    }

    /// Binary form: container header lists `(sample_id, split, domain, len)`
    /// per sequence, the payload holds the tokens as little-endian u32.
    pub fn to_bytes(&self, provenance: &Provenance) -> Vec<u8> {
        let mut header = SeqHeader {
            provenance: provenance.clone(),
            sequences: Vec::new(),
        };
        let mut payload = Vec::new();
        for s in Split::ALL {
            for p in self.get(s) {
                header
                    .sequences
                    .push((p.sample_id.clone(), s, p.domain.clone(), p.tokens.len()));
                for t in &p.tokens {
                    payload.extend_from_slice(&t.to_le_bytes());
                }
            }
        }
        artifact::encode_container(SEQ_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Provenance)> {
        let (header, mut payload): (SeqHeader, _) = artifact::decode_container("sequences", SEQ_MAGIC, bytes)?;
        let mut out = CorpusSplit::default();
        for (sample_id, split, domain, len) in header.sequences {
            if payload.len() < len * 4 {
                return Err(Error::format("sequences", format!("payload ends inside {sample_id}")));
            }
            let (chunk, rest) = payload.split_at(len * 4);
            payload = rest;
            let tokens = chunk
                .chunks_exact(4)
                .map(|b| TokenId::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let seq = PackedSequence {
                sample_id,
                domain,
                tokens,
            };
            match split {
                Split::Proxy => out.proxy.push(seq),
                Split::Train => out.train.push(seq),
                Split::Validation => out.validation.push(seq),
            }
        }
        if !payload.is_empty() {
            return Err(Error::format("sequences", "trailing bytes"));
        }
        Ok((out, header.provenance))
    }

    /// Manifest CSV body (`sample_id,split,domain`), without provenance.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("sample_id,split,domain\n");
        for (id, split, domain) in self.manifest_rows() {
            out.push_str(&format!("{id},{},{domain}\n", split.as_str()));
        }
        out
    }
}

const SEQ_MAGIC: &[u8; 8] = b"LMSEQS01";

#[derive(Serialize, Deserialize)]
struct SeqHeader {
    provenance: Provenance,
    sequences: Vec<(String, Split, String, usize)>,
}

pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`tokenize`]; fails on ids above 255 or invalid UTF-8.
pub fn detokenize(tokens: &[TokenId]) -> Result<String> {
    let bytes = tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Contract(format!("token {t} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::format("token stream", e.to_string()))
}

fn check_unique_ids(docs: &[Document]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in docs {
        if d.domain.is_empty() || d.domain.contains([',', '\n', '\r', '\t']) {
            return Err(Error::Config(format!(
                "domain label {:?} must be non-empty and free of commas and line breaks",
                d.domain
            )));
        }
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::Config(format!("duplicate document id {:?}", d.doc_id)));
        }
    }
    Ok(())
}

/// Packs documents per domain: tokenize, join with [`DOC_SEPARATOR`], cut
/// into non-overlapping `context_len` windows and drop the remainder.
///
/// Sample ids are `{prefix}{domain}/{index:06}` with the index counted per
/// domain in document order.
pub fn pack(docs: &[Document], context_len: usize, prefix: &str) -> Result<Vec<PackedSequence>> {
    if context_len < 2 {
        return Err(Error::Config(format!(
            "context_len must be at least 2, got {context_len}"
        )));
    }
    if docs.is_empty() {
        return Err(Error::Config("cannot pack an empty corpus".into()));
    }
    let mut by_domain: BTreeMap<&str, Vec<TokenId>> = BTreeMap::new();
    for d in docs {
        let stream = by_domain.entry(d.domain.as_str()).or_default();
        if !stream.is_empty() {
            stream.push(DOC_SEPARATOR);
        }
        stream.extend(tokenize(&d.text));
    }
    let mut out = Vec::new();
    for (domain, stream) in by_domain {
        for (i, window) in stream.chunks_exact(context_len).enumerate() {
            out.push(PackedSequence {
                sample_id: format!("{prefix}{domain}/{i:06}"),
                domain: domain.to_string(),
                tokens: window.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Documents assigned to each split.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DocumentSplit {
    pub proxy: Vec<Document>,
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
}

fn check_fractions(proxy_frac: f64, val_frac: f64) -> Result<()> {
    if !(proxy_frac > 0.0 && val_frac > 0.0 && proxy_frac + val_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions need 0 < proxy_frac, val_frac and proxy_frac + val_frac < 1 \
             (got {proxy_frac}, {val_frac})"
        )));
    }
    Ok(())
}

/// Stratified document split: inside each domain, documents are ordered by
/// id, shuffled with a seeded generator and cut into proxy / validation /
/// train shares.
pub fn split_documents(docs: &[Document], proxy_frac: f64, val_frac: f64, seed: u64) -> Result<DocumentSplit> {
    check_fractions(proxy_frac, val_frac)?;
    check_unique_ids(docs)?;
    let mut by_domain: BTreeMap<&str, Vec<&Document>> = BTreeMap::new();
    for d in docs {
        by_domain.entry(d.domain.as_str()).or_default().push(d);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DocumentSplit::default();
    for (domain, mut group) in by_domain {
        let n = group.len();
        if n < 3 {
            return Err(Error::Config(format!(
                "domain {domain:?} has {n} documents; at least 3 are needed to populate every split"
            )));
        }
        group.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        group.shuffle(&mut rng);
        let n_proxy = ((proxy_frac * n as f64).round() as usize).clamp(1, n - 2);
        let n_val = ((val_frac * n as f64).round() as usize).clamp(1, n - n_proxy - 1);
        let (proxy, rest) = group.split_at(n_proxy);
        let (val, train) = rest.split_at(n_val);
        out.proxy.extend(proxy.iter().map(|&d| d.clone()));
        out.validation.extend(val.iter().map(|&d| d.clone()));
        out.train.extend(train.iter().map(|&d| d.clone()));
    }
    Ok(out)
}

/// Splits documents per domain and packs each split into `context_len`
/// windows. Every domain must end up with at least one window in every
/// split.
pub fn split_corpus(
    docs: &[Document],
    proxy_frac: f64,
    val_frac: f64,
    seed: u64,
    context_len: usize,
) -> Result<CorpusSplit> {
    let ds = split_documents(docs, proxy_frac, val_frac, seed)?;
    let split = CorpusSplit {
        proxy: pack(&ds.proxy, context_len, "proxy/")?,
        train: pack(&ds.train, context_len, "train/")?,
        validation: pack(&ds.validation, context_len, "validation/")?,
    };
    let domains: BTreeSet<&str> = docs.iter().map(|d| d.domain.as_str()).collect();
    for s in Split::ALL {
        let present: BTreeSet<&str> = split.get(s).iter().map(|p| p.domain.as_str()).collect();
        if let Some(missing) = domains.iter().find(|d| !present.contains(*d)) {
            return Err(Error::Config(format!(
                "domain {missing:?} has no full {context_len}-token window in the {} split; \
                 add text or shorten context_len",
                s.as_str()
            )));
        }
    }
    Ok(split)
}

/// Reads a corpus from either a directory with one subdirectory per domain
/// (each regular file is a document, id `domain/file_name`) or a record
/// file with `domain<TAB>doc_id<TAB>text` lines, where the text may use
/// `\n`, `\t` and `\\` escapes.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let docs = if meta.is_dir() {
        load_dir(path)?
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_records(&text)?
    };
    check_unique_ids(&docs)?;
    if docs.is_empty() {
        return Err(Error::Config(format!("corpus at {} is empty", path.display())));
    }
    Ok(docs)
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn load_dir(root: &Path) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for dom in sorted_entries(root)? {
        let dpath = dom.path();
        if !dpath.is_dir() {
            continue;
        }
        let domain = dom.file_name().to_string_lossy().into_owned();
        for f in sorted_entries(&dpath)? {
            let fpath = f.path();
            if !fpath.is_file() {
                continue;
            }
            let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            let text =
                String::from_utf8(bytes).map_err(|e| Error::format(fpath.display().to_string(), e.to_string()))?;
            let name = f.file_name().to_string_lossy().into_owned();
            docs.push(Document::new(format!("{domain}/{name}"), domain.clone(), text));
        }
    }
    Ok(docs)
}

/// Parses `domain<TAB>doc_id<TAB>text` records; blank lines are skipped.
pub fn parse_records(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(domain), Some(id), Some(body)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(
                "corpus record",
                format!("line {}: expected domain<TAB>doc_id<TAB>text", i + 1),
            ));
        };
        if domain.is_empty() || id.is_empty() {
            return Err(Error::format(
                "corpus record",
                format!("line {}: empty domain or document id", i + 1),
            ));
        }
        docs.push(Document::new(id, domain, unescape(body)));
    }
    Ok(docs)
}

/// Serializes documents as records accepted by [`parse_records`].
pub fn format_records(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&format!("{}\t{}\t{}\n", d.domain, d.doc_id, escape(&d.text)));
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}
