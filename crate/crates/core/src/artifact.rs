//! Artifact plumbing: content hashes, provenance headers for CSV files and a
//! small binary container (magic, JSON header, raw payload).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a value's canonical JSON form.
pub fn value_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    sha256_hex(&json)
}

/// Where an artifact came from: the hash of the config that produced it and
/// the hashes of the upstream artifacts it was computed from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact: String,
    pub config_hash: String,
    #[serde(default)]
    pub upstream: BTreeMap<String, String>,
    /// Free-form extra facts (checkpoint steps, seeds, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(artifact: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Provenance {
            artifact: artifact.into(),
            config_hash: config_hash.into(),
            ..Default::default()
        }
    }

    pub fn with_upstream(mut self, name: impl Into<String>, hash: impl Into<String>) -> Self {
        self.upstream.insert(name.into(), hash.into());
        self
    }

    pub fn with_note(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.notes.insert(key.into(), value.to_string());
        self
    }

    /// `# key: value` lines, deterministic order, each ending in `\n`.
    pub fn csv_header(&self) -> String {
        let mut out = format!("# artifact: {}\n# config_hash: {}\n", self.artifact, self.config_hash);
        for (k, v) in &self.upstream {
            out.push_str(&format!("# upstream.{k}: {v}\n"));
        }
        for (k, v) in &self.notes {
            out.push_str(&format!("# note.{k}: {v}\n"));
        }
        out
    }

    /// Parses the leading `#` lines of a CSV file. Returns the provenance and
    /// the remaining body.
    pub fn split_csv(text: &str) -> Result<(Provenance, &str)> {
        let mut prov = Provenance::default();
        let mut rest = text;
        while let Some(line) = rest.strip_prefix('#') {
            let (line, tail) = match line.find('\n') {
                Some(i) => (&line[..i], &line[i + 1..]),
                None => (line, ""),
            };
            rest = tail;
            let Some((k, v)) = line.trim().split_once(": ") else {
                return Err(Error::format("provenance header", format!("bad line {line:?}")));
            };
            let v = v.to_string();
            if k == "artifact" {
                prov.artifact = v;
            } else if k == "config_hash" {
                prov.config_hash = v;
            } else if let Some(name) = k.strip_prefix("upstream.") {
                prov.upstream.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("note.") {
                prov.notes.insert(name.to_string(), v);
            } else {
                return Err(Error::format("provenance header", format!("unknown key {k:?}")));
            }
        }
        Ok((prov, rest))
    }
}

/// Writes `provenance` followed by `body` to `path`.
pub fn write_csv(path: &Path, provenance: &Provenance, body: &str) -> Result<()> {
    let mut text = provenance.csv_header();
    text.push_str(body);
    write_atomic(path, text.as_bytes())
}

pub fn read_csv(path: &Path, stage: &'static str) -> Result<(Provenance, String)> {
    let text = read_artifact_text(path, stage)?;
    let (prov, body) = Provenance::split_csv(&text)?;
    Ok((prov, body.to_string()))
}

fn read_artifact_text(path: &Path, stage: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encodes `magic`, a little-endian u64 header length, the JSON header and
/// the payload.
pub fn encode_container<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("headers serialize");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

/// Inverse of [`encode_container`]; returns the header and the payload.
pub fn decode_container<'a, H: DeserializeOwned>(
    what: &str,
    magic: &[u8; 8],
    bytes: &'a [u8],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(what, "truncated header"))?;
    let header = serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::format(what, e.to_string()))?;
    Ok((header, &bytes[end..]))
}

pub fn read_container_file(path: &Path, stage: &'static str) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Fixed six-decimal rendering used in every CSV artifact.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        let s = format!("{x:.6}");
        if s == "-0.000000" {
            "0.000000".into()
        } else {
            s
        }
    }
}

pub fn parse_f64(what: &str, s: &str) -> Result<f64> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| Error::format(what, format!("bad number {s:?}"))),
    }
}
