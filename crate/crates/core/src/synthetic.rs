//! Synthetic multi-domain corpus generator.
//!
//! Each domain has its own byte alphabet, a vocabulary of made-up words and
//! a sparse word-bigram chain. Documents walk the chain; a per-document
//! noise rate replaces words with random strings, so documents differ in
//! how much learnable structure they carry.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

/// Share of a domain's documents generated with a given noise rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevel {
    pub weight: f64,
    /// Probability that a word is replaced by a random string.
    pub rate: f64,
}

fn default_vocab() -> usize {
    600
}
fn default_branching() -> usize {
    4
}
fn default_alphabet() -> usize {
    24
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub n_docs: usize,
    /// Document length in bytes.
    pub doc_bytes: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    /// Successors per word in the bigram chain.
    #[serde(default = "default_branching")]
    pub branching: usize,
    #[serde(default = "default_alphabet")]
    pub alphabet: usize,
    pub noise: Vec<NoiseLevel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl SyntheticSpec {
    /// `n` domains of `n_docs` documents each, mixing clean, noisy and
    /// gibberish documents.
    pub fn toy(n: usize, n_docs: usize, doc_bytes: usize, seed: u64) -> Self {
        let names = ["prose", "code", "tables", "dialog", "legal", "news", "chat"];
        let domains = (0..n)
            .map(|i| DomainSpec {
                name: names.get(i).map_or_else(|| format!("domain{i}"), |s| s.to_string()),
                n_docs,
                doc_bytes,
                vocab: default_vocab(),
                branching: default_branching(),
                alphabet: default_alphabet(),
                noise: vec![
                    NoiseLevel { weight: 0.4, rate: 0.0 },
                    NoiseLevel { weight: 0.3, rate: 0.3 },
                    NoiseLevel { weight: 0.3, rate: 1.0 },
                ],
            })
            .collect();
        SyntheticSpec { seed, domains }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.domains.is_empty() {
            return bad("synthetic corpus needs at least one domain".into());
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.domains.len() {
            return bad("synthetic domain names must be unique".into());
        }
        for d in &self.domains {
            if d.name.is_empty() || d.name.contains(['/', ',', '\t', '\n']) {
                return bad(format!(
                    "domain name {:?} must be non-empty without '/', ',' or whitespace separators",
                    d.name
                ));
            }
            if d.n_docs == 0 || d.doc_bytes == 0 || d.vocab < 2 || d.branching == 0 {
                return bad(format!(
                    "domain {:?}: n_docs, doc_bytes, branching must be positive and vocab >= 2",
                    d.name
                ));
            }
            if !(2..=90).contains(&d.alphabet) {
                return bad(format!("domain {:?}: alphabet must be between 2 and 90 bytes", d.name));
            }
            if d.noise.is_empty()
                || d.noise
                    .iter()
                    .any(|n| !(n.weight > 0.0) || !(0.0..=1.0).contains(&n.rate))
            {
                return bad(format!(
                    "domain {:?}: noise levels need positive weights and rates in [0, 1]",
                    d.name
                ));
            }
        }
        Ok(())
    }
}

struct DomainSource {
    alphabet: Vec<u8>,
    words: Vec<Vec<u8>>,
    successors: Vec<Vec<usize>>,
    succ_dist: WeightedIndex<f64>,
    noise_dist: WeightedIndex<f64>,
}

impl DomainSource {
    fn new(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut printable: Vec<u8> = (b'!'..=b'~').collect();
        printable.shuffle(rng);
        let alphabet = printable[..spec.alphabet].to_vec();
        let words = (0..spec.vocab)
            .map(|_| {
                let len = rng.random_range(2..=7);
                (0..len)
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                    .collect()
            })
            .collect();
        let successors = (0..spec.vocab)
            .map(|_| (0..spec.branching).map(|_| rng.random_range(0..spec.vocab)).collect())
            .collect();
        // Zipf-like successor weights: 1, 1/2, 1/3, ...
        let succ_dist = WeightedIndex::new((1..=spec.branching).map(|k| 1.0 / k as f64))
            .map_err(|e| Error::Config(e.to_string()))?;
        let noise_dist =
            WeightedIndex::new(spec.noise.iter().map(|n| n.weight)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(DomainSource {
            alphabet,
            words,
            successors,
            succ_dist,
            noise_dist,
        })
    }

    fn document(&self, len: usize, rate: f64, rng: &mut ChaCha8Rng) -> String {
        let mut out: Vec<u8> = Vec::with_capacity(len + 8);
        let mut word = rng.random_range(0..self.words.len());
        let mut in_line = 0;
        while out.len() < len {
            if rng.random::<f64>() < rate {
                let n = rng.random_range(2..=7);
                out.extend((0..n).map(|_| self.alphabet[rng.random_range(0..self.alphabet.len())]));
            } else {
                out.extend_from_slice(&self.words[word]);
            }
            in_line += 1;
            if in_line == 12 {
                out.push(b'\n');
                in_line = 0;
            } else {
                out.push(b' ');
            }
            word = self.successors[word][self.succ_dist.sample(rng)];
        }
        out.truncate(len);
        String::from_utf8(out).expect("printable ascii")
    }
}

/// Generates the corpus; document ids are `{domain}-{index:05}`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut docs = Vec::new();
    for (i, d) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_add(0x5851_F42D_4C95_7F2D_u64.wrapping_mul(i as u64 + 1)),
        );
        let source = DomainSource::new(d, &mut rng)?;
        for k in 0..d.n_docs {
            let rate = d.noise[source.noise_dist.sample(&mut rng)].rate;
            let text = source.document(d.doc_bytes, rate, &mut rng);
            docs.push(Document::new(format!("{}-{k:05}", d.name), d.name.clone(), text));
        }
    }
    Ok(docs)
}
