use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::{ngram_counts, MetricError, TokenizedCaption};

const SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

/// Document frequencies of the reference corpus: one document per example,
/// holding the union of that example's reference n-grams.
#[derive(Clone, Debug)]
pub struct CorpusStats {
    pub document_frequency: BTreeMap<Vec<String>, usize>,
    pub num_documents: usize,
    fingerprint: [u8; 32],
}

fn fingerprint(references: &[Vec<TokenizedCaption>]) -> [u8; 32] {
    let mut h = Sha256::new();
    for refs in references {
        for r in refs {
            h.update(r.join(" ").as_bytes());
            h.update([0x1f]);
        }
        h.update([0x1e]);
    }
    h.finalize().into()
}

impl CorpusStats {
    pub fn from_references(references: &[Vec<TokenizedCaption>]) -> Self {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeSet<&[String]> = BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        Self { document_frequency: df, num_documents: references.len(), fingerprint: fingerprint(references) }
    }

    fn idf(&self, gram: &[String]) -> f64 {
        let df = self.document_frequency.get(gram).copied().unwrap_or(0).max(1);
        (self.num_documents as f64 / df as f64).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub per_example: Vec<f64>,
    pub mean: f64,
}

struct Weighted<'a> {
    vec: BTreeMap<&'a [String], f64>,
    counts: BTreeMap<&'a [String], usize>,
    norm: f64,
}

fn weighted<'a>(tokens: &'a [String], n: usize, stats: &CorpusStats) -> Weighted<'a> {
    let counts = ngram_counts(tokens, n);
    let vec: BTreeMap<&[String], f64> = counts.iter().map(|(g, &c)| (*g, c as f64 * stats.idf(g))).collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    Weighted { vec, counts, norm }
}

fn similarity(c: &Weighted, r: &Weighted) -> f64 {
    if c.norm == 0.0 && r.norm == 0.0 {
        // Every n-gram carries zero weight: fall back to exact agreement of
        // the raw counts. An order with no n-grams on either side scores 0.
        return if !c.counts.is_empty() && c.counts == r.counts { 1.0 } else { 0.0 };
    }
    if c.norm == 0.0 || r.norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = c.vec.iter().filter_map(|(g, &v)| r.vec.get(g).map(|&w| v.min(w) * w)).sum();
    dot / (c.norm * r.norm)
}

/// CIDEr-D with count clipping and a Gaussian length penalty, scaled to `[0, 10]`.
pub fn cider_d(
    candidates: &[TokenizedCaption],
    references: &[Vec<TokenizedCaption>],
    stats: &CorpusStats,
) -> Result<CiderScores, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::Mismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(MetricError::Empty);
    }
    if stats.num_documents != references.len() || stats.fingerprint != fingerprint(references) {
        return Err(MetricError::StatsMismatch);
    }
    let mut per_example = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let cvecs: Vec<Weighted> = (1..=MAX_N).map(|n| weighted(cand, n, stats)).collect();
        let mut total = 0f64;
        for r in refs {
            let delta = cand.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            let mut s = 0f64;
            for (n, cv) in (1..=MAX_N).zip(&cvecs) {
                s += similarity(cv, &weighted(r, n, stats)) * penalty;
            }
            total += s / MAX_N as f64;
        }
        per_example.push(10.0 * total / refs.len() as f64);
    }
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(CiderScores { per_example, mean })
}
