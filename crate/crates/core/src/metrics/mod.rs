//! Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

mod cider;
mod report;
mod tokenize;

use std::collections::BTreeMap;

pub use cider::{cider_d, CiderScores, CorpusStats};
pub use report::{evaluate_corpus, evaluate_files, evaluate_tokenized, MetricReport, Prediction, Reference};
pub use tokenize::tokenize;

/// Whitespace-tokenised, lowercased caption.
pub type TokenizedCaption = Vec<String>;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("empty candidate or reference")]
    Empty,
    #[error("max_n must be in 1..=4, got {0}")]
    Order(usize),
    #[error("{0} candidates but {1} reference sets")]
    Mismatch(usize, usize),
    #[error("corpus statistics were built from a different reference corpus")]
    StatsMismatch,
    #[error("no reference for prediction ids: {0}")]
    MissingReferences(String),
    #[error("prediction file is empty")]
    NoPredictions,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Smoothing {
    #[default]
    None,
    /// Zero-match precisions replaced by `0.1 / count`.
    AddEpsilon,
}

const SMOOTHING_EPS: f64 = 0.1;

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Reference length closest to `c`, preferring the shorter one on ties.
fn closest_ref_len(c: usize, refs: &[TokenizedCaption]) -> usize {
    refs.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

/// BLEU of one candidate against its references.
pub fn bleu(candidate: &[String], references: &[TokenizedCaption], max_n: usize) -> Result<f64, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::Empty);
    }
    corpus_bleu(&[candidate.to_vec()], &[references.to_vec()], max_n, Smoothing::None)
}

/// Corpus-level BLEU: clipped n-gram matches and lengths are summed over all
/// examples before the geometric mean and brevity penalty are applied.
/// Empty candidates contribute length only; a corpus of nothing but empty
/// candidates scores 0.
pub fn corpus_bleu(
    candidates: &[TokenizedCaption],
    references: &[Vec<TokenizedCaption>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, MetricError> {
    if !(1..=4).contains(&max_n) {
        return Err(MetricError::Order(max_n));
    }
    if candidates.len() != references.len() {
        return Err(MetricError::Mismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() || references.iter().any(|r| r.is_empty() || r.iter().any(Vec::is_empty)) {
        return Err(MetricError::Empty);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let cc = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matches[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0f64;
    for n in 0..max_n {
        let p = match (matches[n], smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::AddEpsilon) => SMOOTHING_EPS / totals[n].max(1) as f64,
            (m, _) => m as f64 / totals[n] as f64,
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with `beta = 1.2`, maximised over references.
pub fn rouge_l(candidate: &[String], references: &[TokenizedCaption]) -> Result<f64, MetricError> {
    if candidate.is_empty() || references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(MetricError::Empty);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok(references
        .iter()
        .map(|r| {
            let l = lcs(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests;
