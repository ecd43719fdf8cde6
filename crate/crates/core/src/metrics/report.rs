use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cider_d, corpus_bleu, rouge_l, tokenize, CorpusStats, MetricError, Smoothing, TokenizedCaption};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }

    pub fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("bleu_1", self.bleu_1),
            ("bleu_2", self.bleu_2),
            ("bleu_3", self.bleu_3),
            ("bleu_4", self.bleu_4),
            ("rouge_l", self.rouge_l),
            ("cider_d", self.cider_d),
        ]
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries().into_iter().find(|(k, _)| *k == metric).map(|(_, v)| v)
    }
}

/// Corpus metrics of `predictions` against `references`.
///
/// Examples are processed in id order, so the report does not depend on
/// the order of either input. CIDEr-D statistics come from the references
/// of the predicted ids.
pub fn evaluate_corpus(predictions: &[Prediction], references: &[Reference], smoothing: Smoothing) -> Result<MetricReport, MetricError> {
    if predictions.is_empty() {
        return Err(MetricError::NoPredictions);
    }
    let mut by_id: HashMap<&str, &Reference> = HashMap::new();
    for r in references {
        if by_id.insert(&r.id, r).is_some() {
            return Err(MetricError::DuplicateId(r.id.clone()));
        }
    }
    let mut preds: Vec<&Prediction> = predictions.iter().collect();
    preds.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = preds.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(MetricError::DuplicateId(w[0].id.clone()));
    }
    let missing: Vec<&str> = preds.iter().filter(|p| !by_id.contains_key(p.id.as_str())).map(|p| p.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(MetricError::MissingReferences(missing.join(",")));
    }
    let cands: Vec<TokenizedCaption> = preds.iter().map(|p| tokenize(&p.caption)).collect();
    let refs: Vec<Vec<TokenizedCaption>> =
        preds.iter().map(|p| by_id[p.id.as_str()].captions.iter().map(|c| tokenize(c)).collect()).collect();
    evaluate_tokenized(&cands, &refs, smoothing)
}

/// Metric report over already tokenised, aligned candidates and references.
pub fn evaluate_tokenized(
    cands: &[TokenizedCaption],
    refs: &[Vec<TokenizedCaption>],
    smoothing: Smoothing,
) -> Result<MetricReport, MetricError> {
    let b = |n| corpus_bleu(cands, refs, n, smoothing);
    let rouge: f64 = cands.iter().zip(refs).map(|(c, r)| if c.is_empty() { Ok(0.0) } else { rouge_l(c, r) }).sum::<Result<f64, _>>()?
        / cands.len() as f64;
    let stats = CorpusStats::from_references(refs);
    let cider = cider_d(cands, refs, &stats)?;
    Ok(MetricReport { bleu_1: b(1)?, bleu_2: b(2)?, bleu_3: b(3)?, bleu_4: b(4)?, rouge_l: rouge, cider_d: cider.mean })
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, MetricError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| MetricError::Io(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// [`evaluate_corpus`] over prediction and reference JSONL files.
pub fn evaluate_files(pred: &Path, refs: &Path, smoothing: Smoothing) -> Result<MetricReport, MetricError> {
    let p: Vec<Prediction> = read_jsonl(pred)?;
    let r: Vec<Reference> = read_jsonl(refs)?;
    evaluate_corpus(&p, &r, smoothing)
}
