//! Deterministic synthetic paired world.
//!
//! A scene mixes one to three audio events. Its audio surrogate is a
//! weighted sum of fixed per-event feature prototypes plus Gaussian noise;
//! its caption is realised from a phrase grammar, one phrase per event
//! joined by connectors. Everything is a pure function of
//! `(seed, n_scenes, n_events)`.

mod grammar;
mod jsonl;
mod vocab;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::tokenize;
use crate::numerics::RngState;
use grammar::{realize, CONNECTORS, EVENT_BANK, STYLES};

pub use jsonl::{load_jsonl, load_text_jsonl, save_jsonl, TextRecord};
pub use vocab::{Vocabulary, BOS, EOS, PAD};

/// Audio-feature dimension of the synthetic world.
pub const FEATURE_DIM: usize = 48;
const MIN_PROTOTYPE_ANGLE_DEG: f64 = 10.0;
const MIN_EVENT_RECALL: f64 = 0.9;
const MAX_REALIZATION_TRIES: u64 = 256;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("n_scenes ≥ 10 required (got {0})")]
    TooFewScenes(usize),
    #[error("n_events must be in 1..={max} (template bank size), got {got}")]
    TooManyEvents { got: usize, max: usize },
    #[error("unknown style id {0}")]
    UnknownStyle(usize),
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("could not realise a held-out caption for scene {0}")]
    Realization(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Plain,
    Styled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pool {
    Paired,
    TextOnlyExtra,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventPrototype {
    pub name: String,
    pub feature_prototype: Vec<f32>,
    pub caption_templates: Vec<String>,
    /// Withheld templates used only by the paraphrase pool.
    pub extra_templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Sorted, distinct event indices.
    pub event_ids: Vec<usize>,
    pub mixing_weights: Vec<f64>,
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    #[serde(rename = "features", default, skip_serializing_if = "Option::is_none")]
    pub audio_features: Option<Vec<f32>>,
    pub caption: String,
    pub split: Split,
    pub style: Style,
    pub pool: Pool,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    /// Seed actually used after any sanity-check regeneration.
    pub effective_seed: u64,
    pub events: Vec<EventPrototype>,
    pub scenes: Vec<Scene>,
    /// One record per scene, parallel to `scenes`.
    pub records: Vec<CaptionRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&CaptionRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn scene_of(&self, record_index: usize) -> &Scene {
        &self.scenes[record_index]
    }

    /// Fraction of scene events recovered by ranking prototypes against features.
    pub fn nearest_prototype_recall(&self) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (scene, rec) in self.scenes.iter().zip(&self.records) {
            let f = rec.audio_features.as_ref().expect("paired record has features");
            let mut scored: Vec<(f64, usize)> = self.events.iter().enumerate().map(|(i, e)| (dot(f, &e.feature_prototype), i)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let top: HashSet<usize> = scored.iter().take(scene.event_ids.len()).map(|s| s.1).collect();
            hit += scene.event_ids.iter().filter(|e| top.contains(e)).count();
            total += scene.event_ids.len();
        }
        hit as f64 / total as f64
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn id_rank(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

const PROTOTYPE_STREAM: u64 = 1 << 40;
const HELDOUT_STREAM: u64 = 2 << 40;
const PARAPHRASE_STREAM: u64 = 3 << 40;

fn prototypes(rng: &RngState, n_events: usize) -> Vec<Vec<f32>> {
    let mut r = rng.derive(PROTOTYPE_STREAM);
    let min_cos = MIN_PROTOTYPE_ANGLE_DEG.to_radians().cos();
    let mut out: Vec<Vec<f32>> = Vec::new();
    while out.len() < n_events {
        let v: Vec<f64> = (0..FEATURE_DIM).map(|_| r.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f32> = v.iter().map(|x| (x / n) as f32).collect();
        if out.iter().all(|p| dot(p, &v).abs() < min_cos) {
            out.push(v);
        }
    }
    out
}

fn draw_scene(r: &mut RngState, n_events: usize) -> Scene {
    let k = 1 + r.below(3.min(n_events));
    let mut ids = r.sample_indices(n_events, k);
    ids.sort_unstable();
    let mixing_weights = (0..k).map(|_| r.uniform_range(0.5, 1.0)).collect();
    Scene { event_ids: ids, mixing_weights, noise_level: r.uniform_range(0.02, 0.06) }
}

fn scene_features(scene: &Scene, protos: &[Vec<f32>], r: &mut RngState) -> Vec<f32> {
    let mut f = vec![0f64; FEATURE_DIM];
    for (&e, &w) in scene.event_ids.iter().zip(&scene.mixing_weights) {
        for (x, p) in f.iter_mut().zip(&protos[e]) {
            *x += w * *p as f64;
        }
    }
    f.iter().map(|x| (x + scene.noise_level * r.normal()) as f32).collect()
}

fn join_phrases(phrases: &[String], r: &mut RngState) -> String {
    let mut out = phrases[0].clone();
    for p in &phrases[1..] {
        out.push(' ');
        out.push_str(CONNECTORS[r.below(CONNECTORS.len())]);
        out.push(' ');
        out.push_str(p);
    }
    out
}

/// Caption from the paired templates of each event, in event-index order.
fn paired_caption(scene: &Scene, r: &mut RngState) -> String {
    let phrases: Vec<String> = scene
        .event_ids
        .iter()
        .map(|&e| {
            let t = EVENT_BANK[e].paired[r.below(2)];
            realize(t, |n| r.below(n))
        })
        .collect();
    join_phrases(&phrases, r)
}

/// Generates the corpus with an 80/10/10 split by id hash.
pub fn generate_corpus(seed: u64, n_scenes: usize, n_events: usize) -> Result<Corpus, CorpusError> {
    if n_scenes < 10 {
        return Err(CorpusError::TooFewScenes(n_scenes));
    }
    if n_events == 0 || n_events > EVENT_BANK.len() {
        return Err(CorpusError::TooManyEvents { got: n_events, max: EVENT_BANK.len() });
    }
    let mut attempt = 0u64;
    loop {
        let effective = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let corpus = generate_once(seed, effective, n_scenes, n_events)?;
        if corpus.nearest_prototype_recall() > MIN_EVENT_RECALL {
            return Ok(corpus);
        }
        attempt += 1;
    }
}

fn generate_once(seed: u64, effective: u64, n_scenes: usize, n_events: usize) -> Result<Corpus, CorpusError> {
    let root = RngState::new(effective);
    let protos = prototypes(&root, n_events);
    let events = EVENT_BANK[..n_events]
        .iter()
        .zip(&protos)
        .map(|(spec, p)| EventPrototype {
            name: spec.name.to_string(),
            feature_prototype: p.clone(),
            caption_templates: spec.paired.iter().map(|s| s.to_string()).collect(),
            extra_templates: spec.withheld.iter().map(|s| s.to_string()).collect(),
        })
        .collect();

    let ids: Vec<String> = (0..n_scenes).map(|i| format!("s{seed}-{i:05}")).collect();
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.sort_by_key(|&i| id_rank(&ids[i]));
    let n_train = n_scenes * 8 / 10;
    let n_val = n_scenes / 10;
    let mut splits = vec![Split::Train; n_scenes];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut scenes: Vec<Option<Scene>> = vec![None; n_scenes];
    let mut captions: Vec<String> = vec![String::new(); n_scenes];
    let mut features: Vec<Vec<f32>> = vec![Vec::new(); n_scenes];
    let mut train_captions = HashSet::new();
    let mut train_sets = HashSet::new();
    for i in (0..n_scenes).filter(|&i| splits[i] == Split::Train) {
        let mut r = root.derive(i as u64);
        let scene = draw_scene(&mut r, n_events);
        captions[i] = paired_caption(&scene, &mut r);
        features[i] = scene_features(&scene, &protos, &mut r);
        train_captions.insert(captions[i].clone());
        train_sets.insert(scene.event_ids.clone());
        scenes[i] = Some(scene);
    }
    // Held-out scenes: event set seen in training, exact caption never seen.
    for i in (0..n_scenes).filter(|&i| splits[i] != Split::Train) {
        let mut accepted = false;
        for t in 0..MAX_REALIZATION_TRIES {
            let mut r = if t == 0 { root.derive(i as u64) } else { root.derive(HELDOUT_STREAM + i as u64 * MAX_REALIZATION_TRIES + t) };
            let scene = draw_scene(&mut r, n_events);
            if !train_sets.contains(&scene.event_ids) {
                continue;
            }
            let caption = paired_caption(&scene, &mut r);
            if train_captions.contains(&caption) {
                continue;
            }
            features[i] = scene_features(&scene, &protos, &mut r);
            captions[i] = caption;
            scenes[i] = Some(scene);
            accepted = true;
            break;
        }
        if !accepted {
            return Err(CorpusError::Realization(ids[i].clone()));
        }
    }

    let records = (0..n_scenes)
        .map(|i| CaptionRecord {
            id: ids[i].clone(),
            audio_features: Some(std::mem::take(&mut features[i])),
            caption: std::mem::take(&mut captions[i]),
            split: splits[i],
            style: Style::Plain,
            pool: Pool::Paired,
        })
        .collect();
    Ok(Corpus {
        seed,
        effective_seed: effective,
        events,
        scenes: scenes.into_iter().map(|s| s.expect("every scene realised")).collect(),
        records,
    })
}

/// Extra text-only captions for each training scene, realised from the
/// withheld templates. Carries no audio features.
pub fn paraphrase_pool(corpus: &Corpus, seed: u64) -> Vec<CaptionRecord> {
    let root = RngState::new(seed).derive(PARAPHRASE_STREAM);
    let mut out = Vec::new();
    for (i, (scene, rec)) in corpus.scenes.iter().zip(&corpus.records).enumerate() {
        if rec.split != Split::Train {
            continue;
        }
        let mut r = root.derive(i as u64);
        let count = 1 + r.below(2);
        let first = r.below(2);
        let mut seen = HashSet::new();
        for c in 0..count {
            let phrases: Vec<String> = scene
                .event_ids
                .iter()
                .map(|&e| {
                    let pick = if c == 0 { first } else { r.below(2) };
                    realize(EVENT_BANK[e].withheld[pick], |n| r.below(n))
                })
                .collect();
            let caption = join_phrases(&phrases, &mut r);
            if !seen.insert(caption.clone()) {
                continue;
            }
            out.push(CaptionRecord {
                id: format!("{}-x{c}", rec.id),
                audio_features: None,
                caption,
                split: Split::Train,
                style: Style::Plain,
                pool: Pool::TextOnlyExtra,
            });
        }
    }
    out
}

pub fn style_names() -> Vec<&'static str> {
    STYLES.iter().map(|s| s.0).collect()
}

pub fn style_id(name: &str) -> Option<usize> {
    STYLES.iter().position(|s| s.0 == name)
}

/// Wraps `caption` in the fixed template of `style_id`, keeping every input word.
pub fn stylize(caption: &str, style_id: usize) -> Result<String, CorpusError> {
    let (_, pre, post) = STYLES.get(style_id).ok_or(CorpusError::UnknownStyle(style_id))?;
    Ok(format!("{pre}{caption}{post}"))
}

/// Styled copy of a record set; features are kept so the styled test split stays evaluable.
pub fn stylize_records(records: &[CaptionRecord], style_id: usize) -> Result<Vec<CaptionRecord>, CorpusError> {
    records.iter().map(|r| Ok(CaptionRecord { caption: stylize(&r.caption, style_id)?, style: Style::Styled, ..r.clone() })).collect()
}

/// Distinct words across `captions`.
pub fn vocabulary_of<'a>(captions: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    captions.into_iter().flat_map(tokenize).collect()
}
