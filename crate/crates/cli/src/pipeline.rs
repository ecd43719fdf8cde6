//! Pipeline stages shared by the commands, the experiments and the
//! acceptance run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mbcap_core::bridge::{estimate_noise_std, train_adapter, AdapterFit, LinearAdapter, NoiseConfig};
use mbcap_core::captioner::{
    beam_search, decoder_pool, pretrain_decoder, train_captioner, CaptionExample, DecoderLM, MappingNetwork, TrainMode,
};
use mbcap_core::corpus::{
    generate_corpus, load_jsonl, load_text_jsonl, paraphrase_pool, save_jsonl, CaptionRecord, Corpus, Split, TextRecord, Vocabulary,
};
use mbcap_core::jointspace::{embed_pairs, train_jointspace, DualEncoder, PairedExample};
use mbcap_core::metrics::{evaluate_corpus, MetricReport, Prediction, Reference, Smoothing};
use mbcap_core::numerics::{RngState, Tensor, TrainLog};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{BridgeMode, RunConfig};

pub const SPLITS: [(Split, &str); 3] = [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")];

pub fn vocabulary() -> Vocabulary {
    Vocabulary::grammar()
}

pub fn generate(cfg: &RunConfig) -> Result<Corpus> {
    Ok(generate_corpus(cfg.seed, cfg.n_scenes, cfg.n_events)?)
}

/// Hashes of the files a command wrote, keyed by file name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), ..Self::default() }
    }

    pub fn param(mut self, k: &str, v: impl ToString) -> Self {
        self.params.insert(k.into(), v.to_string());
        self
    }

    /// Hashes `dir/name` and records it.
    pub fn add(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = fs::read(dir.join(name)).with_context(|| format!("reading {}", dir.join(name).display()))?;
        self.files.insert(name.into(), checkpoint::sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(dir.join("manifest.json"), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).with_context(|| format!("no manifest at {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed {}", p.display()))
    }

    /// Files whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(name, h)| fs::read(dir.join(name)).map(|b| checkpoint::sha256_hex(&b) != **h).unwrap_or(true))
            .map(|(name, _)| name.clone())
            .collect()
    }
}

/// Writes `train/val/test.jsonl` and a manifest naming the generator inputs.
pub fn write_corpus(corpus: &Corpus, n_scenes: usize, n_events: usize, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut m = Manifest::new("generate")
        .param("seed", corpus.seed)
        .param("n_scenes", n_scenes)
        .param("n_events", n_events)
        .param("effective_seed", corpus.effective_seed);
    for (split, name) in SPLITS {
        let file = format!("{name}.jsonl");
        let recs: Vec<CaptionRecord> = corpus.split(split).into_iter().cloned().collect();
        save_jsonl(&recs, &dir.join(&file))?;
        m.add(dir, &file)?;
    }
    m.write(dir)?;
    Ok(m)
}

/// A corpus directory written by [`write_corpus`].
#[derive(Clone, Debug)]
pub struct CorpusDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl CorpusDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir).with_context(|| format!("corpus not found in {}", dir.display()))?;
        if manifest.command != "generate" {
            bail!("{} does not hold a generated corpus", dir.display());
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    fn param(&self, k: &str) -> Result<u64> {
        self.manifest.params.get(k).and_then(|v| v.parse().ok()).with_context(|| format!("corpus manifest lacks `{k}`"))
    }

    pub fn path(&self, split: Split) -> PathBuf {
        let name = SPLITS.iter().find(|s| s.0 == split).expect("known split").1;
        self.dir.join(format!("{name}.jsonl"))
    }

    pub fn records(&self, split: Split) -> Result<Vec<CaptionRecord>> {
        let p = self.path(split);
        load_jsonl(&p).with_context(|| p.display().to_string())
    }

    /// Records without ever parsing their audio features.
    pub fn text_records(&self, split: Split) -> Result<Vec<TextRecord>> {
        let p = self.path(split);
        load_text_jsonl(&p).with_context(|| p.display().to_string())
    }

    /// Rebuilds the in-memory corpus (scenes and paraphrases need it) from
    /// the generator inputs in the manifest.
    pub fn regenerate(&self) -> Result<Corpus> {
        let c = generate_corpus(self.param("seed")?, self.param("n_scenes")? as usize, self.param("n_events")? as usize)?;
        if c.effective_seed != self.param("effective_seed")? {
            bail!("corpus in {} was not produced by this generator", self.dir.display());
        }
        Ok(c)
    }
}

pub fn paired_examples(records: &[&CaptionRecord], vocab: &Vocabulary) -> Result<Vec<PairedExample>> {
    records
        .iter()
        .map(|r| {
            let features = r.audio_features.clone().with_context(|| format!("record {} has no audio features", r.id))?;
            Ok(PairedExample { features, tokens: vocab.encode(&r.caption)? })
        })
        .collect()
}

pub fn train_encoder(cfg: &RunConfig, corpus: &Corpus) -> Result<(DualEncoder, TrainLog)> {
    let vocab = vocabulary();
    let pairs = paired_examples(&corpus.split(Split::Train), &vocab)?;
    let mut enc = DualEncoder::new(cfg.encoder_dims(vocab.len()), cfg.seed);
    let log = train_jointspace(&mut enc, &pairs, &cfg.joint())?;
    Ok((enc, log))
}

pub fn train_decoder(cfg: &RunConfig, corpus: &Corpus) -> Result<(DecoderLM, TrainLog)> {
    let vocab = vocabulary();
    let pool = decoder_pool(corpus, &vocab, cfg.seed)?;
    let mut dec = DecoderLM::new(cfg.decoder_dims(vocab.len()), cfg.seed);
    let log = pretrain_decoder(&mut dec, &pool, &cfg.pretrain())?;
    Ok((dec, log))
}

/// Audio and text embeddings of the held-in (train) pairs.
pub fn train_embeddings(enc: &DualEncoder, corpus: &Corpus) -> Result<(Tensor, Tensor)> {
    let pairs = paired_examples(&corpus.split(Split::Train), &vocabulary())?;
    Ok(embed_pairs(enc, &pairs)?)
}

/// Mean L-infinity text/audio gap over `cfg.gap_samples` held-in pairs.
pub fn estimate_gap(cfg: &RunConfig, enc: &DualEncoder, corpus: &Corpus) -> Result<f64> {
    let (audio, text) = train_embeddings(enc, corpus)?;
    let mut rng = RngState::new(cfg.seed).derive(0x6A9);
    Ok(estimate_noise_std(&audio, &text, cfg.gap_samples, &mut rng)?)
}

pub fn fit_adapter(cfg: &RunConfig, enc: &DualEncoder, corpus: &Corpus) -> Result<(LinearAdapter, AdapterFit)> {
    let (audio, text) = train_embeddings(enc, corpus)?;
    let mut ad = LinearAdapter::identity(enc.dims().d);
    let fit = train_adapter(&mut ad, &text, &audio, &cfg.adapter())?;
    Ok((ad, fit))
}

/// Text-only examples: the input text is the target caption.
pub fn text_examples<'a>(captions: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary) -> Result<Vec<CaptionExample>> {
    captions
        .into_iter()
        .map(|c| {
            let t = vocab.encode(c)?;
            Ok(CaptionExample { text: t.clone(), target: t, features: None })
        })
        .collect()
}

pub fn audio_examples(records: &[&CaptionRecord], vocab: &Vocabulary) -> Result<Vec<CaptionExample>> {
    records
        .iter()
        .map(|r| {
            let t = vocab.encode(&r.caption)?;
            Ok(CaptionExample { text: t.clone(), target: t, features: r.audio_features.clone() })
        })
        .collect()
}

/// Paraphrase-pool examples for text-only training: each paraphrase is the
/// input text and its scene's paired caption is the target.
pub fn paraphrase_examples(corpus: &Corpus, vocab: &Vocabulary, seed: u64) -> Result<Vec<CaptionExample>> {
    let paired: BTreeMap<&str, &str> = corpus.split(Split::Train).iter().map(|r| (r.id.as_str(), r.caption.as_str())).collect();
    paraphrase_pool(corpus, seed)
        .iter()
        .map(|r| {
            let source = r.id.rsplit_once("-x").map(|(s, _)| s).unwrap_or(&r.id);
            let target = paired.get(source).with_context(|| format!("paraphrase {} has no paired caption", r.id))?;
            Ok(CaptionExample { text: vocab.encode(&r.caption)?, target: vocab.encode(target)?, features: None })
        })
        .collect()
}

/// The frozen modules every captioner is trained against.
pub struct Frozen {
    pub encoder: DualEncoder,
    pub decoder: DecoderLM,
    pub adapter: Option<LinearAdapter>,
}

/// Trains (or loads from `cache`) the encoder and decoder for `cfg`.
pub fn frozen_modules(cfg: &RunConfig, corpus: &Corpus, cache: Option<&Path>) -> Result<Frozen> {
    let vocab = vocabulary();
    let mut encoder = DualEncoder::new(cfg.encoder_dims(vocab.len()), cfg.seed);
    let mut decoder = DecoderLM::new(cfg.decoder_dims(vocab.len()), cfg.seed);
    let key = frozen_key(cfg);
    let cached = cache.and_then(|d| {
        let m = Manifest::read(d).ok()?;
        (m.params.get("key") == Some(&key) && m.verify(d).is_empty()).then_some(d)
    });
    if let Some(d) = cached {
        checkpoint::load_into(&mut encoder.params, &d.join("encoder.mbck"))?;
        checkpoint::load_into(&mut decoder.params, &d.join("decoder.mbck"))?;
        return Ok(Frozen { encoder, decoder, adapter: None });
    }
    let (encoder, elog) = train_encoder(cfg, corpus)?;
    let (decoder, dlog) = train_decoder(cfg, corpus)?;
    if let Some(d) = cache {
        fs::create_dir_all(d)?;
        checkpoint::save(&encoder.params, &d.join("encoder.mbck"))?;
        checkpoint::save(&decoder.params, &d.join("decoder.mbck"))?;
        fs::write(d.join("encoder_log.csv"), elog.to_csv())?;
        fs::write(d.join("decoder_log.csv"), dlog.to_csv())?;
        let mut m = Manifest::new("frozen").param("key", key);
        for f in ["encoder.mbck", "decoder.mbck", "encoder_log.csv", "decoder_log.csv"] {
            m.add(d, f)?;
        }
        m.write(d)?;
    }
    Ok(Frozen { encoder, decoder, adapter: None })
}

/// Identifies the settings the frozen modules depend on.
fn frozen_key(cfg: &RunConfig) -> String {
    let relevant = RunConfig {
        preset: String::new(),
        epochs: 0,
        batch_size: 1,
        lr: 0.0,
        warmup_steps: 0,
        prefix_length: 1,
        mapper_layers: 0,
        mapper_heads: 1,
        mapper_ff: 0,
        mode: TrainMode::TextOnly,
        bridge: BridgeMode::None,
        noise_std: None,
        gap_samples: 1,
        adapter_epochs: 0,
        adapter_batch_size: 1,
        adapter_lr: 0.0,
        beam_size: 1,
        max_caption_len: 1,
        ..cfg.clone()
    };
    checkpoint::sha256_hex(relevant.to_toml().as_bytes())
}

/// Settings of one captioner run beyond the shared config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptionerSpec {
    pub mode: TrainMode,
    pub bridge: BridgeMode,
    pub noise_std: f64,
}

pub fn train_mapper(cfg: &RunConfig, frozen: &Frozen, spec: CaptionerSpec, data: &[CaptionExample]) -> Result<(MappingNetwork, TrainLog)> {
    let mut mapper = MappingNetwork::new(cfg.mapper_dims(), cfg.seed);
    let text_only = spec.mode == TrainMode::TextOnly;
    let adapter = if text_only && spec.bridge.uses_adapter() {
        Some(frozen.adapter.as_ref().context("bridge mode needs a trained adapter")?)
    } else {
        None
    };
    let noise = if text_only && spec.bridge.uses_noise() { Some(NoiseConfig::new(spec.noise_std)?) } else { None };
    let log = train_captioner(spec.mode, &mut mapper, &frozen.decoder, &frozen.encoder, adapter, noise, data, &cfg.caption())?;
    Ok((mapper, log))
}

/// Audio input for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioInput {
    pub id: String,
    pub features: Vec<f32>,
}

pub fn audio_inputs(records: &[&CaptionRecord]) -> Result<Vec<AudioInput>> {
    records
        .iter()
        .map(|r| {
            let features = r.audio_features.clone().with_context(|| format!("record {} has no audio features", r.id))?;
            Ok(AudioInput { id: r.id.clone(), features })
        })
        .collect()
}

/// Captions each input from the prefix at `source[i]`; the identity
/// permutation gives ordinary inference.
fn decode_with(
    cfg: &RunConfig,
    mapper: &MappingNetwork,
    frozen: &Frozen,
    inputs: &[AudioInput],
    source: &[usize],
) -> Result<Vec<Prediction>> {
    let vocab = vocabulary();
    let feats: Vec<&[f32]> = inputs.iter().map(|i| i.features.as_slice()).collect();
    let emb = frozen.encoder.encode_audios(&feats)?;
    let prefixes = mapper.build_prefixes(&emb)?;
    let k = cfg.prefix_length;
    let d = cfg.d_model;
    inputs
        .iter()
        .zip(source)
        .map(|(inp, &s)| {
            let p = Tensor::new(&[k, d], prefixes.data()[s * k * d..(s + 1) * k * d].to_vec())?;
            let best = beam_search(&frozen.decoder, &p, cfg.beam_size, cfg.max_caption_len)?;
            let h = best.first().context("beam search returned nothing")?;
            Ok(Prediction { id: inp.id.clone(), caption: vocab.decode(h.caption_tokens()) })
        })
        .collect()
}

/// Swapped-encoder inference: audio embedding, mapper, beam search.
pub fn predict(cfg: &RunConfig, mapper: &MappingNetwork, frozen: &Frozen, inputs: &[AudioInput]) -> Result<Vec<Prediction>> {
    let ident: Vec<usize> = (0..inputs.len()).collect();
    decode_with(cfg, mapper, frozen, inputs, &ident)
}

/// Baseline: every input is captioned from another input's prefix.
pub fn predict_shuffled(cfg: &RunConfig, mapper: &MappingNetwork, frozen: &Frozen, inputs: &[AudioInput]) -> Result<Vec<Prediction>> {
    let n = inputs.len();
    let mut perm: Vec<usize> = (0..n).collect();
    RngState::new(cfg.seed).derive(0x5B0F).shuffle(&mut perm);
    if n > 1 {
        // Rotate fixed points away so no input keeps its own prefix.
        for i in 0..n {
            if perm[i] == i {
                let j = (i + 1) % n;
                perm.swap(i, j);
            }
        }
    }
    decode_with(cfg, mapper, frozen, inputs, &perm)
}

pub fn references<'a>(records: impl IntoIterator<Item = (&'a str, &'a str)>) -> Vec<Reference> {
    records.into_iter().map(|(id, c)| Reference { id: id.into(), captions: vec![c.into()] }).collect()
}

pub fn score(preds: &[Prediction], refs: &[Reference]) -> Result<MetricReport> {
    Ok(evaluate_corpus(preds, refs, Smoothing::None)?)
}

pub fn predictions_jsonl(preds: &[Prediction]) -> String {
    preds.iter().map(|p| serde_json::to_string(p).expect("prediction serialises") + "\n").collect()
}
