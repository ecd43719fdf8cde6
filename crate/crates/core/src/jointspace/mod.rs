//! Dual encoder trained with a symmetric contrastive loss.
//!
//! The text branch mean-pools token embeddings and passes them through a
//! two-layer MLP; the audio branch is a two-layer MLP over raw feature
//! vectors. Both outputs are L2-normalised into the joint space.

use serde::{Deserialize, Serialize};

use crate::numerics::layers::Linear;
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamStore, Real, RngState, Tensor, TrainLog, Trainer, Var};

#[derive(Debug, thiserror::Error)]
pub enum JointError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside text vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("expected {expected} audio features, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("non-finite audio features")]
    NonFinite,
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("text and audio batches differ in size ({0} vs {1})")]
    Mismatch(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub vocab_size: usize,
    /// Token-embedding width.
    pub d_h: usize,
    pub d_a: usize,
    /// Joint-space dimension.
    pub d: usize,
    pub hidden: usize,
}

const INIT_LOG_TEMPERATURE: f64 = 2.659_260_036_932_778_4; // ln(1 / 0.07)
const BIAS_INIT_STD: f64 = 0.1;
const MAX_LOG_TEMPERATURE: f32 = 4.605_170_2; // ln(100)

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub params: ParamStore,
    pub net: EncoderNet,
}

/// Parameter handles and graph builders of the dual encoder.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub dims: EncoderDims,
    token_table: ParamId,
    text_l1: Linear,
    text_l2: Linear,
    audio_l1: Linear,
    audio_l2: Linear,
    log_temperature: ParamId,
}

/// One aligned (audio features, caption tokens) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub features: Vec<f32>,
    pub tokens: Vec<usize>,
}

impl DualEncoder {
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = RngState::new(seed).derive(0x4A53);
        let mut params = ParamStore::new();
        let token_table = params.add_normal("text.tokens", &[dims.vocab_size, dims.d_h], 1.0, &mut rng);
        let text_l1 = Linear::fan_in(&mut params, "text.mlp.0", dims.d_h, dims.hidden, &mut rng);
        let text_l2 = Linear::fan_in(&mut params, "text.mlp.1", dims.hidden, dims.d, &mut rng);
        let audio_l1 = Linear::fan_in(&mut params, "audio.mlp.0", dims.d_a, dims.hidden, &mut rng);
        let audio_l2 = Linear::fan_in(&mut params, "audio.mlp.1", dims.hidden, dims.d, &mut rng);
        let log_temperature = params.add_filled("log_temperature", &[1], INIT_LOG_TEMPERATURE as f32);
        // Non-zero biases keep the zero input off the origin.
        for l in [&text_l1, &text_l2, &audio_l1, &audio_l2] {
            for b in params.get_mut(l.b).value.data_mut() {
                *b = (BIAS_INIT_STD * rng.normal()) as f32;
            }
        }
        let net = EncoderNet { dims, token_table, text_l1, text_l2, audio_l1, audio_l2, log_temperature };
        Self { params, net }
    }

    pub fn dims(&self) -> EncoderDims {
        self.net.dims
    }

    pub fn log_temperature(&self) -> f32 {
        self.params.value(self.net.log_temperature).data()[0]
    }

    pub fn encode_texts(&self, seqs: &[Vec<usize>]) -> Result<Tensor, JointError> {
        self.net.check_tokens(seqs)?;
        if seqs.is_empty() {
            return Err(JointError::TooFewPairs { need: 1, got: 0 });
        }
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.params, false);
        let out = self.net.text_forward(&mut g, &p, seqs);
        Ok(g.value(out).clone())
    }

    pub fn encode_audios(&self, feats: &[&[f32]]) -> Result<Tensor, JointError> {
        if feats.is_empty() {
            return Err(JointError::TooFewPairs { need: 1, got: 0 });
        }
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.params, false);
        let x = self.net.feature_input(&mut g, feats)?;
        let out = self.net.audio_forward(&mut g, &p, x);
        Ok(g.value(out).clone())
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Vec<f32>, JointError> {
        Ok(self.encode_texts(&[tokens.to_vec()])?.into_data())
    }

    pub fn encode_audio(&self, features: &[f32]) -> Result<Vec<f32>, JointError> {
        Ok(self.encode_audios(&[features])?.into_data())
    }

    /// Loss value of one batch, no gradients.
    pub fn contrastive_loss(&self, batch: &[PairedExample]) -> Result<f64, JointError> {
        let feats: Vec<&[f32]> = batch.iter().map(|e| e.features.as_slice()).collect();
        let seqs: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
        let mut g = Graph::<f64>::new();
        let p = g.bind(&self.params, false);
        let l = self.net.contrastive_forward(&mut g, &p, &feats, &seqs)?;
        Ok(g.scalar(l))
    }
}

impl EncoderNet {
    fn check_tokens(&self, seqs: &[Vec<usize>]) -> Result<(), JointError> {
        for s in seqs {
            if s.is_empty() {
                return Err(JointError::EmptySequence);
            }
            if let Some(&id) = s.iter().find(|&&id| id >= self.dims.vocab_size) {
                return Err(JointError::TokenOutOfRange { id, vocab: self.dims.vocab_size });
            }
        }
        Ok(())
    }

    fn check_features(&self, f: &[f32]) -> Result<(), JointError> {
        if f.len() != self.dims.d_a {
            return Err(JointError::FeatureDim { expected: self.dims.d_a, got: f.len() });
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(JointError::NonFinite);
        }
        Ok(())
    }

    /// Text embeddings `[n, d]` on the graph. Inputs must be validated.
    pub fn text_forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, seqs: &[Vec<usize>]) -> Var {
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            segments.push((start, s.len()));
            start += s.len();
        }
        let e = g.embedding(p.get(self.token_table), &flat);
        let pooled = g.segment_mean(e, &segments);
        let h = self.text_l1.forward(g, p, pooled);
        let h = g.gelu(h);
        let h = self.text_l2.forward(g, p, h);
        g.l2_normalize_rows(h)
    }

    /// Audio embeddings `[n, d]` on the graph from a `[n, d_a]` feature input.
    pub fn audio_forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Var {
        let h = self.audio_l1.forward(g, p, features);
        let h = g.gelu(h);
        let h = self.audio_l2.forward(g, p, h);
        g.l2_normalize_rows(h)
    }

    fn feature_input<T: Real>(&self, g: &mut Graph<T>, feats: &[&[f32]]) -> Result<Var, JointError> {
        let mut data = Vec::with_capacity(feats.len() * self.dims.d_a);
        for f in feats {
            self.check_features(f)?;
            data.extend(f.iter().map(|&x| T::of(x as f64)));
        }
        Ok(g.input(Tensor::new(&[feats.len(), self.dims.d_a], data)?))
    }

    /// Symmetric InfoNCE loss of a batch on the graph.
    pub fn contrastive_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feats: &[&[f32]],
        seqs: &[Vec<usize>],
    ) -> Result<Var, JointError> {
        if feats.len() != seqs.len() {
            return Err(JointError::Mismatch(seqs.len(), feats.len()));
        }
        if feats.len() < 2 {
            return Err(JointError::TooFewPairs { need: 2, got: feats.len() });
        }
        self.check_tokens(seqs)?;
        let x = self.feature_input(g, feats)?;
        let a = self.audio_forward(g, p, x);
        let t = self.text_forward(g, p, seqs);
        Ok(info_nce(g, a, t, p.get(self.log_temperature))?)
    }
}

/// `0.5 * (CE(S) + CE(S^T))` with `S = exp(log_t) * a t^T` and diagonal targets.
pub fn info_nce<T: Real>(g: &mut Graph<T>, a: Var, t: Var, log_t: Var) -> Result<Var, NumericsError> {
    let n = g.value(a).rows();
    let s = g.matmul_nt(a, t);
    let scale = g.exp(log_t);
    let s = g.mul_scalar(s, scale);
    let st = g.transpose(s);
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n];
    let l1 = g.cross_entropy(s, &targets, &mask)?;
    let l2 = g.cross_entropy(st, &targets, &mask)?;
    let sum = g.add(l1, l2);
    Ok(g.scale(sum, 0.5))
}

/// Contrastive loss of fixed embeddings `[n, d]` at a given log temperature.
pub fn info_nce_loss(audio: &Tensor<f64>, text: &Tensor<f64>, log_temperature: f64) -> Result<f64, JointError> {
    if audio.shape() != text.shape() {
        return Err(JointError::Mismatch(text.rows(), audio.rows()));
    }
    if audio.rows() < 2 {
        return Err(JointError::TooFewPairs { need: 2, got: audio.rows() });
    }
    let mut g = Graph::<f64>::new();
    let a = g.input(audio.clone());
    let t = g.input(text.clone());
    let lt = g.input(Tensor::scalar(log_temperature));
    let l = info_nce(&mut g, a, t, lt)?;
    Ok(g.scalar(l))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

/// Trains `enc` in place on `pairs`. Batches are reshuffled every epoch; a
/// trailing batch smaller than two pairs is dropped.
pub fn train_jointspace(enc: &mut DualEncoder, pairs: &[PairedExample], cfg: &JointConfig) -> Result<TrainLog, JointError> {
    if pairs.len() < 2 {
        return Err(JointError::TooFewPairs { need: 2, got: pairs.len() });
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let bs = cfg.batch_size.clamp(2, pairs.len());
    let per_epoch = pairs.len() / bs + usize::from(pairs.len() % bs >= 2);
    let total = per_epoch * cfg.epochs;
    let mut trainer = Trainer::new(cfg.lr, cfg.warmup_steps.min(total - 1), total)?;
    let mut rng = RngState::new(cfg.seed).derive(0x5348);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
            let feats: Vec<&[f32]> = chunk.iter().map(|&i| pairs[i].features.as_slice()).collect();
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| pairs[i].tokens.clone()).collect();
            let lr = trainer.lr();
            let net = &enc.net;
            sum += trainer.step(&mut enc.params, |g, p| net.contrastive_forward(g, p, &feats, &seqs))?;
            let lt = enc.net.log_temperature;
            let v = &mut enc.params.get_mut(lt).value.data_mut()[0];
            *v = v.clamp(0.0, MAX_LOG_TEMPERATURE);
            batches += 1;
            if batches == per_epoch {
                log.push(epoch, sum / batches as f64, lr);
            }
        }
    }
    Ok(log)
}

/// Modality-gap summary of matched audio/text embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub centroid_distance: f64,
    pub mean_pair_linf: f64,
    pub mean_pair_cosine: f64,
}

impl GapStats {
    /// From row-aligned `[n, d]` embedding matrices.
    pub fn from_embeddings(audio: &Tensor, text: &Tensor) -> Result<Self, JointError> {
        if audio.shape() != text.shape() {
            return Err(JointError::Mismatch(text.rows(), audio.rows()));
        }
        let (n, d) = (audio.rows(), audio.cols());
        let mut centroid = vec![0f64; d];
        let (mut linf, mut cos) = (0f64, 0f64);
        for i in 0..n {
            let (a, t) = (audio.row(i), text.row(i));
            let mut m = 0f64;
            let (mut dot, mut na, mut nt) = (0f64, 0f64, 0f64);
            for j in 0..d {
                let (x, y) = (a[j] as f64, t[j] as f64);
                centroid[j] += x - y;
                m = m.max((x - y).abs());
                dot += x * y;
                na += x * x;
                nt += y * y;
            }
            linf += m;
            cos += dot / (na.sqrt() * nt.sqrt()).max(1e-12);
        }
        let centroid_distance = centroid.iter().map(|c| (c / n as f64).powi(2)).sum::<f64>().sqrt();
        Ok(Self { centroid_distance, mean_pair_linf: linf / n as f64, mean_pair_cosine: cos / n as f64 })
    }
}

pub fn gap_stats(enc: &DualEncoder, pairs: &[PairedExample]) -> Result<GapStats, JointError> {
    if pairs.is_empty() {
        return Err(JointError::TooFewPairs { need: 1, got: 0 });
    }
    let (a, t) = embed_pairs(enc, pairs)?;
    GapStats::from_embeddings(&a, &t)
}

/// Audio and text embeddings of `pairs`, row-aligned.
pub fn embed_pairs(enc: &DualEncoder, pairs: &[PairedExample]) -> Result<(Tensor, Tensor), JointError> {
    let feats: Vec<&[f32]> = pairs.iter().map(|e| e.features.as_slice()).collect();
    let seqs: Vec<Vec<usize>> = pairs.iter().map(|e| e.tokens.clone()).collect();
    Ok((enc.encode_audios(&feats)?, enc.encode_texts(&seqs)?))
}

/// Audio-to-text recall@1 over `pairs`. A retrieved caption whose tokens
/// equal the ground truth counts as a hit, since identical captions have
/// identical embeddings and cannot be told apart.
pub fn recall_at_1(enc: &DualEncoder, pairs: &[PairedExample]) -> Result<f64, JointError> {
    if pairs.is_empty() {
        return Err(JointError::TooFewPairs { need: 1, got: 0 });
    }
    let (a, t) = embed_pairs(enc, pairs)?;
    let mut hits = 0;
    for i in 0..pairs.len() {
        let ai = a.row(i);
        let best = (0..pairs.len())
            .map(|j| (t.row(j).iter().zip(ai).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>(), j))
            .fold((f64::NEG_INFINITY, 0), |acc, c| if c.0 > acc.0 { c } else { acc })
            .1;
        if pairs[best].tokens == pairs[i].tokens {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}
