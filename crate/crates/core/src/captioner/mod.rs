//! Prefix captioning on a frozen decoder language model.
//!
//! A mapping network turns one joint-space embedding into `k` prefix
//! vectors; the decoder reads the prefix followed by caption tokens and is
//! trained (mapper only) to predict the caption.

mod decode;
mod mapper;
mod train;

use serde::{Deserialize, Serialize};

use crate::corpus::{paraphrase_pool, style_names, stylize, Corpus, CorpusError, Split, Vocabulary, BOS, EOS, PAD};
use crate::numerics::layers::{LayerNorm, Linear, TransformerBlock};
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamStore, Real, RngState, Tensor, TrainLog, Trainer, Var};

pub use decode::{beam_search, greedy_decode, infer, DecoderState, Hypothesis, Inference};
pub use mapper::{MapperDims, MapperNet, MappingNetwork};
pub use train::{caption_batch_loss, caption_loss, train_captioner, CaptionConfig, CaptionExample, TrainMode};

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("sequence of {len} positions exceeds the decoder context of {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside decoder vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("empty caption")]
    EmptyCaption,
    #[error("empty training pool")]
    EmptyPool,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("beam width must be at least 1")]
    Beam,
    #[error("audio-text mode needs audio features for example {0}")]
    MissingFeatures(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Joint(#[from] crate::jointspace::JointError),
    #[error(transparent)]
    Bridge(#[from] crate::bridge::BridgeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

/// Graph builders and parameter handles of the decoder.
#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub dims: DecoderDims,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderLM {
    pub params: ParamStore,
    pub net: DecoderNet,
}

const EMBED_STD: f64 = 0.1;
const RESIDUAL_STD: f64 = 0.02;
const OUTPUT_STD: f64 = 0.01;

impl DecoderLM {
    pub fn new(dims: DecoderDims, seed: u64) -> Self {
        let mut rng = RngState::new(seed).derive(0xDEC0);
        let mut params = ParamStore::new();
        let tokens = params.add_normal("decoder.tokens", &[dims.vocab_size, dims.d_model], EMBED_STD, &mut rng);
        let positions = params.add_normal("decoder.positions", &[dims.max_len, dims.d_model], EMBED_STD, &mut rng);
        let blocks = (0..dims.n_layers)
            .map(|i| {
                let name = format!("decoder.block{i}");
                TransformerBlock::new(&mut params, &name, dims.d_model, dims.n_heads, dims.d_ff, true, RESIDUAL_STD, &mut rng)
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "decoder.ln_f", dims.d_model);
        let out = Linear::new(&mut params, "decoder.out", dims.d_model, dims.vocab_size, OUTPUT_STD, &mut rng);
        Self { params, net: DecoderNet { dims, tokens, positions, blocks, ln_f, out } }
    }

    pub fn dims(&self) -> DecoderDims {
        self.net.dims
    }

    pub fn token_embedding(&self, id: usize) -> &[f32] {
        self.params.value(self.net.tokens).row(id)
    }

    /// Logits `[len, V]` of one input sequence `[BOS, tokens...]` on the graph path.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor, CaptionError> {
        let ids: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
        self.net.check_ids(&ids)?;
        self.net.check_len(ids.len())?;
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.params, false);
        let x = g.embedding(p.get(self.net.tokens), &ids);
        let pos: Vec<usize> = (0..ids.len()).collect();
        let l = self.net.forward_inputs(&mut g, &p, x, &pos, ids.len());
        Ok(g.value(l).clone())
    }
}

impl DecoderNet {
    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<(), CaptionError> {
        match ids.iter().find(|&&i| i >= self.dims.vocab_size) {
            Some(&id) => Err(CaptionError::TokenOutOfRange { id, vocab: self.dims.vocab_size }),
            None => Ok(()),
        }
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<(), CaptionError> {
        if len > self.dims.max_len {
            return Err(CaptionError::TooLong { len, max: self.dims.max_len });
        }
        Ok(())
    }

    pub fn token_table(&self, p: &Bound) -> Var {
        p.get(self.tokens)
    }

    /// Logits `[rows, V]` for input vectors `x` `[rows, d_model]` holding
    /// `rows / seq` sequences; `pos` gives each row's position id.
    pub fn forward_inputs<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, pos: &[usize], seq: usize) -> Var {
        let pe = g.embedding(p.get(self.positions), pos);
        let mut h = g.add(x, pe);
        for b in &self.blocks {
            h = b.forward(g, p, h, seq);
        }
        let h = self.ln_f.forward(g, p, h);
        self.out.forward(g, p, h)
    }

    /// Next-token loss of `[BOS, c..]` -> `[c.., EOS]` for a padded batch,
    /// with per-example position offsets.
    pub fn lm_loss<T: Real>(&self, g: &mut Graph<T>, p: &Bound, seqs: &[Vec<usize>], offsets: &[usize]) -> Result<Var, CaptionError> {
        let len = seqs.iter().map(|s| s.len() + 1).max().ok_or(CaptionError::EmptyPool)?;
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut pos = Vec::with_capacity(seqs.len() * len);
        let mut targets = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for (s, &o) in seqs.iter().zip(offsets) {
            self.check_ids(s)?;
            self.check_len(o + len)?;
            for j in 0..len {
                ids.push(match j {
                    0 => BOS,
                    j if j <= s.len() => s[j - 1],
                    _ => PAD,
                });
                pos.push(o + j);
                targets.push(match j {
                    j if j < s.len() => s[j],
                    _ => EOS,
                });
                mask.push(j <= s.len());
            }
        }
        let x = g.embedding(p.get(self.tokens), &ids);
        let logits = self.forward_inputs(g, p, x, &pos, len);
        Ok(g.cross_entropy(logits, &targets, &mask)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

/// Trains the decoder as a next-token model on `pool`. Each sequence gets
/// a fresh random position offset every epoch so all positions a caption
/// can occupy behind a prefix are trained.
pub fn pretrain_decoder(dec: &mut DecoderLM, pool: &[Vec<usize>], cfg: &PretrainConfig) -> Result<TrainLog, CaptionError> {
    if pool.is_empty() || pool.iter().any(Vec::is_empty) {
        return Err(if pool.is_empty() { CaptionError::EmptyPool } else { CaptionError::EmptyCaption });
    }
    for s in pool {
        dec.net.check_ids(s)?;
        dec.net.check_len(s.len() + 1)?;
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let bs = cfg.batch_size.clamp(1, pool.len());
    let per_epoch = pool.len().div_ceil(bs);
    let total = per_epoch * cfg.epochs;
    let mut trainer = Trainer::new(cfg.lr, cfg.warmup_steps.min(total - 1), total)?;
    let mut rng = RngState::new(cfg.seed).derive(0x1A4D);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let max_len = dec.net.dims.max_len;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let lr = trainer.lr();
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| pool[i].clone()).collect();
            let len = seqs.iter().map(|s| s.len() + 1).max().expect("non-empty chunk");
            let offsets: Vec<usize> = seqs.iter().map(|_| rng.below(max_len - len + 1)).collect();
            let net = &dec.net;
            sum += trainer.step(&mut dec.params, |g, p| net.lm_loss(g, p, &seqs, &offsets))?;
        }
        log.push(epoch, sum / per_epoch as f64, lr);
    }
    Ok(log)
}

/// Per-token perplexity of `captions` (each followed by end-of-sequence),
/// read from position 0.
pub fn perplexity(dec: &DecoderLM, captions: &[Vec<usize>]) -> Result<f64, CaptionError> {
    if captions.is_empty() {
        return Err(CaptionError::EmptyPool);
    }
    let (mut nll, mut count) = (0f64, 0usize);
    for chunk in captions.chunks(64) {
        let mut g = Graph::<f32>::new();
        let p = g.bind(&dec.params, false);
        let offsets = vec![0; chunk.len()];
        let l = dec.net.lm_loss(&mut g, &p, chunk, &offsets)?;
        let tokens: usize = chunk.iter().map(|c| c.len() + 1).sum();
        nll += g.scalar(l) as f64 * tokens as f64;
        count += tokens;
    }
    Ok((nll / count as f64).exp())
}

/// Text the decoder is pretrained on, all drawn from training scenes:
/// every caption, its styled copies and its paraphrases, plus two-caption
/// sequences `[a, EOS, b]` where `b` repeats or paraphrases `a`. The pairs
/// teach the decoder to continue from what its context describes, which is
/// what a prefix has to exploit.
pub fn decoder_pool(corpus: &Corpus, vocab: &Vocabulary, seed: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
    let mut pool = Vec::new();
    let mut by_id = std::collections::HashMap::new();
    for r in corpus.split(Split::Train) {
        let c = vocab.encode(&r.caption)?;
        for s in 0..style_names().len() {
            pool.push(vocab.encode(&stylize(&r.caption, s)?)?);
        }
        pool.push([c.as_slice(), &[EOS], &c].concat());
        pool.push(c.clone());
        by_id.insert(r.id.clone(), c);
    }
    for r in paraphrase_pool(corpus, seed) {
        let p = vocab.encode(&r.caption)?;
        let source = r.id.rsplit_once('-').and_then(|(id, _)| by_id.get(id));
        if let Some(c) = source {
            pool.push([c.as_slice(), &[EOS], &p].concat());
        }
        pool.push(p);
    }
    Ok(pool)
}

#[cfg(test)]
mod tests;
