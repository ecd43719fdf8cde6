use serde::{Deserialize, Serialize};

use super::{CaptionError, DecoderLM, DecoderNet, MapperNet, MappingNetwork};
use crate::bridge::{inject_noise, LinearAdapter, NoiseConfig};
use crate::corpus::{EOS, PAD};
use crate::jointspace::DualEncoder;
use crate::numerics::{Bound, Graph, Real, RngState, Tensor, TrainLog, Trainer, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Condition on the text embedding of `text`; audio is never read.
    TextOnly,
    /// Condition on the audio embedding of `features`.
    AudioText,
}

/// One (input text, target caption) pair; `features` is only read in
/// audio-text mode.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionExample {
    pub text: Vec<usize>,
    pub target: Vec<usize>,
    pub features: Option<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

/// Mean caption-token NLL for prefixes `[n * k, d_model]` followed by the
/// padded target captions. Row `k - 1 + j` of each sequence predicts caption
/// token `j`; the last real row predicts end-of-sequence.
pub fn prefix_caption_loss<T: Real>(
    g: &mut Graph<T>,
    dec: &DecoderNet,
    pd: &Bound,
    prefix: Var,
    k: usize,
    targets: &[Vec<usize>],
) -> Result<Var, CaptionError> {
    let n = targets.len();
    if targets.iter().any(Vec::is_empty) {
        return Err(CaptionError::EmptyCaption);
    }
    let lc = targets.iter().map(Vec::len).max().ok_or(CaptionError::EmptyPool)?;
    let seq = k + lc;
    dec.check_len(seq)?;
    let mut ids = Vec::with_capacity(n * lc);
    for t in targets {
        dec.check_ids(t)?;
        ids.extend(t.iter().copied().chain(std::iter::repeat_n(PAD, lc - t.len())));
    }
    let tok = g.embedding(dec.token_table(pd), &ids);
    let both = g.concat_rows(&[prefix, tok]);
    let idx: Vec<usize> = (0..n).flat_map(|i| (i * k..(i + 1) * k).chain(n * k + i * lc..n * k + (i + 1) * lc)).collect();
    let x = g.gather_rows(both, &idx);
    let pos: Vec<usize> = (0..n).flat_map(|_| 0..seq).collect();
    let logits = dec.forward_inputs(g, pd, x, &pos, seq);
    let mut tg = vec![0usize; n * seq];
    let mut mask = vec![false; n * seq];
    for (i, t) in targets.iter().enumerate() {
        for j in 0..=t.len() {
            let r = i * seq + k - 1 + j;
            tg[r] = if j < t.len() { t[j] } else { EOS };
            mask[r] = true;
        }
    }
    Ok(g.cross_entropy(logits, &tg, &mask)?)
}

/// Mapper forward on embeddings `emb` `[n, d]`, then [`prefix_caption_loss`].
pub fn caption_batch_loss<T: Real>(
    g: &mut Graph<T>,
    mapper: &MapperNet,
    pm: &Bound,
    dec: &DecoderNet,
    pd: &Bound,
    emb: Var,
    targets: &[Vec<usize>],
) -> Result<Var, CaptionError> {
    let prefix = mapper.forward(g, pm, emb);
    prefix_caption_loss(g, dec, pd, prefix, mapper.dims.prefix_len, targets)
}

/// Loss of one caption behind a fixed prefix `[k, d_model]`.
pub fn caption_loss(dec: &DecoderLM, prefix: &Tensor, caption: &[usize]) -> Result<f64, CaptionError> {
    if prefix.cols() != dec.net.dims.d_model {
        return Err(CaptionError::Dim { expected: dec.net.dims.d_model, got: prefix.cols() });
    }
    let mut g = Graph::<f64>::new();
    let pd = g.bind(&dec.params, false);
    let pv = g.input(prefix.cast());
    let l = prefix_caption_loss(&mut g, &dec.net, &pd, pv, prefix.rows(), &[caption.to_vec()])?;
    Ok(g.scalar(l))
}

/// Conditioning embeddings for every example, before any noise.
fn base_embeddings(
    mode: TrainMode,
    enc: &DualEncoder,
    adapter: Option<&LinearAdapter>,
    data: &[CaptionExample],
) -> Result<Tensor, CaptionError> {
    match mode {
        TrainMode::TextOnly => {
            let texts: Vec<Vec<usize>> = data.iter().map(|e| e.text.clone()).collect();
            let e = enc.encode_texts(&texts)?;
            Ok(match adapter {
                Some(a) => a.apply_rows(&e)?,
                None => e,
            })
        }
        TrainMode::AudioText => {
            let feats = data
                .iter()
                .enumerate()
                .map(|(i, e)| e.features.as_deref().ok_or(CaptionError::MissingFeatures(i)))
                .collect::<Result<Vec<&[f32]>, _>>()?;
            Ok(enc.encode_audios(&feats)?)
        }
    }
}

/// Trains only the mapper. The decoder and the encoder are read-only.
///
/// In text-only mode the adapter (if any) and then fresh Gaussian noise
/// (if any) are applied to each text embedding every epoch. Audio-text mode
/// uses the audio embeddings as they are.
#[allow(clippy::too_many_arguments)]
pub fn train_captioner(
    mode: TrainMode,
    mapper: &mut MappingNetwork,
    dec: &DecoderLM,
    enc: &DualEncoder,
    adapter: Option<&LinearAdapter>,
    noise: Option<NoiseConfig>,
    data: &[CaptionExample],
    cfg: &CaptionConfig,
) -> Result<TrainLog, CaptionError> {
    if data.is_empty() {
        return Err(CaptionError::EmptyPool);
    }
    let d = mapper.net.dims.d_in;
    if enc.dims().d != d {
        return Err(CaptionError::Dim { expected: d, got: enc.dims().d });
    }
    let base = base_embeddings(mode, enc, adapter, data)?;
    let noise = if mode == TrainMode::TextOnly { noise.filter(|n| n.std > 0.0) } else { None };
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let bs = cfg.batch_size.clamp(1, data.len());
    let per_epoch = data.len().div_ceil(bs);
    let total = per_epoch * cfg.epochs;
    let mut trainer = Trainer::new(cfg.lr, cfg.warmup_steps.min(total - 1), total)?;
    let root = RngState::new(cfg.seed);
    let mut order_rng = root.derive(0x0DE5);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut noise_rng = root.derive(0x4E00_0000 + epoch as u64);
        let lr = trainer.lr();
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let mut emb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                match noise {
                    Some(cfg) => emb.extend(inject_noise(base.row(i), cfg, &mut noise_rng)),
                    None => emb.extend_from_slice(base.row(i)),
                }
            }
            let targets: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].target.clone()).collect();
            let net = &mapper.net;
            sum += trainer.step(&mut mapper.params, |g, pm| {
                let pd = g.bind(&dec.params, false);
                let e = g.input(Tensor::new(&[chunk.len(), d], emb)?);
                caption_batch_loss(g, net, pm, &dec.net, &pd, e, &targets)
            })?;
        }
        log.push(epoch, sum / per_epoch as f64, lr);
    }
    Ok(log)
}
