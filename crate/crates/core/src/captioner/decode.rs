//! Incremental decoding with a key/value cache, greedy and beam search.

use std::cmp::Ordering;

use super::{CaptionError, DecoderLM, MappingNetwork};
use crate::corpus::{Vocabulary, EOS};
use crate::jointspace::DualEncoder;
use crate::numerics::layers::TransformerBlock;
use crate::numerics::{softmax_row_in_place, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Cached keys and values of every layer for the positions fed so far.
#[derive(Clone, Debug)]
pub struct DecoderState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Same arithmetic as the graph op in f32.
fn gelu(x: f32) -> f32 {
    let u = GELU_C as f32 * (x + GELU_A as f32 * x * x * x);
    let t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
    0.5 * x * (1.0 + t)
}

impl DecoderLM {
    pub fn start(&self) -> DecoderState {
        let n = self.net.blocks.len();
        DecoderState { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds one input vector at the next position; returns the logits there.
    pub fn step(&self, st: &mut DecoderState, input: &[f32]) -> Result<Vec<f32>, CaptionError> {
        let d = self.net.dims.d_model;
        if input.len() != d {
            return Err(CaptionError::Dim { expected: d, got: input.len() });
        }
        self.net.check_len(st.len + 1)?;
        let pos = self.params.value(self.net.positions).row(st.len);
        let mut x: Vec<f32> = input.iter().zip(pos).map(|(a, b)| a + b).collect();
        for (l, b) in self.net.blocks.iter().enumerate() {
            self.block_step(b, &mut st.keys[l], &mut st.values[l], st.len + 1, &mut x);
        }
        st.len += 1;
        let mut h = vec![0f32; d];
        self.net.ln_f.apply_row(&self.params, &x, &mut h);
        let mut logits = vec![0f32; self.net.dims.vocab_size];
        self.net.out.apply_row(&self.params, &h, &mut logits);
        Ok(logits)
    }

    fn block_step(&self, b: &TransformerBlock, keys: &mut Vec<f32>, values: &mut Vec<f32>, t: usize, x: &mut [f32]) {
        let d = x.len();
        let p = &self.params;
        let mut h = vec![0f32; d];
        b.ln1.apply_row(p, x, &mut h);
        let (mut q, mut k, mut v) = (vec![0f32; d], vec![0f32; d], vec![0f32; d]);
        b.wq.apply_row(p, &h, &mut q);
        b.wk.apply_row(p, &h, &mut k);
        b.wv.apply_row(p, &h, &mut v);
        keys.extend_from_slice(&k);
        values.extend_from_slice(&v);
        let dh = d / b.heads;
        let scale = (1.0 / (dh as f64).sqrt()) as f32;
        let mut att = vec![0f32; d];
        let mut scores = vec![0f32; t];
        for hd in 0..b.heads {
            let off = hd * dh;
            for (s, score) in scores.iter_mut().enumerate() {
                let kr = &keys[s * d + off..s * d + off + dh];
                let dot: f32 = q[off..off + dh].iter().zip(kr).map(|(a, b)| a * b).sum();
                *score = dot * scale;
            }
            softmax_row_in_place(&mut scores);
            for (s, &w) in scores.iter().enumerate() {
                let vr = &values[s * d + off..s * d + off + dh];
                for (a, &vv) in att[off..off + dh].iter_mut().zip(vr) {
                    *a += w * vv;
                }
            }
        }
        let mut o = vec![0f32; d];
        b.wo.apply_row(p, &att, &mut o);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        b.ln2.apply_row(p, x, &mut h);
        let mut up = vec![0f32; b.ff1.d_out];
        b.ff1.apply_row(p, &h, &mut up);
        up.iter_mut().for_each(|u| *u = gelu(*u));
        b.ff2.apply_row(p, &up, &mut o);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
    }

    /// Feeds all prefix rows; returns the state and the logits after the last one.
    pub fn start_with_prefix(&self, prefix: &Tensor) -> Result<(DecoderState, Vec<f32>), CaptionError> {
        let mut st = self.start();
        let mut logits = Vec::new();
        for i in 0..prefix.rows() {
            logits = self.step(&mut st, prefix.row(i))?;
        }
        if logits.is_empty() {
            return Err(CaptionError::Dim { expected: self.net.dims.d_model, got: 0 });
        }
        Ok((st, logits))
    }
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = m + logits.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// A decoded sequence. `tokens` ends with end-of-sequence unless the length
/// limit cut it off.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Tokens without the end-of-sequence marker.
    pub fn caption_tokens(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Higher score first; ties go to the lexicographically lower sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Longest caption (including end-of-sequence) that fits behind `prefix_len` rows.
fn clamp_len(dec: &DecoderLM, prefix_len: usize, max_len: usize) -> usize {
    max_len.min(dec.net.dims.max_len.saturating_sub(prefix_len) + 1)
}

/// Beam search without length normalisation. A hypothesis completes when it
/// emits end-of-sequence or reaches `max_len` tokens. Returns completed
/// hypotheses ranked by total log-probability.
pub fn beam_search(dec: &DecoderLM, prefix: &Tensor, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>, CaptionError> {
    if beam == 0 {
        return Err(CaptionError::Beam);
    }
    let max_len = clamp_len(dec, prefix.rows(), max_len);
    let (st, logits) = dec.start_with_prefix(prefix)?;
    let mut live: Vec<(Hypothesis, DecoderState, Vec<f64>)> =
        vec![(Hypothesis { tokens: Vec::new(), log_prob: 0.0 }, st, log_softmax(&logits))];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(Hypothesis, usize)> = Vec::new();
        for (i, (h, _, lp)) in live.iter().enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                cands.push((Hypothesis { tokens, log_prob: h.log_prob + l }, i));
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0));
        cands.truncate(beam);
        let mut next = Vec::new();
        for (h, parent) in cands {
            if h.tokens.last() == Some(&EOS) || h.tokens.len() == max_len {
                done.push(h);
                continue;
            }
            let mut st = live[parent].1.clone();
            let last = *h.tokens.last().expect("non-empty");
            let logits = dec.step(&mut st, dec.token_embedding(last))?;
            next.push((h, st, log_softmax(&logits)));
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.sort_by(rank);
    Ok(done)
}

/// Argmax decoding (lowest id on ties) until end-of-sequence or `max_len` tokens.
pub fn greedy_decode(dec: &DecoderLM, prefix: &Tensor, max_len: usize) -> Result<Hypothesis, CaptionError> {
    let max_len = clamp_len(dec, prefix.rows(), max_len);
    let (mut st, mut logits) = dec.start_with_prefix(prefix)?;
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0 };
    while h.tokens.len() < max_len {
        let lp = log_softmax(&logits);
        let (best, l) = lp.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        h.tokens.push(best);
        h.log_prob += l;
        if best == EOS || h.tokens.len() == max_len {
            break;
        }
        logits = dec.step(&mut st, dec.token_embedding(best))?;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub caption: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Captions audio features: the audio encoder replaces the text encoder,
/// with no noise and no adapter.
pub fn infer(
    mapper: &MappingNetwork,
    dec: &DecoderLM,
    enc: &DualEncoder,
    vocab: &Vocabulary,
    features: &[f32],
    beam: usize,
    max_len: usize,
) -> Result<Inference, CaptionError> {
    if beam == 0 {
        return Err(CaptionError::Beam);
    }
    let e = enc.encode_audio(features)?;
    let prefix = mapper.build_prefix(&e)?;
    let best = beam_search(dec, &prefix, beam, max_len)?.into_iter().next().expect("at least one hypothesis");
    let tokens = best.caption_tokens().to_vec();
    Ok(Inference { caption: vocab.decode(&tokens), tokens, log_prob: best.log_prob })
}
