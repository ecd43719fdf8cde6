//! Closing the modality gap: Gaussian noise on text embeddings, the
//! sampled infinity-norm noise estimator, and a linear text-to-audio adapter.

use serde::{Deserialize, Serialize};

use crate::numerics::layers::Linear;
use crate::numerics::{Bound, Graph, NumericsError, ParamStore, Real, RngState, Tensor, TrainLog, Trainer, Var};

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("noise std must be finite and non-negative, got {0}")]
    NoiseStd(f64),
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub std: f64,
}

impl NoiseConfig {
    pub fn new(std: f64) -> Result<Self, BridgeError> {
        if !std.is_finite() || std < 0.0 {
            return Err(BridgeError::NoiseStd(std));
        }
        Ok(Self { std })
    }
}

/// `v + mu` with `mu ~ N(0, std^2 I)`. The result is not renormalised.
pub fn inject_noise(v: &[f32], cfg: NoiseConfig, rng: &mut RngState) -> Vec<f32> {
    if cfg.std == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 + cfg.std * rng.normal()) as f32).collect()
}

/// Mean `||a_i - t_i||_inf` over the given row indices.
pub fn mean_linf_at(audio: &Tensor, text: &Tensor, idx: &[usize]) -> Result<f64, BridgeError> {
    if audio.shape() != text.shape() {
        return Err(BridgeError::Dim { expected: audio.cols(), got: text.cols() });
    }
    if idx.is_empty() {
        return Err(BridgeError::TooFewPairs { need: 1, got: 0 });
    }
    let total: f64 =
        idx.iter().map(|&i| audio.row(i).iter().zip(text.row(i)).map(|(a, t)| (*a as f64 - *t as f64).abs()).fold(0.0, f64::max)).sum();
    Ok(total / idx.len() as f64)
}

/// Noise scale estimate: mean infinity-norm gap over `n` pairs drawn
/// without replacement.
pub fn estimate_noise_std(audio: &Tensor, text: &Tensor, n: usize, rng: &mut RngState) -> Result<f64, BridgeError> {
    let have = audio.rows().min(text.rows());
    if n == 0 || have < n {
        return Err(BridgeError::TooFewPairs { need: n.max(1), got: have });
    }
    let idx = rng.sample_indices(audio.rows(), n);
    mean_linf_at(audio, text, &idx)
}

/// Affine map `h(x) = x W + b` on the joint space, initialised at identity.
#[derive(Clone, Debug)]
pub struct LinearAdapter {
    pub params: ParamStore,
    pub layer: Linear,
}

impl LinearAdapter {
    pub fn identity(d: usize) -> Self {
        let mut params = ParamStore::new();
        let mut eye = vec![0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let w = params.add("adapter.weight", Tensor::new(&[d, d], eye).expect("square"));
        let b = params.add_filled("adapter.bias", &[d], 0.0);
        Self { params, layer: Linear { w, b, d_in: d, d_out: d } }
    }

    pub fn dim(&self) -> usize {
        self.layer.d_in
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        self.layer.forward(g, p, x)
    }

    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>, BridgeError> {
        if v.len() != self.dim() {
            return Err(BridgeError::Dim { expected: self.dim(), got: v.len() });
        }
        let mut out = vec![0f32; self.dim()];
        self.layer.apply_row(&self.params, v, &mut out);
        Ok(out)
    }

    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor, BridgeError> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            out.extend(self.apply(x.row(i))?);
        }
        Ok(Tensor::new(x.shape(), out)?)
    }
}

/// Mean over all elements of `(a - b)^2`.
pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterFit {
    /// MSE of the trained adapter over all training pairs.
    pub final_mse: f64,
    pub log: TrainLog,
}

/// Fits `adapter` so that `h(text_i) ~ audio_i` under MSE.
pub fn train_adapter(adapter: &mut LinearAdapter, text: &Tensor, audio: &Tensor, cfg: &AdapterConfig) -> Result<AdapterFit, BridgeError> {
    if text.shape() != audio.shape() {
        return Err(BridgeError::Dim { expected: text.cols(), got: audio.cols() });
    }
    if text.cols() != adapter.dim() {
        return Err(BridgeError::Dim { expected: adapter.dim(), got: text.cols() });
    }
    let n = text.rows();
    let mut log = TrainLog::default();
    if cfg.epochs > 0 {
        let bs = cfg.batch_size.clamp(1, n);
        let per_epoch = n.div_ceil(bs);
        let total = per_epoch * cfg.epochs;
        let mut trainer = Trainer::new(cfg.lr, (total / 20).min(total - 1), total)?;
        let mut rng = RngState::new(cfg.seed).derive(0xADA9);
        let mut order: Vec<usize> = (0..n).collect();
        let d = adapter.dim();
        let layer = &adapter.layer;
        for epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let lr = trainer.lr();
            let mut sum = 0.0;
            for chunk in order.chunks(bs) {
                let x: Vec<f32> = chunk.iter().flat_map(|&i| text.row(i).iter().copied()).collect();
                let y: Vec<f32> = chunk.iter().flat_map(|&i| audio.row(i).iter().copied()).collect();
                sum += trainer.step(&mut adapter.params, |g, p| -> Result<Var, NumericsError> {
                    let xv = g.input(Tensor::new(&[chunk.len(), d], x)?);
                    let yv = g.input(Tensor::new(&[chunk.len(), d], y)?);
                    let h = layer.forward(g, p, xv);
                    Ok(g.mse(h, yv))
                })?;
            }
            log.push(epoch, sum / per_epoch as f64, lr);
        }
    }
    let final_mse = mse(&adapter.apply_rows(text)?, audio);
    Ok(AdapterFit { final_mse, log })
}

/// Adapter first, then noise. Identity when both are absent.
pub fn apply_bridge(
    v: &[f32],
    adapter: Option<&LinearAdapter>,
    noise: Option<NoiseConfig>,
    rng: &mut RngState,
) -> Result<Vec<f32>, BridgeError> {
    let v = match adapter {
        Some(a) => a.apply(v)?,
        None => v.to_vec(),
    };
    Ok(match noise {
        Some(cfg) => inject_noise(&v, cfg, rng),
        None => v,
    })
}

#[cfg(test)]
mod tests;
