//! Parameterised building blocks shared by the encoders, decoder and mapper.

use super::{Bound, Graph, ParamId, ParamStore, Real, RngState, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut RngState) -> Self {
        let w = store.add_normal(format!("{name}.weight"), &[d_in, d_out], std, rng);
        let b = store.add_filled(format!("{name}.bias"), &[d_out], 0.0);
        Self { w, b, d_in, d_out }
    }

    /// Fan-in scaled initialisation.
    pub fn fan_in(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut RngState) -> Self {
        Self::new(store, name, d_in, d_out, (1.0 / d_in as f64).sqrt(), rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.get(self.w));
        g.add_row(y, p.get(self.b))
    }

    /// `x W + b` for one row, straight from stored values.
    pub fn apply_row(&self, store: &ParamStore, x: &[f32], out: &mut [f32]) {
        let w = store.value(self.w).data();
        out.copy_from_slice(store.value(self.b).data());
        f32::gemm(1, self.d_in, self.d_out, x, self.d_in as isize, 1, w, self.d_out as isize, 1, 1.0, out, self.d_out as isize, 1);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add_filled(format!("{name}.gamma"), &[d], 1.0);
        let beta = store.add_filled(format!("{name}.beta"), &[d], 0.0);
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta))
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f32], out: &mut [f32]) {
        let (gam, bet) = (store.value(self.gamma).data(), store.value(self.beta).data());
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        for j in 0..x.len() {
            // Same rounding path as the graph op: normalise in f64, store f32, then affine.
            let h = ((x[j] as f64 - mean) * r) as f32;
            out[j] = (h as f64 * gam[j] as f64 + bet[j] as f64) as f32;
        }
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        causal: bool,
        residual_std: f64,
        rng: &mut RngState,
    ) -> Self {
        assert!(d.is_multiple_of(heads), "model width {d} not divisible by {heads} heads");
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            wq: Linear::fan_in(store, &format!("{name}.attn.q"), d, d, rng),
            wk: Linear::fan_in(store, &format!("{name}.attn.k"), d, d, rng),
            wv: Linear::fan_in(store, &format!("{name}.attn.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.attn.out"), d, d, residual_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::fan_in(store, &format!("{name}.ff.up"), d, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff.down"), ff, d, residual_std, rng),
            heads,
            causal,
        }
    }

    /// `x` holds `rows / seq` stacked sequences of length `seq`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, seq: usize) -> Var {
        let h = self.ln1.forward(g, p, x);
        let q = self.wq.forward(g, p, h);
        let k = self.wk.forward(g, p, h);
        let v = self.wv.forward(g, p, h);
        let a = g.attention(q, k, v, self.heads, seq, self.causal);
        let a = self.wo.forward(g, p, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, p, x);
        let h = self.ff1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, p, h);
        g.add(x, h)
    }
}
