use serde::{Deserialize, Serialize};

use super::CaptionError;
use crate::numerics::layers::{Linear, TransformerBlock};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Real, RngState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperDims {
    pub d_in: usize,
    pub d_model: usize,
    pub prefix_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

/// Linear projection to `k` vectors, concatenated with `k` learnable
/// constants and mixed by a bidirectional transformer; the prefix is read
/// at the constant positions.
#[derive(Clone, Debug)]
pub struct MapperNet {
    pub dims: MapperDims,
    proj: Linear,
    constant: ParamId,
    blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub params: ParamStore,
    pub net: MapperNet,
}

const CONSTANT_STD: f64 = 0.1;
const RESIDUAL_STD: f64 = 0.02;

impl MappingNetwork {
    pub fn new(dims: MapperDims, seed: u64) -> Self {
        let mut rng = RngState::new(seed).derive(0x3A99);
        let mut params = ParamStore::new();
        let k = dims.prefix_len;
        let proj = Linear::fan_in(&mut params, "mapper.proj", dims.d_in, k * dims.d_model, &mut rng);
        let constant = params.add_normal("mapper.constant", &[k, dims.d_model], CONSTANT_STD, &mut rng);
        let blocks = (0..dims.n_layers)
            .map(|i| {
                let name = format!("mapper.block{i}");
                TransformerBlock::new(&mut params, &name, dims.d_model, dims.n_heads, dims.d_ff, false, RESIDUAL_STD, &mut rng)
            })
            .collect();
        Self { params, net: MapperNet { dims, proj, constant, blocks } }
    }

    pub fn dims(&self) -> MapperDims {
        self.net.dims
    }

    /// Prefixes `[n * k, d_model]` for the rows of `v` `[n, d_in]`.
    pub fn build_prefixes(&self, v: &Tensor) -> Result<Tensor, CaptionError> {
        if v.cols() != self.net.dims.d_in {
            return Err(CaptionError::Dim { expected: self.net.dims.d_in, got: v.cols() });
        }
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.params, false);
        let x = g.input(v.clone());
        let out = self.net.forward(&mut g, &p, x);
        Ok(g.value(out).clone())
    }

    /// Prefix `[k, d_model]` of one embedding.
    pub fn build_prefix(&self, v: &[f32]) -> Result<Tensor, CaptionError> {
        if v.len() != self.net.dims.d_in {
            return Err(CaptionError::Dim { expected: self.net.dims.d_in, got: v.len() });
        }
        self.build_prefixes(&Tensor::new(&[1, v.len()], v.to_vec())?)
    }
}

impl MapperNet {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Var {
        let n = g.value(v).rows();
        let (k, d) = (self.dims.prefix_len, self.dims.d_model);
        let proj = self.proj.forward(g, p, v);
        let proj = g.reshape(proj, &[n * k, d]);
        let both = g.concat_rows(&[proj, p.get(self.constant)]);
        // Example i occupies rows [i*2k, (i+1)*2k): its k projections, then the constants.
        let idx: Vec<usize> = (0..n).flat_map(|i| (i * k..(i + 1) * k).chain(n * k..n * k + k)).collect();
        let mut h = g.gather_rows(both, &idx);
        for b in &self.blocks {
            h = b.forward(g, p, h, 2 * k);
        }
        let out: Vec<usize> = (0..n).flat_map(|i| (2 * i * k + k)..(2 * i * k + 2 * k)).collect();
        g.gather_rows(h, &out)
    }
}
