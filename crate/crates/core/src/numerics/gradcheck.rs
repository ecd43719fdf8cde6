use super::{Bound, Graph, ParamId, ParamStore, RngState, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Elements checked per tensor; tensors at or below this size are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-3, samples_per_tensor: 32, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` builds the loss on an `f64` graph from the bound parameters of
/// `params`; any other module it needs must be bound as constant inside the
/// closure. Relative error is `|ga - gn| / max(|ga|, |gn|, 1e-8)`.
pub fn gradient_check<F>(params: &ParamStore, mut loss_fn: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Var,
{
    let mut g = Graph::<f64>::new();
    let bound = g.bind(params, true);
    let loss = loss_fn(&mut g, &bound);
    g.backward(loss);
    let analytic: Vec<Vec<f64>> =
        params.ids().map(|id| g.grad(bound.get(id)).map_or_else(|| vec![0.0; params.value(id).len()], <[f64]>::to_vec)).collect();

    let mut eval = |perturb: (ParamId, usize, f64)| {
        let mut g = Graph::<f64>::new();
        let bound = g.bind_perturbed(params, true, Some(perturb));
        let loss = loss_fn(&mut g, &bound);
        g.scalar(loss)
    };

    let mut rng = RngState::new(cfg.seed);
    let eps = cfg.epsilon;
    let mut report = Vec::new();
    for id in params.ids() {
        let n = params.value(id).len();
        let idx = if n <= cfg.samples_per_tensor { (0..n).collect() } else { rng.sample_indices(n, cfg.samples_per_tensor) };
        let mut worst = 0f64;
        for &i in &idx {
            let numeric = (eval((id, i, eps)) - eval((id, i, -eps))) / (2.0 * eps);
            let a = analytic[id.0][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        report.push(ParamCheck { name: params.name(id).to_string(), checked: idx.len(), max_rel_error: worst });
    }
    GradCheckReport { params: report }
}
