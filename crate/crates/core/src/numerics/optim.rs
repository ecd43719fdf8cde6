use serde::{Deserialize, Serialize};

use super::{Bound, Graph, NumericsError, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every parameter in `params`, in place.
///
/// Fails before touching any value if a gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<(), NumericsError> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.all_finite()) {
        return Err(NumericsError::NonFiniteGradient(name.to_string()));
    }
    for (_, p) in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let grad = p.grad.data();
        let m = p.adam_m.data_mut();
        for (mi, &g) in m.iter_mut().zip(grad) {
            *mi = (cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * g as f64) as f32;
        }
        let v = p.adam_v.data_mut();
        for (vi, &g) in v.iter_mut().zip(grad) {
            *vi = (cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * (g as f64) * (g as f64)) as f32;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        let w = p.value.data_mut();
        for ((wi, &mi), &vi) in w.iter_mut().zip(m).zip(v) {
            let mhat = mi as f64 / bc1;
            let vhat = vi as f64 / bc2;
            *wi = (*wi as f64 - lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<f64, NumericsError> {
    if warmup_steps >= total_steps {
        return Err(NumericsError::Schedule { warmup_steps, total_steps });
    }
    let step = step.min(total_steps);
    Ok(if step < warmup_steps {
        base_lr * step as f64 / warmup_steps as f64
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
    })
}

/// Adam plus the warmup/decay schedule, counting steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub adam: AdamConfig,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self, NumericsError> {
        lr_at(0, base_lr, warmup_steps, total_steps)?;
        Ok(Self { adam: AdamConfig::default(), base_lr, warmup_steps, total_steps, step: 0 })
    }

    /// Learning rate the next step will use. The schedule is sampled at
    /// `step + 1` so the very first update is not a zero-lr no-op.
    pub fn lr(&self) -> f64 {
        lr_at(self.step + 1, self.base_lr, self.warmup_steps, self.total_steps).expect("validated schedule")
    }

    /// Builds the loss with `f` on a fresh f32 graph, backpropagates into
    /// `store` and applies one Adam update. Returns the loss value.
    pub fn step<E: From<NumericsError>>(
        &mut self,
        store: &mut ParamStore,
        f: impl FnOnce(&mut Graph<f32>, &Bound) -> Result<Var, E>,
    ) -> Result<f64, E> {
        let mut g = Graph::<f32>::new();
        let p = g.bind(store, true);
        let loss = f(&mut g, &p)?;
        let value = g.scalar(loss) as f64;
        g.backward(loss);
        store.zero_grad();
        g.accumulate_into(store, &p);
        let lr = self.lr();
        adam_step(store, lr, &self.adam)?;
        self.step += 1;
        Ok(value)
    }
}

/// One row of a training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, loss: f64, lr: f64) {
        self.entries.push(LogEntry { epoch, loss, lr });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.lr));
        }
        s
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(w: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.get_mut(crate::numerics::ParamId(0)).grad = Tensor::scalar(2.0);
        adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap();
        let (_, p) = s.iter().next().unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut s = scalar_store(1.5);
        adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap();
        let (_, p) = s.iter().next().unwrap();
        assert_eq!(p.value.data()[0], 1.5);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut s = scalar_store(1.0);
        s.get_mut(crate::numerics::ParamId(0)).grad = Tensor::scalar(f32::NAN);
        let err = adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.0);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut s = scalar_store(0.0);
        for _ in 0..100 {
            let w = s.iter().next().unwrap().1.value.data()[0];
            s.get_mut(crate::numerics::ParamId(0)).grad = Tensor::scalar(2.0 * (w - 3.0));
            adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        let w = s.iter().next().unwrap().1.value.data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 1e-3, 100, 1000).unwrap(), 0.0);
        assert_eq!(lr_at(100, 1e-3, 100, 1000).unwrap(), 1e-3);
        assert_eq!(lr_at(1000, 1e-3, 100, 1000).unwrap(), 0.0);
        // midpoint of decay: (100 + 1000) / 2 = 550 -> 1e-4 * 450 / 900
        let mid = lr_at(550, 1e-4, 100, 1000).unwrap();
        assert!((mid - 5e-5).abs() < 1e-15);
        assert!(lr_at(0, 1e-3, 10, 10).is_err());
    }
}
