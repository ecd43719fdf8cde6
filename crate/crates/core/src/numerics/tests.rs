use proptest::prelude::*;

use super::layers::{LayerNorm, Linear, TransformerBlock};
use super::*;

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = RngState::new(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add_normal(*name, shape, 0.7, &mut rng);
    }
    s
}

fn check<F>(store: &ParamStore, f: F) -> f64
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Var,
{
    // Small step: these checks target the truncation-free regime of each op.
    let cfg = GradCheckConfig { epsilon: 1e-5, ..GradCheckConfig::default() };
    let report = gradient_check(store, f, &cfg);
    report.max_rel_error()
}

#[test]
fn quadratic_gradients_exact() {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
    let err = check(&s, |g, p| {
        let w = p.get(ParamId(0));
        let target = g.input(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        g.mse(w, target)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_and_matmul_ops() {
    let s = random_store(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[5]), ("t", &[1]), ("m", &[5, 4])], 1);
    let err = check(&s, |g, p| {
        let (a, b, c, t, m) = (p.get(ParamId(0)), p.get(ParamId(1)), p.get(ParamId(2)), p.get(ParamId(3)), p.get(ParamId(4)));
        let x = g.matmul(a, b);
        let x = g.add_row(x, c);
        let x = g.gelu(x);
        let e = g.exp(t);
        let x = g.mul_scalar(x, e);
        let y = g.matmul_nt(a, m);
        let y = g.transpose(y);
        let y = g.transpose(y);
        let x = g.add(x, y);
        let x = g.scale(x, 0.3);
        let zero = g.input(Tensor::zeros(&[3, 5]));
        g.mse(x, zero)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn normalisation_and_row_ops() {
    let s = random_store(&[("x", &[6, 4]), ("gamma", &[4]), ("beta", &[4]), ("table", &[7, 4])], 2);
    let err = check(&s, |g, p| {
        let x = g.layer_norm(p.get(ParamId(0)), p.get(ParamId(1)), p.get(ParamId(2)));
        let e = g.embedding(p.get(ParamId(3)), &[1, 6, 1, 0]);
        let cat = g.concat_rows(&[x, e]);
        let gathered = g.gather_rows(cat, &[9, 0, 3, 3, 7]);
        let pooled = g.segment_mean(gathered, &[(0, 2), (2, 3)]);
        let normed = g.l2_normalize_rows(pooled);
        let r = g.reshape(normed, &[8]);
        let t = g.input(Tensor::new(&[8], vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.5, -0.5, 0.2]).unwrap());
        g.mse(r, t)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_and_cross_entropy() {
    let s = random_store(&[("q", &[8, 6]), ("k", &[8, 6]), ("v", &[8, 6]), ("w", &[6, 5])], 3);
    for causal in [false, true] {
        let err = check(&s, |g, p| {
            let a = g.attention(p.get(ParamId(0)), p.get(ParamId(1)), p.get(ParamId(2)), 2, 4, causal);
            let logits = g.matmul(a, p.get(ParamId(3)));
            let mask = [true, false, true, true, true, true, false, true];
            g.cross_entropy(logits, &[0, 1, 2, 3, 4, 0, 1, 2], &mask).unwrap()
        });
        assert!(err < 1e-6, "causal={causal}: {err}");
    }
}

#[test]
fn transformer_block_gradients() {
    let mut rng = RngState::new(4);
    let mut s = ParamStore::new();
    let block = TransformerBlock::new(&mut s, "blk", 8, 2, 16, true, 0.2, &mut rng);
    let ln = LayerNorm::new(&mut s, "ln", 8);
    let head = Linear::fan_in(&mut s, "head", 8, 5, &mut rng);
    let x: Vec<f64> = (0..48).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let err = check(&s, |g, p| {
        let xv = g.input(Tensor::new(&[6, 8], x.clone()).unwrap());
        let h = block.forward(g, p, xv, 3);
        let h = ln.forward(g, p, h);
        let logits = head.forward(g, p, h);
        g.cross_entropy(logits, &[1, 2, 3, 4, 0, 1], &[true; 6]).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let s = random_store(&[("w", &[3, 3])], 5);
    let mut g = Graph::<f32>::new();
    let frozen = g.bind(&s, false);
    let x = g.variable(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.matmul(x, frozen.get(ParamId(0)));
    let t = g.input(Tensor::zeros(&[1, 3]));
    let loss = g.mse(y, t);
    g.backward(loss);
    assert!(g.grad(frozen.get(ParamId(0))).is_none());
    assert!(g.grad(x).is_some());
}

#[test]
fn zero_grad_clears_every_element() {
    let mut s = random_store(&[("w", &[2, 2])], 6);
    let mut g = Graph::<f32>::new();
    let b = g.bind(&s, true);
    let z = g.input(Tensor::zeros(&[2, 2]));
    let l = g.mse(b.get(ParamId(0)), z);
    g.backward(l);
    g.accumulate_into(&mut s, &b);
    assert!(s.get(ParamId(0)).grad.data().iter().any(|&x| x != 0.0));
    s.zero_grad();
    assert!(s.get(ParamId(0)).grad.data().iter().all(|&x| x == 0.0));
}

#[test]
fn cross_entropy_uniform_for_every_vocab_size() {
    for v in 2..=1000 {
        let logits = Tensor::new(&[1, v], vec![0.25f32; v]).unwrap();
        let ce = cross_entropy(&logits, &[v - 1], &[true]).unwrap();
        assert!((ce - (v as f64).ln()).abs() < 1e-4, "V={v}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(xs in prop::collection::vec(-1e4f32..1e4, 1..40)) {
        let t = Tensor::new(&[xs.len()], xs).unwrap();
        let s = softmax(&t, 0).unwrap();
        let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn cross_entropy_non_negative(xs in prop::collection::vec(-50f32..50.0, 12), t in 0usize..4) {
        let logits = Tensor::new(&[3, 4], xs).unwrap();
        let ce = cross_entropy(&logits, &[t, (t + 1) % 4, 0], &[true, true, false]).unwrap();
        prop_assert!(ce >= 0.0);
    }
}
