use super::*;
use crate::corpus::{generate_corpus, Split, Vocabulary, FEATURE_DIM};
use crate::jointspace::{embed_pairs, train_jointspace, DualEncoder, EncoderDims, JointConfig, PairedExample};
use crate::numerics::{gradient_check, GradCheckConfig};

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = RngState::new(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| r.normal()).collect();
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| (x / nrm) as f32));
    }
    Tensor::new(&[n, d], data).unwrap()
}

#[test]
fn zero_noise_is_identity() {
    let v = vec![0.1f32, -0.2, 0.3];
    assert_eq!(inject_noise(&v, NoiseConfig::new(0.0).unwrap(), &mut RngState::new(1)), v);
    assert!(NoiseConfig::new(-1.0).is_err());
    assert!(NoiseConfig::new(f64::NAN).is_err());
}

#[test]
fn noise_has_requested_moments() {
    let v = vec![0.25f32; 4];
    let cfg = NoiseConfig::new(0.015).unwrap();
    let mut rng = RngState::new(42);
    let n = 10_000;
    let mut sum = [0f64; 4];
    let mut sq = [0f64; 4];
    for _ in 0..n {
        let out = inject_noise(&v, cfg, &mut rng);
        for j in 0..4 {
            let e = out[j] as f64 - v[j] as f64;
            sum[j] += e;
            sq[j] += e * e;
        }
    }
    for j in 0..4 {
        let mean = sum[j] / n as f64;
        let std = (sq[j] / n as f64 - mean * mean).sqrt();
        // 3 sigma of the sample mean is 3 * 0.015 / 100.
        assert!(mean.abs() < 0.00045, "{mean}");
        assert!((std - 0.015).abs() < 0.001, "{std}");
    }
}

#[test]
fn noise_is_seed_deterministic() {
    let v = vec![0.5f32; 8];
    let cfg = NoiseConfig::new(0.1).unwrap();
    let a = inject_noise(&v, cfg, &mut RngState::new(3));
    let b = inject_noise(&v, cfg, &mut RngState::new(3));
    assert_eq!(a, b);
    assert_ne!(a, inject_noise(&v, cfg, &mut RngState::new(4)));
}

#[test]
fn estimator_on_constructed_gaps() {
    let t = unit_rows(40, 8, 1);
    let mut rng = RngState::new(0);
    assert_eq!(estimate_noise_std(&t, &t, 30, &mut rng).unwrap(), 0.0);
    let mut shifted = t.clone();
    for i in 0..40 {
        shifted.data_mut()[i * 8] += 0.015;
    }
    let e = estimate_noise_std(&shifted, &t, 30, &mut rng).unwrap();
    assert!((e - 0.015).abs() < 1e-7, "{e}");
    assert!(matches!(estimate_noise_std(&t, &t, 41, &mut rng), Err(BridgeError::TooFewPairs { need: 41, got: 40 })));
}

#[test]
fn estimate_depends_only_on_selected_pairs() {
    let a = unit_rows(50, 8, 2);
    let t = unit_rows(50, 8, 3);
    let idx = RngState::new(9).sample_indices(50, 30);
    let base = mean_linf_at(&a, &t, &idx).unwrap();
    // Permute the selected index list: same pairs, same estimate.
    let mut rev = idx.clone();
    rev.reverse();
    assert!((mean_linf_at(&a, &t, &rev).unwrap() - base).abs() < 1e-12);
    // Change only unselected rows: estimate unchanged.
    let mut a2 = a.clone();
    for i in (0..50).filter(|i| !idx.contains(i)) {
        a2.data_mut()[i * 8] = 9.0;
    }
    assert_eq!(mean_linf_at(&a2, &t, &idx).unwrap(), base);
    assert_eq!(estimate_noise_std(&a, &t, 30, &mut RngState::new(9)).unwrap(), base);
}

fn adapter_cfg() -> AdapterConfig {
    AdapterConfig { epochs: 200, batch_size: 64, lr: 1e-2, seed: 5 }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut ad = LinearAdapter::identity(6);
    // Move off the identity so every gradient entry is exercised.
    for x in ad.params.get_mut(ad.layer.w).value.data_mut() {
        *x += 0.05;
    }
    let x = unit_rows(5, 6, 1).cast::<f64>();
    let y = unit_rows(5, 6, 2).cast::<f64>();
    let layer = ad.layer.clone();
    let rep = gradient_check(
        &ad.params,
        |g, p| {
            let xv = g.input(x.clone());
            let yv = g.input(y.clone());
            let h = layer.forward(g, p, xv);
            g.mse(h, yv)
        },
        &GradCheckConfig::default(),
    );
    assert!(rep.max_rel_error() < 1e-3, "{:?}", rep.worst());
}

#[test]
fn adapter_recovers_linear_map() {
    let d = 16;
    let mut r = RngState::new(17);
    let w: Vec<f64> = (0..d * d).map(|_| r.normal() * 0.25).collect();
    let b: Vec<f64> = (0..d).map(|_| r.normal() * 0.1).collect();
    let map = |x: &Tensor| {
        let mut out = Vec::new();
        for i in 0..x.rows() {
            let row = x.row(i);
            for j in 0..d {
                out.push((b[j] + (0..d).map(|k| row[k] as f64 * w[k * d + j]).sum::<f64>()) as f32);
            }
        }
        Tensor::new(&[x.rows(), d], out).unwrap()
    };
    let xt = unit_rows(512, d, 1);
    let xh = unit_rows(128, d, 2);
    let mut ad = LinearAdapter::identity(d);
    let fit = train_adapter(&mut ad, &xt, &map(&xt), &adapter_cfg()).unwrap();
    let held = mse(&ad.apply_rows(&xh).unwrap(), &map(&xh));
    assert!(fit.final_mse < 1e-6, "{}", fit.final_mse);
    assert!(held < 1e-5, "{held}");
}

#[test]
fn adapter_learns_identity() {
    let x = unit_rows(256, 8, 4);
    let mut ad = LinearAdapter::identity(8);
    let fit = train_adapter(&mut ad, &x, &x, &adapter_cfg()).unwrap();
    assert!(fit.final_mse < 1e-6);
    let v = x.row(3);
    let out = apply_bridge(v, Some(&ad), Some(NoiseConfig::new(0.0).unwrap()), &mut RngState::new(0)).unwrap();
    assert!(out.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-3));
}

#[test]
fn bridge_composition() {
    let v = vec![0.3f32, -0.1, 0.7];
    let mut rng = RngState::new(1);
    assert_eq!(apply_bridge(&v, None, None, &mut rng).unwrap(), v);
    let mut ad = LinearAdapter::identity(3);
    ad.params.get_mut(ad.layer.b).value.data_mut()[1] = 0.5;
    let cfg = NoiseConfig::new(0.2).unwrap();
    let got = apply_bridge(&v, Some(&ad), Some(cfg), &mut RngState::new(8)).unwrap();
    let want = inject_noise(&ad.apply(&v).unwrap(), cfg, &mut RngState::new(8));
    assert_eq!(got, want);
    assert!(ad.apply(&[1.0]).is_err());
}

#[test]
fn adapter_beats_no_adapter_on_trained_encoder() {
    let corpus = generate_corpus(7, 2000, 12).unwrap();
    let vocab = Vocabulary::grammar();
    let pairs = |s| -> Vec<PairedExample> {
        corpus
            .split(s)
            .into_iter()
            .map(|r| PairedExample { features: r.audio_features.clone().unwrap(), tokens: vocab.encode(&r.caption).unwrap() })
            .collect()
    };
    let dims = EncoderDims { vocab_size: vocab.len(), d_h: 32, d_a: FEATURE_DIM, d: 32, hidden: 64 };
    let mut enc = DualEncoder::new(dims, 7);
    let jc = JointConfig { epochs: 40, batch_size: 64, lr: 3e-3, warmup_steps: 50, seed: 7 };
    train_jointspace(&mut enc, &pairs(Split::Train), &jc).unwrap();
    let (a_tr, t_tr) = embed_pairs(&enc, &pairs(Split::Train)).unwrap();
    let (a_te, t_te) = embed_pairs(&enc, &pairs(Split::Test)).unwrap();

    let mut ad = LinearAdapter::identity(32);
    let init = mse(&ad.apply_rows(&t_te).unwrap(), &a_te);
    assert_eq!(init, mse(&t_te, &a_te));
    train_adapter(&mut ad, &t_tr, &a_tr, &adapter_cfg()).unwrap();
    let held = mse(&ad.apply_rows(&t_te).unwrap(), &a_te);
    assert!(held < init, "{held} vs {init}");

    // Full-pool estimate vs seeded 30-sample subsets: within a factor of 2.
    let all: Vec<usize> = (0..a_te.rows()).collect();
    let full = mean_linf_at(&a_te, &t_te, &all).unwrap();
    for seed in 0..10 {
        let e = estimate_noise_std(&a_te, &t_te, 30, &mut RngState::new(seed)).unwrap();
        assert!(e > full / 2.0 && e < full * 2.0, "{e} vs {full}");
        let idx = RngState::new(seed).sample_indices(a_te.rows(), 30);
        let brute: f64 =
            idx.iter().map(|&i| (0..32).map(|j| (a_te.row(i)[j] - t_te.row(i)[j]).abs() as f64).fold(0.0, f64::max)).sum::<f64>() / 30.0;
        assert!((e - brute).abs() < 1e-7);
    }
}
