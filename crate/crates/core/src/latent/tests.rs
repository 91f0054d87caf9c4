use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, Graph, Mode, ParamStore, Sampling, Tensor};

fn g1(mean: f64, var: f64) -> GaussianSeq<f64> {
    GaussianSeq::new(1, 1, vec![mean], vec![var]).unwrap()
}

fn all() -> SharingMask {
    make_sharing_mask(1, 1.0).unwrap()
}

#[test]
fn fusion_worked_examples() {
    let f = fuse_gaussians(&g1(1.0, 1.0), &g1(3.0, 1.0), &all(), Side::X).unwrap();
    assert!((f.mean[0] - 2.0).abs() < 1e-9 && (f.var[0] - 0.5).abs() < 1e-9);
    let f = fuse_gaussians(&g1(0.0, 0.5), &g1(3.0, 1.0), &all(), Side::X).unwrap();
    assert!((f.mean[0] - 1.0).abs() < 1e-9 && (f.var[0] - 1.0 / 3.0).abs() < 1e-9);
    let f = fuse_gaussians(&g1(0.7, 0.3), &g1(0.7, 0.3), &all(), Side::Y).unwrap();
    assert!((f.mean[0] - 0.7).abs() < 1e-12 && (f.var[0] - 0.15).abs() < 1e-12);
}

#[test]
fn fusion_rejects_bad_inputs() {
    let bad = GaussianSeq {
        t_z: 1,
        d_z: 1,
        mean: vec![0.0],
        var: vec![0.0],
    };
    assert!(matches!(
        fuse_gaussians(&bad, &g1(0.0, 1.0), &all(), Side::X),
        Err(Error::NonPositiveVariance(_))
    ));
    let wide = GaussianSeq::new(1, 2, vec![0.0; 2], vec![1.0; 2]).unwrap();
    assert!(fuse_gaussians(&wide, &g1(0.0, 1.0), &all(), Side::X).is_err());
}

#[test]
fn kl_worked_examples() {
    let k = kl_gaussian(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap()[0];
    assert!((k - 0.5).abs() < 1e-9);
    let k = kl_gaussian(&g1(0.0, 4.0), &g1(0.0, 1.0)).unwrap()[0];
    assert!((k - (1.5 + 0.5f64.ln())).abs() < 1e-9);
    assert!((k - 0.8069).abs() < 1e-4);
    assert_eq!(kl_gaussian(&g1(0.3, 2.0), &g1(0.3, 2.0)).unwrap()[0], 0.0);
}

#[test]
fn self_fusion_kl_value() {
    let q = g1(0.4, 1.7);
    let f = fuse_gaussians(&q, &q, &all(), Side::X).unwrap();
    let k = kl_gaussian(&f, &q).unwrap()[0];
    assert!((k - (2f64.ln() / 2.0 - 0.25)).abs() < 1e-12);
}

#[test]
fn sharing_mask_counts() {
    assert_eq!(make_sharing_mask(32, 1.0).unwrap().shared, 32);
    assert_eq!(make_sharing_mask(32, 0.5).unwrap().shared, 16);
    let m = make_sharing_mask(32, 0.75).unwrap();
    assert_eq!(m.mask.iter().filter(|&&b| b).count(), 24);
    assert!(m.mask[..24].iter().all(|&b| b));
    assert!(make_sharing_mask(32, 1.5).is_err());
    assert!(make_sharing_mask(32, -0.1).is_err());
}

#[test]
fn rho_zero_copies_keep_side() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (qx, qy) = (random_gauss(2, 3, &mut rng), random_gauss(2, 3, &mut rng));
    let none = make_sharing_mask(3, 0.0).unwrap();
    assert_eq!(fuse_gaussians(&qx, &qy, &none, Side::X).unwrap(), qx);
    assert_eq!(fuse_gaussians(&qx, &qy, &none, Side::Y).unwrap(), qy);
}

#[test]
fn length_transform_examples() {
    let s = [1.0, 10.0, 3.0, 30.0];
    assert_eq!(length_transform(&s, 2, 2, 2).unwrap(), s.to_vec());
    assert_eq!(length_transform(&s, 2, 2, 3).unwrap(), vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
    assert_eq!(length_transform(&s, 2, 2, 1).unwrap(), vec![2.0, 20.0]);
    assert!(length_transform(&s, 2, 2, 0).is_err());
}

#[test]
fn reparameterize_examples() {
    let q = GaussianSeq::new(1, 2, vec![0.5, -1.0], vec![4.0, 1e-300]).unwrap();
    assert_eq!(reparameterize(&q, &[0.0, 0.0]).unwrap(), q.mean);
    let z: Vec<f64> = reparameterize(&q, &[1.0, 3.0]).unwrap();
    assert_eq!(z[0], 2.5);
    assert!((z[1] + 1.0).abs() < 1e-140);
    assert!(reparameterize(&q, &[1.0]).is_err());
}

#[test]
fn kl_minimum_at_equal_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let qy = random_gauss(3, 4, &mut rng);
    let var_x: Vec<f64> = (0..12).map(|_| rng.gen_range(0.2..3.0)).collect();
    let mask = make_sharing_mask(4, 1.0).unwrap();
    let total = |mu_x: &[f64]| {
        let qx = GaussianSeq::new(3, 4, mu_x.to_vec(), var_x.clone()).unwrap();
        let f = fuse_gaussians(&qx, &qy, &mask, Side::X).unwrap();
        kl_gaussian(&f, &qy).unwrap().iter().sum::<f64>()
    };
    let eps = 1e-5;
    let base = total(&qy.mean);
    for i in 0..12 {
        let mut plus = qy.mean.clone();
        let mut minus = qy.mean.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let grad = (total(&plus) - total(&minus)) / (2.0 * eps);
        assert!(grad.abs() < 1e-6, "coordinate {i}: {grad}");
        for delta in [0.1, 1.0] {
            for sign in [-1.0, 1.0] {
                let mut moved = qy.mean.clone();
                moved[i] += sign * delta;
                assert!(total(&moved) > base);
            }
        }
    }
}

fn random_gauss(t: usize, d: usize, rng: &mut ChaCha8Rng) -> GaussianSeq<f64> {
    let mean = (0..t * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let var = (0..t * d).map(|_| rng.gen_range(0.01..5.0)).collect();
    GaussianSeq::new(t, d, mean, var).unwrap()
}

fn gauss_strategy(n: usize) -> impl Strategy<Value = GaussianSeq<f64>> {
    (
        proptest::collection::vec(-5.0..5.0f64, n),
        proptest::collection::vec(1e-4..10.0f64, n),
    )
        .prop_map(move |(m, v)| GaussianSeq::new(2, n / 2, m, v).unwrap())
}

proptest! {
    #[test]
    fn fusion_commutes_on_shared_dims(qx in gauss_strategy(8), qy in gauss_strategy(8), rho in 0.0..=1.0f64) {
        let mask = make_sharing_mask(4, rho).unwrap();
        let a = fuse_gaussians(&qx, &qy, &mask, Side::X).unwrap();
        let b = fuse_gaussians(&qy, &qx, &mask, Side::X).unwrap();
        for i in 0..8 {
            if mask.mask[i % 4] {
                prop_assert_eq!(a.mean[i], b.mean[i]);
                prop_assert_eq!(a.var[i], b.var[i]);
                prop_assert!(a.var[i] <= qx.var[i].min(qy.var[i]));
                let (lo, hi) = (qx.mean[i].min(qy.mean[i]), qx.mean[i].max(qy.mean[i]));
                prop_assert!(a.mean[i] >= lo - 1e-12 && a.mean[i] <= hi + 1e-12);
            } else {
                prop_assert_eq!(a.mean[i], qx.mean[i]);
                prop_assert_eq!(a.var[i], qx.var[i]);
            }
        }
    }

    #[test]
    fn precision_dominance(mx in -5.0..5.0f64, my in -5.0..5.0f64) {
        let f = fuse_gaussians(&g1(mx, 1.0), &g1(my, 1e6), &all(), Side::Y).unwrap();
        prop_assert!((f.mean[0] - mx).abs() < 1e-3);
    }

    #[test]
    fn kl_is_non_negative(q in gauss_strategy(8), p in gauss_strategy(8)) {
        prop_assert!(kl_gaussian(&q, &p).unwrap().iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn length_transform_properties(t in 1usize..20, l in 1usize..40, c in -3.0..3.0f64) {
        let w = length_transform_matrix(t, l).unwrap();
        for row in w.chunks_exact(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let constant = vec![c; t * 2];
        for v in length_transform(&constant, t, 2, l).unwrap() {
            prop_assert!((v - c).abs() < 1e-12);
        }
        if l > 1 {
            let mut last = 0.0;
            for i in 0..l {
                let (lo, frac) = source_coordinate(i, t, l);
                let coord = lo as f64 + frac;
                prop_assert!(coord >= last);
                last = coord;
            }
        }
        let seq: Vec<f64> = (0..t * 3).map(|i| (i as f64).sin()).collect();
        prop_assert_eq!(length_transform(&seq, t, 3, t).unwrap(), seq);
    }
}

// ── graph versions agree with the pure functions ───────────────────────

fn to_vars(g: &mut Graph<'_, f64>, q: &GaussianSeq<f64>) -> GaussianVars {
    let shape = vec![1, q.t_z, q.d_z];
    GaussianVars {
        mean: g.constant(Tensor::new(shape.clone(), q.mean.clone()).unwrap()),
        var: g.constant(Tensor::new(shape, q.var.clone()).unwrap()),
    }
}

#[test]
fn graph_fusion_and_kl_match_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for rho in [0.0, 0.5, 1.0] {
        let (qx, qy) = (random_gauss(3, 4, &mut rng), random_gauss(3, 4, &mut rng));
        let mask = make_sharing_mask(4, rho).unwrap();
        let mut g = Graph::<f64>::new(Mode::Eval);
        let (vx, vy) = (to_vars(&mut g, &qx), to_vars(&mut g, &qy));
        let fv = fuse_vars(&mut g, vx, vy, &mask, Side::Y).unwrap();
        let kv = kl_vars(&mut g, fv, vy).unwrap();
        let f = fuse_gaussians(&qx, &qy, &mask, Side::Y).unwrap();
        let k = kl_gaussian(&f, &qy).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(g.value(fv.mean).data(), &f.mean));
        assert!(close(g.value(fv.var).data(), &f.var));
        assert!(close(g.value(kv).data(), &k));
    }
}

#[test]
fn graph_length_transform_matches_pure_per_row() {
    let seq: Vec<f64> = (0..5 * 2).map(|i| i as f64 * 0.5 - 1.0).collect();
    let mut g = Graph::<f64>::new(Mode::Eval);
    let mut padded = seq.clone();
    padded.extend(seq[..6].iter());
    padded.extend([9.0; 4]);
    let x = g.constant(Tensor::new(vec![2, 5, 2], padded).unwrap());
    let y = length_transform_var(&mut g, x, &[5, 3], &[7, 2], 7).unwrap();
    let out = g.value(y).data();
    assert_eq!(&out[..14], length_transform(&seq, 5, 2, 7).unwrap().as_slice());
    assert_eq!(&out[14..18], length_transform(&seq[..6], 3, 2, 2).unwrap().as_slice());
    assert!(out[18..].iter().all(|&v| v == 0.0));
}

#[test]
fn zero_head_gives_ln2_variance() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = GaussianHead::new(&mut store, "head", 4, 3, &mut rng).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for t in [1, 5, 9] {
        let mut g = Graph::with_params(&store, Mode::Eval);
        let h = g.constant(Tensor::full(vec![1, t, 4], 0.3));
        let q = head.forward(&mut g, h, &[t], 6).unwrap();
        assert_eq!(g.shape(q.mean), &[1, 6, 3]);
        assert!(g.value(q.mean).data().iter().all(|&m| m == 0.0));
        assert!(g.value(q.var).data().iter().all(|&v| (v - 0.6931).abs() < 1e-4));
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = GaussianHead::new(&mut store, "head", 4, 3, &mut rng).unwrap();
    let h: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let noise: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        &mut store,
        |g| {
            let hv = g.constant(Tensor::new(vec![2, 5, 4], h.clone())?);
            let q = head.forward(g, hv, &[5, 2], 4)?;
            let p = GaussianVars {
                mean: g.constant(Tensor::zeros(vec![2, 4, 3])),
                var: g.constant(Tensor::full(vec![2, 4, 3], 1.0)),
            };
            let z = reparameterize_vars(g, q, Tensor::new(vec![2, 4, 3], noise.clone())?)?;
            let kl = kl_vars(g, q, p)?;
            let zz = g.mul(z, z)?;
            let both = g.add(kl, zz)?;
            Ok(g.sum(both))
        },
        1e-6,
        1e-3,
        Sampling::All,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn reparameterize_gradient_wrt_mean_is_ones() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let mean = g.input(Tensor::from_f64(vec![1, 2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap());
    let var = g.input(Tensor::full(vec![1, 2, 2], 2.0));
    let z = reparameterize_vars(&mut g, GaussianVars { mean, var }, Tensor::full(vec![1, 2, 2], 0.5)).unwrap();
    let loss = g.sum(z);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(mean).unwrap(), &[1.0; 4]);
}
