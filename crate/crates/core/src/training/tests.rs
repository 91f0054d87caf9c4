use super::*;
use crate::data::{gen_corpus, make_batch, CorpusSpec};
use crate::models::{LatentConfig, ModelConfig};
use crate::nn::BlockConfig;
use crate::tensor::{grad_check, Sampling};

fn tiny(kind: ModelKind, rho: f64) -> ModelConfig {
    ModelConfig {
        kind,
        block: BlockConfig {
            d_model: 12,
            heads: 2,
            ffn_dim: 16,
            layers: 1,
            dropout: 0.0,
            max_positions: 24,
        },
        latent: LatentConfig { t_z: 3, d_z: 4, rho },
        vocab: 12,
        posterior_layers: 1,
        seed: 21,
    }
}

fn seqs(rows: &[&[u32]]) -> SeqBatch {
    SeqBatch::new(rows, PAD).unwrap()
}

fn toy() -> (SeqBatch, SeqBatch) {
    (seqs(&[&[3, 4, 5], &[6, 7, 8, 9]]), seqs(&[&[5, 6, 7, 3], &[8, 9]]))
}

fn noise(b: &ModelBundle<f64>, seed: u64) -> Tensor<f64> {
    latent_noise(b, 2, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn schedule_examples() {
    let (peak, w) = (2e-3, 100);
    assert_eq!(lr_schedule(w, peak, w), peak);
    assert!((lr_schedule(4 * w, peak, w) - peak / 2.0).abs() < 1e-15);
    assert!((lr_schedule(1, peak, w) - peak / 100.0).abs() < 1e-15);
    let lrs: Vec<f64> = (1..=1000).map(|s| lr_schedule(s, peak, w)).collect();
    assert!(lrs[..w].windows(2).all(|p| p[0] <= p[1]));
    assert!(lrs[w - 1..].windows(2).all(|p| p[0] >= p[1]));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { patience: 0, ..Default::default() },
        TrainConfig { warmup: 0, ..Default::default() },
        TrainConfig { rho: 1.5, ..Default::default() },
        TrainConfig { beta: -1.0, ..Default::default() },
        TrainConfig { lr_peak: 0.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    let b = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 0.5)).unwrap();
    assert!(Trainer::new(&b, TrainConfig { rho: 1.0, ..Default::default() }).is_err());
    assert!(Trainer::new(&b, TrainConfig { rho: 0.5, ..Default::default() }).is_ok());
}

fn check(store: &ModelBundle<f64>, f: impl for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>) {
    let mut s = store.store.clone();
    let rep = grad_check(&mut s, f, 1e-5, 1e-3, Sampling::Random { count: 300, seed: 4 }).unwrap();
    assert!(rep.checked >= 200, "{rep:?}");
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn lanmt_elbo_gradients_match_finite_differences() {
    let b = ModelBundle::<f64>::new(tiny(ModelKind::LaNmt, 1.0)).unwrap();
    let (x, y) = toy();
    for d in [Direction::Forward, Direction::Reverse] {
        let n = noise(&b, 1);
        check(&b, |g| Ok(elbo_lanmt(g, &b, d, &x, &y, 1.0, n.clone())?.0));
    }
}

#[test]
fn ladder_gradients_match_finite_differences() {
    for rho in [1.0, 0.5] {
        let b = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, rho)).unwrap();
        let (x, y) = toy();
        for recon in [Recon::Source, Recon::Target] {
            let n = noise(&b, 2);
            check(&b, |g| Ok(elbo_ladder_sup(g, &b, &x, &y, recon, 2.5, n.clone())?.0));
        }
        let n = noise(&b, 3);
        check(&b, |g| Ok(dual_losses(g, &b, &x, &y, 2.5, n.clone(), None)?.loss));
    }
}

#[test]
fn breakdown_total_matches_backward_scalar() {
    let (x, y) = toy();
    let lanmt = ModelBundle::<f64>::new(tiny(ModelKind::LaNmt, 1.0)).unwrap();
    let ladder = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 0.5)).unwrap();
    let at = ModelBundle::<f64>::new(tiny(ModelKind::At, 1.0)).unwrap();
    for beta in [0.0, 1.0, 2.5] {
        let mut g = Graph::with_params(&lanmt.store, Mode::Eval);
        let (loss, p) = elbo_lanmt(&mut g, &lanmt, Direction::Forward, &x, &y, beta, noise(&lanmt, 5)).unwrap();
        assert!((p.recompute_total(beta) - g.value(loss).item()).abs() < 1e-9);
        assert!(p.kl >= 0.0 && p.token_ll < 0.0 && p.length_ll < 0.0);
        if beta == 0.0 {
            assert_eq!(p.total, -(p.token_ll + p.length_ll));
        }
        let mut g = Graph::with_params(&ladder.store, Mode::Eval);
        let d = dual_losses(&mut g, &ladder, &x, &y, beta, noise(&ladder, 5), None).unwrap();
        let both = d.source + d.target;
        assert!((both.recompute_total(beta) - g.value(d.loss).item()).abs() < 1e-9);
        assert!((d.source.total + d.target.total - g.value(d.loss).item()).abs() < 1e-12);
        let mut g = Graph::with_params(&at.store, Mode::Eval);
        let (loss, p) = at_loss(&mut g, &at, Direction::Reverse, &y, &x, 0.1).unwrap();
        assert!((p.recompute_total(beta) - g.value(loss).item()).abs() < 1e-9);
    }
}

fn mirror_encoders(b: &mut ModelBundle<f64>) {
    let pairs: Vec<_> = b
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("theta.enc."))
        .map(|(id, p)| (id, b.store.id(&p.name.replacen("theta", "phi", 1)).unwrap()))
        .collect();
    for (from, to) in pairs {
        let v = b.store.value(from).clone();
        b.store.get_mut(to).value = v;
    }
}

#[test]
fn mirrored_encoders_give_self_fusion_kl() {
    let mut b = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 1.0)).unwrap();
    mirror_encoders(&mut b);
    let x = seqs(&[&[3, 4, 5, 6], &[7, 8]]);
    let per_coord = 2f64.ln() / 2.0 - 0.25;
    assert!((per_coord - 0.0966).abs() < 5e-5);
    let coords = (b.t_z() * b.config.latent.d_z) as f64;
    for recon in [Recon::Source, Recon::Target] {
        let mut g = Graph::with_params(&b.store, Mode::Eval);
        let (_, p) = elbo_ladder_sup(&mut g, &b, &x, &x, recon, 1.0, noise(&b, 0)).unwrap();
        assert!((p.kl - coords * per_coord).abs() < 1e-9, "{} vs {}", p.kl, coords * per_coord);
    }
}

#[test]
fn dual_step_shares_one_sample() {
    let b = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 1.0)).unwrap();
    let (x, y) = toy();
    let mut g = Graph::with_params(&b.store, Mode::Eval);
    let d = dual_losses(&mut g, &b, &x, &y, 1.0, noise(&b, 7), None).unwrap();
    let bits = |v: Var| g.value(v).data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(d.z_source), bits(d.z_target));

    // Partial sharing still uses the same draw; only the kept side differs.
    let half = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 0.5)).unwrap();
    let mut g = Graph::with_params(&half.store, Mode::Eval);
    let d = dual_losses(&mut g, &half, &x, &y, 1.0, noise(&half, 7), None).unwrap();
    let (zs, zt) = (g.value(d.z_source).data(), g.value(d.z_target).data());
    let dz = half.config.latent.d_z;
    for (i, (a, c)) in zs.iter().zip(zt).enumerate() {
        if half.mask.mask[i % dz] {
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }
}

#[test]
fn independent_samples_change_the_loss() {
    let b = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 1.0)).unwrap();
    let (x, y) = toy();
    let run = |other: Option<Tensor<f64>>| {
        let mut g = Graph::with_params(&b.store, Mode::Eval);
        let d = dual_losses(&mut g, &b, &x, &y, 1.0, noise(&b, 8), other).unwrap();
        g.value(d.loss).item()
    };
    let shared = run(None);
    assert_eq!(shared, run(None));
    assert_eq!(shared, run(Some(noise(&b, 8))));
    assert_ne!(shared, run(Some(noise(&b, 9))));

    let batch = Batch {
        src: x.clone(),
        tgt: y.clone(),
        indices: vec![0, 1],
    };
    let step = |reuse: bool| {
        let mut m = b.duplicate().unwrap();
        let cfg = TrainConfig { reuse_noise: reuse, ..Default::default() };
        let mut t = Trainer::new(&m, cfg).unwrap();
        t.dual_step(&mut m, &batch).unwrap().total
    };
    assert_ne!(step(true), step(false));
}

#[test]
fn one_dual_step_reaches_every_parameter() {
    let b = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 0.5)).unwrap();
    let (x, y) = toy();
    let mut g = Graph::with_params(&b.store, Mode::Train).seed(3);
    let d = dual_losses(&mut g, &b, &x, &y, 1.0, noise(&b, 1), None).unwrap();
    let grads = g.backward(d.loss).unwrap();
    let reached: Vec<_> = grads.params().into_iter().map(|(id, _)| id).collect();
    for (id, p) in b.store.iter() {
        assert!(reached.contains(&id), "no gradient for {}", p.name);
    }
    for prefix in ["theta.enc.", "theta.dec.", "theta.len.", "phi.enc.", "phi.dec.", "phi.len."] {
        assert!(b.store.iter().any(|(_, p)| p.name.starts_with(prefix)), "{prefix}");
    }
}

#[test]
fn lanmt_step_trains_both_directions() {
    let b = ModelBundle::<f64>::new(tiny(ModelKind::LaNmt, 1.0)).unwrap();
    let mut m = b.duplicate().unwrap();
    let pairs = tiny_corpus(6);
    let batch = make_batch(&pairs, &[0, 1, 2], PAD).unwrap();
    let mut t = Trainer::new(&m, TrainConfig::default()).unwrap();
    t.train_step(&mut m, &batch, &batch).unwrap();
    for ((_, before), (_, after)) in b.store.iter().zip(m.store.iter()) {
        assert_ne!(before.value, after.value, "{} did not move", before.name);
    }
    assert_eq!(m.trained_steps, 1);
}

#[test]
fn early_stopping_rule() {
    let mut s = EarlyStopping::new(1);
    assert!(s.observe(0.5));
    assert!(!s.should_stop());
    assert!(!s.observe(0.4));
    assert!(s.should_stop());

    let mut s = EarlyStopping::new(3);
    let seen: Vec<bool> = [0.1, 0.2, 0.2, 0.1, 0.3, 0.0, 0.0]
        .iter()
        .map(|&v| {
            let improved = s.observe(v);
            improved || !s.should_stop()
        })
        .collect();
    assert_eq!(seen, vec![true; 7]);
    assert_eq!(s.best(), Some(0.3));
    s.observe(0.0);
    assert!(s.should_stop());
}

fn tiny_corpus(pairs: usize) -> Vec<ParallelPair> {
    let spec = CorpusSpec {
        source_vocab: 12,
        target_vocab: 12,
        pairs,
        min_len: 2,
        max_len: 5,
        seed: 3,
        ..CorpusSpec::default()
    };
    gen_corpus(&spec, 24).unwrap()
}

#[test]
fn overfits_a_ten_pair_corpus() {
    let pairs = tiny_corpus(10);
    let all: Vec<usize> = (0..10).collect();
    let batch = make_batch(&pairs, &all, PAD).unwrap();
    for kind in [ModelKind::At, ModelKind::LaNmt, ModelKind::LadderNmt] {
        let mut cfg = tiny(kind, 1.0);
        cfg.block.dropout = 0.1;
        let mut m = ModelBundle::<f64>::new(cfg).unwrap();
        let tc = TrainConfig {
            lr_peak: 3e-3,
            warmup: 20,
            ..Default::default()
        };
        let mut t = Trainer::new(&m, tc).unwrap();
        let first = t.train_step(&mut m, &batch, &batch).unwrap().total;
        let mut last = first;
        for _ in 1..500 {
            last = t.train_step(&mut m, &batch, &batch).unwrap().total;
            if last < 0.5 * first {
                break;
            }
        }
        assert!(last < first, "{kind}: {first} -> {last}");
    }
}

#[test]
fn training_run_is_reproducible_and_restores_best() {
    let pairs = tiny_corpus(40);
    let data = TrainData::plain(pairs[..30].to_vec(), pairs[30..].to_vec());
    let cfg = TrainConfig {
        max_steps: 12,
        validate_every: 5,
        batch_size: 8,
        warmup: 4,
        ..Default::default()
    };
    let run = || {
        let mut m = ModelBundle::<f64>::new(tiny(ModelKind::LadderNmt, 1.0)).unwrap();
        let rep = train(&mut m, &data, &cfg).unwrap();
        (rep, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
    assert!(ma.store.bitwise_eq(&mb.store));
    assert_eq!(a.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert_eq!(a.steps, 12);
    assert_eq!(ma.trained_steps, a.best_step);
    let best = a.log.iter().map(|r| (r.valid_bleu_fwd + r.valid_bleu_rev) / 2.0).fold(f64::MIN, f64::max);
    assert_eq!(a.best_bleu, best);
    let (f, r) = validation_bleu(&ma, &data.valid, 0, cfg.max_valid).unwrap();
    assert!(((f + r) / 2.0 - best).abs() < 1e-12);
    let csv = metrics_csv(&a.log);
    assert!(csv.starts_with(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn nonfinite_streak_aborts() {
    let mut m = ModelBundle::<f64>::new(tiny(ModelKind::LaNmt, 1.0)).unwrap();
    let id = m.theta.out_bias;
    m.store.get_mut(id).value.data_mut()[3] = f64::NAN;
    let pairs = tiny_corpus(4);
    let batch = make_batch(&pairs, &[0, 1], PAD).unwrap();
    let mut t = Trainer::new(&m, TrainConfig { max_nonfinite: 3, ..Default::default() }).unwrap();
    assert!(t.train_step(&mut m, &batch, &batch).is_ok());
    assert!(t.train_step(&mut m, &batch, &batch).is_ok());
    assert!(matches!(t.train_step(&mut m, &batch, &batch), Err(Error::NonFinite(_))));
}

#[test]
fn empty_corpora_are_rejected() {
    let mut m = ModelBundle::<f64>::new(tiny(ModelKind::LaNmt, 1.0)).unwrap();
    let pairs = tiny_corpus(4);
    let empty = TrainData::plain(Vec::new(), pairs.clone());
    assert!(train(&mut m, &empty, &TrainConfig::default()).is_err());
    let no_valid = TrainData::plain(pairs, Vec::new());
    assert!(train(&mut m, &no_valid, &TrainConfig::default()).is_err());
}
