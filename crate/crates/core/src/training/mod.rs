//! Objectives and the training loop.
//!
//! All losses are in minimisation form and averaged per sentence: summed
//! over tokens and latent coordinates, divided by the batch size.

mod optim;

pub use optim::{lr_schedule, Adam};

use std::fmt::Write as _;
use std::ops::Add;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{batch, Batch, ParallelPair, EOS, PAD};
use crate::error::{Error, Result};
use crate::inference::bleu;
use crate::latent::{kl_vars, reparameterize_vars, GaussianVars, Side};
use crate::models::{offset_class, Direction, LadderEncodings, ModelBundle, ModelKind};
use crate::nn::SeqBatch;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// KL coefficient.
    pub beta: f64,
    /// Sharing ratio; must match the bundle's.
    pub rho: f64,
    pub lr_peak: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub validate_every: usize,
    /// Use one noise draw for both reconstructions of a dual step.
    pub reuse_noise: bool,
    /// Applied to the autoregressive model only.
    pub label_smoothing: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub valid_refinements: usize,
    /// Cap on validation sentences per direction.
    pub max_valid: usize,
    /// Abort after this many consecutive non-finite steps.
    pub max_nonfinite: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            rho: 1.0,
            lr_peak: 1e-3,
            warmup: 200,
            batch_size: 32,
            max_steps: 2000,
            patience: 5,
            seed: 0,
            validate_every: 200,
            reuse_noise: true,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            valid_refinements: 0,
            max_valid: 200,
            max_nonfinite: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.beta >= 0.0 && self.beta.is_finite(), "beta"),
            ((0.0..=1.0).contains(&self.rho), "rho"),
            (self.lr_peak > 0.0 && self.lr_peak.is_finite(), "lr_peak"),
            (self.warmup >= 1, "warmup"),
            (self.batch_size >= 1, "batch_size"),
            (self.patience >= 1, "patience"),
            (self.validate_every >= 1, "validate_every"),
            ((0.0..1.0).contains(&self.label_smoothing), "label_smoothing"),
            (self.clip_norm >= 0.0, "clip_norm"),
            (self.max_valid >= 1, "max_valid"),
            (self.max_nonfinite >= 1, "max_nonfinite"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, key)) => Err(Error::invalid(format!("training option `{key}` is out of range"))),
            None => Ok(()),
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_schedule(step, self.lr_peak, self.warmup)
    }
}

/// Per-sentence loss terms. `total = -(token_ll + length_ll) + beta * kl`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub token_ll: f64,
    pub length_ll: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self, beta: f64) -> f64 {
        -(self.token_ll + self.length_ll) + beta * self.kl
    }

    fn scaled(self, c: f64) -> Self {
        LossBreakdown {
            token_ll: self.token_ll * c,
            length_ll: self.length_ll * c,
            kl: self.kl * c,
            total: self.total * c,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.token_ll, self.length_ll, self.kl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl Add for LossBreakdown {
    type Output = LossBreakdown;

    fn add(self, o: LossBreakdown) -> LossBreakdown {
        LossBreakdown {
            token_ll: self.token_ll + o.token_ll,
            length_ll: self.length_ll + o.length_ll,
            kl: self.kl + o.kl,
            total: self.total + o.total,
        }
    }
}

/// Which sentence a supervised LadderNMT term reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recon {
    /// Rebuild `x` from `(Z, y)` with the reverse model.
    Source,
    /// Rebuild `y` from `(Z, x)` with the forward model.
    Target,
}

/// Standard normal noise shaped like a latent batch `[B, T_z, D_z]`.
pub fn latent_noise<S: Scalar>(bundle: &ModelBundle<S>, batch: usize, rng: &mut impl Rng) -> Tensor<S> {
    let shape = vec![batch, bundle.t_z(), bundle.config.latent.d_z];
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_parts(shape, data)
}

struct Terms {
    token_nll: Var,
    length_nll: Var,
    kl: Var,
}

fn token_nll<S: Scalar>(g: &mut Graph<'_, S>, logits: Var, y: &SeqBatch, smoothing: f64) -> Result<Var> {
    let w = S::of(1.0 / y.batch_size() as f64);
    let targets: Vec<usize> = y.ids.iter().map(|&t| t as usize).collect();
    let weights: Vec<S> = y.mask().iter().map(|&m| if m { w } else { S::zero() }).collect();
    g.cross_entropy(logits, &targets, &weights, smoothing)
}

fn length_nll<S: Scalar>(g: &mut Graph<'_, S>, logits: Var, src_lens: &[usize], tgt_lens: &[usize]) -> Result<Var> {
    let w = S::of(1.0 / src_lens.len() as f64);
    let targets: Vec<usize> = src_lens.iter().zip(tgt_lens).map(|(&s, &t)| offset_class(s, t)).collect();
    g.cross_entropy(logits, &targets, &vec![w; targets.len()], 0.0)
}

fn kl_per_sentence<S: Scalar>(g: &mut Graph<'_, S>, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let b = g.shape(q.mean)[0];
    let kl = kl_vars(g, q, p)?;
    let s = g.sum(kl);
    Ok(g.scale(s, S::of(1.0 / b as f64)))
}

fn finish<S: Scalar>(g: &mut Graph<'_, S>, t: Terms, beta: f64) -> Result<(Var, LossBreakdown)> {
    let nll = g.add(t.token_nll, t.length_nll)?;
    let kl = g.scale(t.kl, S::of(beta));
    let loss = g.add(nll, kl)?;
    let item = |v: Var| g.value(v).item().as_f64();
    Ok((
        loss,
        LossBreakdown {
            token_ll: -item(t.token_nll),
            length_ll: -item(t.length_nll),
            kl: item(t.kl),
            total: item(loss),
        },
    ))
}

/// Negative ELBO of the LaNMT baseline in direction `d`, where `x` is the
/// input and `y` the output language of that direction.
pub fn elbo_lanmt<S: Scalar>(
    g: &mut Graph<'_, S>,
    bundle: &ModelBundle<S>,
    d: Direction,
    x: &SeqBatch,
    y: &SeqBatch,
    beta: f64,
    noise: Tensor<S>,
) -> Result<(Var, LossBreakdown)> {
    if bundle.kind() != ModelKind::LaNmt {
        return Err(Error::invalid("elbo_lanmt needs a LaNMT bundle"));
    }
    let m = bundle.dir(d);
    let (h, prior) = bundle.prior(g, d, x)?;
    let q = bundle.posterior_lanmt(g, d, x, y)?;
    let z = reparameterize_vars(g, q, noise)?;
    let len_logits = m.predict_length(g, z, h, &x.lens)?;
    let logits = m.decode_latent(g, &bundle.positions, z, h, &x.lens, &y.lens)?;
    let terms = Terms {
        token_nll: token_nll(g, logits, y, 0.0)?,
        length_nll: length_nll(g, len_logits, &x.lens, &y.lens)?,
        kl: kl_per_sentence(g, q, prior)?,
    };
    finish(g, terms, beta)
}

fn ladder_recon<S: Scalar>(
    g: &mut Graph<'_, S>,
    bundle: &ModelBundle<S>,
    enc: &LadderEncodings,
    x: &SeqBatch,
    y: &SeqBatch,
    recon: Recon,
    q: GaussianVars,
    z: Var,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let (m, memory, mem_lens, out, prior) = match recon {
        Recon::Source => (&bundle.phi, enc.h_y, &y.lens, x, enc.q_y),
        Recon::Target => (&bundle.theta, enc.h_x, &x.lens, y, enc.q_x),
    };
    let len_logits = m.predict_length(g, z, memory, mem_lens)?;
    let logits = m.decode_latent(g, &bundle.positions, z, memory, mem_lens, &out.lens)?;
    let terms = Terms {
        token_nll: token_nll(g, logits, out, 0.0)?,
        length_nll: length_nll(g, len_logits, mem_lens, &out.lens)?,
        kl: kl_per_sentence(g, q, prior)?,
    };
    finish(g, terms, beta)
}

fn keep_side(recon: Recon) -> Side {
    match recon {
        Recon::Source => Side::X,
        Recon::Target => Side::Y,
    }
}

fn ensure_ladder<S: Scalar>(bundle: &ModelBundle<S>) -> Result<()> {
    if bundle.kind() != ModelKind::LadderNmt {
        return Err(Error::invalid("this objective needs a LadderNMT bundle"));
    }
    Ok(())
}

/// One supervised LadderNMT term: reconstruct one side from the
/// collaborative posterior and the other sentence, with the KL taken
/// against the other encoder's head.
pub fn elbo_ladder_sup<S: Scalar>(
    g: &mut Graph<'_, S>,
    bundle: &ModelBundle<S>,
    x: &SeqBatch,
    y: &SeqBatch,
    recon: Recon,
    beta: f64,
    noise: Tensor<S>,
) -> Result<(Var, LossBreakdown)> {
    ensure_ladder(bundle)?;
    let enc = bundle.ladder_encode(g, x, y)?;
    let q = bundle.ladder_posterior(g, &enc, keep_side(recon))?;
    let z = reparameterize_vars(g, q, noise)?;
    ladder_recon(g, bundle, &enc, x, y, recon, q, z, beta)
}

/// Both reconstructions of a dual step on one graph.
pub struct DualLoss {
    pub loss: Var,
    pub source: LossBreakdown,
    pub target: LossBreakdown,
    pub z_source: Var,
    pub z_target: Var,
}

/// Encodes once, samples `Z` once and uses it for both reconstructions.
/// With `target_noise` set, the target side draws its own sample instead.
pub fn dual_losses<S: Scalar>(
    g: &mut Graph<'_, S>,
    bundle: &ModelBundle<S>,
    x: &SeqBatch,
    y: &SeqBatch,
    beta: f64,
    noise: Tensor<S>,
    target_noise: Option<Tensor<S>>,
) -> Result<DualLoss> {
    ensure_ladder(bundle)?;
    let enc = bundle.ladder_encode(g, x, y)?;
    let q_src = bundle.ladder_posterior(g, &enc, Side::X)?;
    let q_tgt = bundle.ladder_posterior(g, &enc, Side::Y)?;
    let z_source = reparameterize_vars(g, q_src, noise.clone())?;
    let z_target = match target_noise {
        Some(n) => reparameterize_vars(g, q_tgt, n)?,
        None if bundle.mask.all_shared() => z_source,
        None => reparameterize_vars(g, q_tgt, noise)?,
    };
    let (l_src, source) = ladder_recon(g, bundle, &enc, x, y, Recon::Source, q_src, z_source, beta)?;
    let (l_tgt, target) = ladder_recon(g, bundle, &enc, x, y, Recon::Target, q_tgt, z_target, beta)?;
    let loss = g.add(l_src, l_tgt)?;
    Ok(DualLoss {
        loss,
        source,
        target,
        z_source,
        z_target,
    })
}

/// Teacher-forced loss of the autoregressive model in direction `d`.
pub fn at_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    bundle: &ModelBundle<S>,
    d: Direction,
    x: &SeqBatch,
    y: &SeqBatch,
    smoothing: f64,
) -> Result<(Var, LossBreakdown)> {
    if bundle.kind() != ModelKind::At {
        return Err(Error::invalid("at_loss needs an autoregressive bundle"));
    }
    let rows: Vec<&[u32]> = (0..y.batch_size()).map(|b| y.row(b)).collect();
    let prefix: Vec<Vec<u32>> = rows.iter().map(|r| [&[EOS], *r].concat()).collect();
    let target: Vec<Vec<u32>> = rows.iter().map(|r| [*r, &[EOS]].concat()).collect();
    let (prefix, target) = (SeqBatch::new(&prefix, PAD)?, SeqBatch::new(&target, PAD)?);
    let m = bundle.dir(d);
    let h = m.encode(g, &bundle.positions, x)?;
    let logits = m.decode_prefix(g, &bundle.positions, &prefix, h, &x.lens)?;
    let nll = token_nll(g, logits, &target, smoothing)?;
    let token_ll = -g.value(nll).item().as_f64();
    Ok((
        nll,
        LossBreakdown {
            token_ll,
            total: -token_ll,
            ..LossBreakdown::default()
        },
    ))
}

fn joined(a: &SeqBatch, b: &SeqBatch) -> Result<SeqBatch> {
    let rows: Vec<&[u32]> = (0..a.batch_size())
        .map(|i| a.row(i))
        .chain((0..b.batch_size()).map(|i| b.row(i)))
        .collect();
    SeqBatch::new(&rows, PAD)
}

/// Owns the optimiser state and randomness of a training run.
pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub opt: Adam<S>,
    pub step: usize,
    noise_rng: ChaCha8Rng,
    nonfinite_streak: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(bundle: &ModelBundle<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if bundle.kind().is_latent() && (bundle.config.latent.rho - config.rho).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "training rho {} differs from the bundle's {}",
                config.rho, bundle.config.latent.rho
            )));
        }
        Ok(Trainer {
            opt: Adam::new(&bundle.store),
            step: 0,
            noise_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            nonfinite_streak: 0,
            config,
        })
    }

    fn noise(&mut self, bundle: &ModelBundle<S>, batch: usize) -> Tensor<S> {
        latent_noise(bundle, batch, &mut self.noise_rng)
    }

    /// Runs `build` on a training graph, backpropagates and updates. A
    /// non-finite loss or gradient skips the update; too many in a row abort.
    fn update<F>(&mut self, bundle: &mut ModelBundle<S>, build: F) -> Result<LossBreakdown>
    where
        F: for<'a> FnOnce(&mut Graph<'a, S>, &ModelBundle<S>) -> Result<(Var, LossBreakdown)>,
    {
        self.step += 1;
        let lr = self.config.lr(self.step);
        let seed = self.config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(self.step as u64);
        let (parts, grads) = {
            let mut g = Graph::with_params(&bundle.store, Mode::Train).seed(seed);
            let (loss, parts) = build(&mut g, bundle)?;
            if !parts.is_finite() {
                (parts, None)
            } else {
                let grads = g.backward(loss)?;
                let owned: Vec<_> = grads.params().into_iter().map(|(p, v)| (p, v.to_vec())).collect();
                (parts, Some(owned))
            }
        };
        let applied = match grads {
            Some(grads) => {
                let refs: Vec<_> = grads.iter().map(|(p, v)| (*p, v.as_slice())).collect();
                match self.opt.step(&mut bundle.store, &refs, lr, self.config.clip_norm) {
                    Ok(_) => true,
                    Err(Error::NonFinite(_)) => false,
                    Err(e) => return Err(e),
                }
            }
            None => false,
        };
        if applied {
            self.nonfinite_streak = 0;
        } else {
            self.nonfinite_streak += 1;
            log::warn!("step {}: non-finite loss or gradient, update skipped", self.step);
            if self.nonfinite_streak >= self.config.max_nonfinite {
                return Err(Error::NonFinite(format!(
                    "training loss: {} consecutive non-finite steps ending at step {} (lr {lr:.3e}, last {parts:?})",
                    self.nonfinite_streak, self.step
                )));
            }
        }
        bundle.trained_steps += 1;
        Ok(parts)
    }

    /// LadderNMT update on paired sentences: one shared latent sample for
    /// both reconstructions, one optimiser step over both directions.
    pub fn dual_step(&mut self, bundle: &mut ModelBundle<S>, b: &Batch) -> Result<LossBreakdown> {
        let noise = self.noise(bundle, b.src.batch_size());
        let target_noise = (!self.config.reuse_noise).then(|| self.noise(bundle, b.src.batch_size()));
        let beta = self.config.beta;
        self.update(bundle, |g, m| {
            let d = dual_losses(g, m, &b.src, &b.tgt, beta, noise, target_noise)?;
            Ok((d.loss, d.source + d.target))
        })
    }

    /// One step on a forward-stream batch and a reverse-stream batch. Both
    /// hold source-language sentences in `src`.
    pub fn train_step(&mut self, bundle: &mut ModelBundle<S>, fwd: &Batch, rev: &Batch) -> Result<LossBreakdown> {
        let beta = self.config.beta;
        match bundle.kind() {
            ModelKind::LadderNmt => {
                let both = Batch {
                    src: joined(&fwd.src, &rev.src)?,
                    tgt: joined(&fwd.tgt, &rev.tgt)?,
                    indices: Vec::new(),
                };
                self.dual_step(bundle, &both)
            }
            ModelKind::LaNmt => {
                let n_f = self.noise(bundle, fwd.src.batch_size());
                let n_r = self.noise(bundle, rev.src.batch_size());
                self.update(bundle, |g, m| {
                    let (a, pa) = elbo_lanmt(g, m, Direction::Forward, &fwd.src, &fwd.tgt, beta, n_f)?;
                    let (b, pb) = elbo_lanmt(g, m, Direction::Reverse, &rev.tgt, &rev.src, beta, n_r)?;
                    Ok((g.add(a, b)?, pa + pb))
                })
            }
            ModelKind::At => {
                let s = self.config.label_smoothing;
                self.update(bundle, |g, m| {
                    let (a, pa) = at_loss(g, m, Direction::Forward, &fwd.src, &fwd.tgt, s)?;
                    let (b, pb) = at_loss(g, m, Direction::Reverse, &rev.tgt, &rev.src, s)?;
                    Ok((g.add(a, b)?, pa + pb))
                })
            }
        }
    }
}

/// Endless shuffled batches over a corpus; each epoch reshuffles.
struct Stream<'a> {
    pairs: &'a [ParallelPair],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<Batch>,
}

impl<'a> Stream<'a> {
    fn new(pairs: &'a [ParallelPair], batch_size: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        Ok(Stream {
            pairs,
            batch_size,
            seed,
            epoch: 0,
            queue: Vec::new(),
        })
    }

    fn next(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            let seed = self.seed.wrapping_add(self.epoch.wrapping_mul(0x1000_0000_01b3));
            self.queue = batch(self.pairs, self.batch_size, PAD, seed)?;
            self.queue.reverse();
            self.epoch += 1;
        }
        Ok(self.queue.pop().expect("refilled above"))
    }
}

/// Training corpora. `forward` pairs feed the source-to-target direction and
/// `reverse` pairs the target-to-source one; both keep the source language
/// first. Without distillation both are the original corpus.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub forward: Vec<ParallelPair>,
    pub reverse: Vec<ParallelPair>,
    pub valid: Vec<ParallelPair>,
}

impl TrainData {
    pub fn plain(train: Vec<ParallelPair>, valid: Vec<ParallelPair>) -> Self {
        TrainData {
            reverse: train.clone(),
            forward: train,
            valid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    /// Mean over the steps since the previous row.
    pub loss: LossBreakdown,
    pub valid_bleu_fwd: f64,
    pub valid_bleu_rev: f64,
}

impl MetricsRow {
    fn score(&self) -> f64 {
        (self.valid_bleu_fwd + self.valid_bleu_rev) / 2.0
    }
}

pub const METRICS_HEADER: &str = "step,lr,token_ll,length_ll,kl,total,valid_bleu_fwd,valid_bleu_rev";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.lr, r.loss.token_ll, r.loss.length_ll, r.loss.kl, r.loss.total, r.valid_bleu_fwd, r.valid_bleu_rev
        )
        .unwrap();
    }
    out
}

/// Patience counter over validation scores (higher is better).
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            bad: 0,
        }
    }

    /// Records a score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.map_or(true, |b| score > b) {
            self.best = Some(score);
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<MetricsRow>,
    pub steps: usize,
    pub best_step: usize,
    pub best_bleu: f64,
    pub stopped_early: bool,
}

/// Validation BLEU in both directions, on at most `limit` pairs.
pub fn validation_bleu<S: Scalar>(
    bundle: &ModelBundle<S>,
    valid: &[ParallelPair],
    refinements: usize,
    limit: usize,
) -> Result<(f64, f64)> {
    let pairs = &valid[..valid.len().min(limit)];
    if pairs.is_empty() {
        return Err(Error::Empty("validation corpus"));
    }
    let src: Vec<Vec<u32>> = pairs.iter().map(|p| p.source.clone()).collect();
    let tgt: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
    let fwd = bundle.translate_all(Direction::Forward, &src, refinements, 64, 1)?;
    let rev = bundle.translate_all(Direction::Reverse, &tgt, refinements, 64, 1)?;
    Ok((bleu(&fwd, &tgt)?, bleu(&rev, &src)?))
}

/// Trains until `max_steps` or until validation BLEU (mean of both
/// directions) fails to improve for `patience` validations, then restores
/// the best parameters.
pub fn train<S: Scalar>(bundle: &mut ModelBundle<S>, data: &TrainData, config: &TrainConfig) -> Result<TrainReport> {
    let mut trainer = Trainer::new(bundle, config.clone())?;
    // A dual step reconstructs both sides of every pair, so LadderNMT takes
    // half a batch from each stream to match the other models' work.
    let per_stream = match bundle.kind() {
        ModelKind::LadderNmt => config.batch_size.div_ceil(2),
        _ => config.batch_size,
    };
    let mut fwd = Stream::new(&data.forward, per_stream, config.seed)?;
    let mut rev = Stream::new(&data.reverse, per_stream, config.seed.wrapping_add(1))?;
    if data.valid.is_empty() {
        return Err(Error::Empty("validation corpus"));
    }
    let mut log = Vec::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<(usize, crate::tensor::ParamStore<S>)> = None;
    let mut acc = LossBreakdown::default();
    let mut since = 0;
    let mut stopped_early = false;
    for step in 1..=config.max_steps {
        let (bf, br) = (fwd.next()?, rev.next()?);
        acc = acc + trainer.train_step(bundle, &bf, &br)?;
        since += 1;
        if step % config.validate_every != 0 && step != config.max_steps {
            continue;
        }
        let (bleu_f, bleu_r) = validation_bleu(bundle, &data.valid, config.valid_refinements, config.max_valid)?;
        let row = MetricsRow {
            step,
            lr: config.lr(step),
            loss: acc.scaled(1.0 / since as f64),
            valid_bleu_fwd: bleu_f,
            valid_bleu_rev: bleu_r,
        };
        log::info!(
            "{} step {step}: loss {:.4} kl {:.4} bleu {bleu_f:.4}/{bleu_r:.4}",
            bundle.kind(),
            row.loss.total,
            row.loss.kl
        );
        let score = row.score();
        log.push(row);
        acc = LossBreakdown::default();
        since = 0;
        if stopper.observe(score) {
            best = Some((step, bundle.store.clone()));
        } else if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    let steps = trainer.step;
    let best_bleu = stopper.best().unwrap_or(0.0);
    let best_step = match best {
        Some((step, store)) => {
            bundle.store.copy_values_from(&store)?;
            step
        }
        None => steps,
    };
    bundle.trained_steps = best_step;
    Ok(TrainReport {
        log,
        steps,
        best_step,
        best_bleu,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
