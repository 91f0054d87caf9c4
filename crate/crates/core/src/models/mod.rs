//! The three model families: an autoregressive reference (AT), the LaNMT
//! baseline with its separate posterior network, and LadderNMT, whose
//! posterior is the precision-weighted fusion of the two directions' priors.
//!
//! A bundle always holds both directions: `theta` translates x to y and
//! `phi` translates y to x.

mod direction;

pub use direction::{length_from_class, offset_class, DirectionModel, LengthPredictor, PosteriorNet};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{fuse_shared_vars, make_sharing_mask, select_vars, GaussianVars, SharingMask, Side};
use crate::nn::{sinusoidal_table, BlockConfig, SeqBatch};
use crate::scalar::Scalar;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, Var};

/// Length offsets are classified over `[-MAX_OFFSET, MAX_OFFSET]`.
pub const MAX_OFFSET: i64 = 20;
pub const LENGTH_CLASSES: usize = 2 * MAX_OFFSET as usize + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "at")]
    At,
    #[serde(rename = "lanmt")]
    LaNmt,
    #[serde(rename = "laddernmt")]
    LadderNmt,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::At => "at",
            ModelKind::LaNmt => "lanmt",
            ModelKind::LadderNmt => "laddernmt",
        }
    }

    pub fn is_latent(self) -> bool {
        self != ModelKind::At
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "at" => Ok(ModelKind::At),
            "lanmt" => Ok(ModelKind::LaNmt),
            "laddernmt" | "ladder" => Ok(ModelKind::LadderNmt),
            _ => Err(Error::invalid(format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub t_z: usize,
    pub d_z: usize,
    /// Fraction of latent dimensions fused across languages (LadderNMT).
    pub rho: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            t_z: 16,
            d_z: 32,
            rho: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub block: BlockConfig,
    pub latent: LatentConfig,
    /// Joint vocabulary size, reserved ids included.
    pub vocab: usize,
    /// Encoder and decoder layers of the LaNMT posterior network.
    pub posterior_layers: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, vocab: usize) -> Self {
        ModelConfig {
            kind,
            block: BlockConfig::default(),
            latent: LatentConfig::default(),
            vocab,
            posterior_layers: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.vocab < 4 {
            return Err(Error::invalid(format!("vocab {} too small", self.vocab)));
        }
        if self.latent.t_z == 0 || self.latent.d_z == 0 {
            return Err(Error::invalid("latent sizes must be positive"));
        }
        if self.kind == ModelKind::LaNmt && self.posterior_layers == 0 {
            return Err(Error::invalid("posterior_layers must be positive"));
        }
        make_sharing_mask(self.latent.d_z, self.latent.rho).map(|_| ())
    }
}

/// Translation direction: `Forward` is x to y (theta), `Reverse` is y to x (phi).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }

    /// Language side read by this direction's encoder.
    pub fn source_side(self) -> Side {
        match self {
            Direction::Forward => Side::X,
            Direction::Reverse => Side::Y,
        }
    }

    pub fn target_side(self) -> Side {
        self.flip().source_side()
    }
}

/// Intermediate results of the LadderNMT collaborative posterior.
#[derive(Clone, Copy, Debug)]
pub struct LadderEncodings {
    pub h_x: Var,
    pub h_y: Var,
    /// `p(z | x; theta_e)`.
    pub q_x: GaussianVars,
    /// `p(z | y; phi_e)`.
    pub q_y: GaussianVars,
    /// Precision-weighted fusion on every dimension.
    pub fused: GaussianVars,
}

pub struct ModelBundle<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub theta: DirectionModel,
    pub phi: DirectionModel,
    pub mask: SharingMask,
    pub positions: Tensor<S>,
    /// Optimizer steps behind the current parameters; 0 for a fresh bundle.
    pub trained_steps: usize,
}

impl<S: Scalar> ModelBundle<S> {
    /// Freshly initialised bundle; parameters are drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let theta = DirectionModel::new(&mut store, "theta", &config, &mut rng)?;
        let phi = DirectionModel::new(&mut store, "phi", &config, &mut rng)?;
        let mask = make_sharing_mask(config.latent.d_z, config.latent.rho)?;
        let positions = sinusoidal_table(config.block.max_positions, config.block.d_model);
        Ok(ModelBundle {
            config,
            store,
            theta,
            phi,
            mask,
            positions,
            trained_steps: 0,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn dir(&self, d: Direction) -> &DirectionModel {
        match d {
            Direction::Forward => &self.theta,
            Direction::Reverse => &self.phi,
        }
    }

    pub fn t_z(&self) -> usize {
        self.config.latent.t_z
    }

    /// `(H, p(z | x))` for direction `d`'s input.
    pub fn prior(&self, g: &mut Graph<'_, S>, d: Direction, x: &SeqBatch) -> Result<(Var, GaussianVars)> {
        let m = self.dir(d);
        let h = m.encode(g, &self.positions, x)?;
        let p = m.head(g, h, &x.lens, self.t_z())?;
        Ok((h, p))
    }

    /// LaNMT posterior network of direction `d`; `x` is its input, `y` its output language.
    pub fn posterior_lanmt(
        &self,
        g: &mut Graph<'_, S>,
        d: Direction,
        x: &SeqBatch,
        y: &SeqBatch,
    ) -> Result<GaussianVars> {
        self.dir(d).posterior_net(g, &self.positions, x, y, self.t_z())
    }

    /// Encodes `x` with `theta_e` and `y` with `phi_e` and fuses the two heads.
    /// No other parameters are read.
    pub fn ladder_encode(&self, g: &mut Graph<'_, S>, x: &SeqBatch, y: &SeqBatch) -> Result<LadderEncodings> {
        let (h_x, q_x) = self.prior(g, Direction::Forward, x)?;
        let (h_y, q_y) = self.prior(g, Direction::Reverse, y)?;
        let fused = fuse_shared_vars(g, q_x, q_y)?;
        Ok(LadderEncodings {
            h_x,
            h_y,
            q_x,
            q_y,
            fused,
        })
    }

    /// Collaborative posterior with non-shared dimensions taken from `keep`.
    pub fn ladder_posterior(&self, g: &mut Graph<'_, S>, enc: &LadderEncodings, keep: Side) -> Result<GaussianVars> {
        let kept = match keep {
            Side::X => enc.q_x,
            Side::Y => enc.q_y,
        };
        select_vars(g, enc.fused, kept, &self.mask)
    }

    pub fn posterior_ladder(
        &self,
        g: &mut Graph<'_, S>,
        x: &SeqBatch,
        y: &SeqBatch,
        keep: Side,
    ) -> Result<GaussianVars> {
        let enc = self.ladder_encode(g, x, y)?;
        self.ladder_posterior(g, &enc, keep)
    }

    pub fn param_count(&self) -> ParamCounts {
        ParamCounts::of(&self.store)
    }

    /// Writes `<run_dir>/<kind>/<step>.ckpt` and `<run_dir>/<kind>/manifest.json`.
    pub fn save(&self, run_dir: &Path, step: usize, extra: serde_json::Value) -> Result<PathBuf> {
        let dir = run_dir.join(self.kind().name());
        let path = dir.join(format!("{step}.ckpt"));
        save_checkpoint(&self.store, &path)?;
        let manifest = Manifest {
            config: self.config.clone(),
            dtype: S::DTYPE.to_string(),
            step,
            param_count: self.param_count(),
            extra,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let mpath = dir.join("manifest.json");
        std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
        Ok(path)
    }

    /// Loads a checkpoint written by [`ModelBundle::save`], reading the
    /// configuration from the sibling manifest.
    pub fn load(ckpt: &Path) -> Result<Self> {
        let dir = ckpt.parent().unwrap_or(Path::new("."));
        let manifest = Manifest::read(&dir.join("manifest.json"))?;
        let mut bundle = Self::new(manifest.config)?;
        let stored = load_checkpoint::<S>(ckpt)?;
        bundle.store.copy_values_from(&stored)?;
        bundle.trained_steps = manifest.step;
        Ok(bundle)
    }

    /// Copy of the bundle with the same parameter values.
    pub fn duplicate(&self) -> Result<Self> {
        let mut b = Self::new(self.config.clone())?;
        b.store.copy_values_from(&self.store)?;
        b.trained_steps = self.trained_steps;
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub dtype: String,
    pub step: usize,
    pub param_count: ParamCounts,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Scalar parameter counts per `<side>.<component>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub components: BTreeMap<String, usize>,
}

impl ParamCounts {
    pub const COMPONENTS: [&'static str; 4] = ["enc", "len", "dec", "pos"];

    pub fn of<S: Scalar>(store: &ParamStore<S>) -> Self {
        let mut components = BTreeMap::new();
        for side in ["theta", "phi"] {
            for c in Self::COMPONENTS {
                components.insert(format!("{side}.{c}"), 0);
            }
        }
        for (_, p) in store.iter() {
            let key: String = p.name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            *components.entry(key).or_insert(0) += p.value.numel();
        }
        ParamCounts { components }
    }

    pub fn total(&self) -> usize {
        self.components.values().sum()
    }

    /// Parameters of one component summed over both directions.
    pub fn component(&self, name: &str) -> usize {
        self.components
            .iter()
            .filter(|(k, _)| k.split('.').nth(1) == Some(name))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn posterior(&self) -> usize {
        self.component("pos")
    }
}
