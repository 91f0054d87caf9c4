//! Run configuration: INI sections flattened to `section.key` settings,
//! overlaid with `--set` overrides and dedicated flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use laddernat::data::{CorpusSpec, LengthRule};
use laddernat::models::{LatentConfig, ModelConfig, ModelKind};
use laddernat::nn::BlockConfig;
use laddernat::training::TrainConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.dtype", "f32"),
    ("corpus.source_vocab", "64"),
    ("corpus.target_vocab", "64"),
    ("corpus.pairs", "10000"),
    ("corpus.min_len", "4"),
    ("corpus.max_len", "16"),
    ("corpus.registers", "1"),
    ("corpus.length_rule", "identity"),
    ("corpus.source_pool", "none"),
    ("corpus.valid_fraction", "0.1"),
    ("corpus.test_fraction", "0.1"),
    ("model.d_model", "64"),
    ("model.heads", "4"),
    ("model.ffn_dim", "128"),
    ("model.layers", "2"),
    ("model.dropout", "0.1"),
    ("model.max_positions", "64"),
    ("model.t_z", "16"),
    ("model.d_z", "32"),
    ("model.rho", "1.0"),
    ("model.posterior_layers", "1"),
    ("at.lr_peak", "0.002"),
    ("at.warmup", "200"),
    ("at.batch_size", "32"),
    ("at.max_steps", "3000"),
    ("at.patience", "5"),
    ("at.validate_every", "200"),
    ("at.label_smoothing", "0.1"),
    ("at.clip_norm", "1.0"),
    ("at.max_valid", "200"),
    ("train.beta", "1.0"),
    ("train.lr_peak", "0.003"),
    ("train.warmup", "200"),
    ("train.batch_size", "32"),
    ("train.max_steps", "1500"),
    ("train.patience", "5"),
    ("train.validate_every", "200"),
    ("train.reuse_noise", "true"),
    ("train.clip_norm", "1.0"),
    ("train.valid_refinements", "0"),
    ("train.max_valid", "200"),
    ("train.max_nonfinite", "5"),
    ("train.kd", "true"),
    ("eval.refinements", "0,1,3"),
    ("eval.batch", "64"),
    ("analysis.cca_k", "16"),
    ("analysis.fit_rows", "100000"),
    ("analysis.probe_pairs", "100"),
    ("analysis.trials", "100"),
    ("analysis.words_changed", "1,2,3"),
    ("analysis.purity_k", "5"),
    ("analysis.pca_dims", "2"),
    ("bench.lengths", "8,16,32"),
    ("bench.sentences", "20"),
    ("bench.refinements", "3"),
];

/// Scalar type the models run in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub refinements: Vec<usize>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct AnalysisSettings {
    pub cca_k: usize,
    /// Training pairs the CCA is fitted on, capped at the split size. A small
    /// fit set overfits the T_z·D_z-wide latents.
    pub fit_rows: usize,
    /// Test pairs probed for relative sensitivity.
    pub probe_pairs: usize,
    pub trials: usize,
    pub words_changed: Vec<usize>,
    pub purity_k: usize,
    pub pca_dims: usize,
}

#[derive(Clone, Debug)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub sentences: usize,
    pub refinements: usize,
}

/// Fully resolved settings of one run.
#[derive(Clone, Debug)]
pub struct Config {
    pub seed: u64,
    pub dtype: Dtype,
    pub corpus: CorpusSpec,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub block: BlockConfig,
    pub latent: LatentConfig,
    pub posterior_layers: usize,
    pub at: TrainConfig,
    pub train: TrainConfig,
    /// Train latent models on the distilled corpora when they exist.
    pub kd: bool,
    pub eval: EvalSettings,
    pub analysis: AnalysisSettings,
    pub bench: BenchSettings,
    settings: BTreeMap<String, String>,
}

/// Accumulates settings before they are parsed.
#[derive(Clone, Debug)]
pub struct ConfigBuilder {
    settings: BTreeMap<String, String>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        ConfigBuilder {
            settings: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ConfigBuilder {
    /// Reads an INI file; keys outside a known `[section]` are rejected.
    pub fn file(mut self, path: &Path) -> Result<Self, CliError> {
        let ini = ini::Ini::load_from_file(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let full = match section {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                self = self.set(&full, value)?;
            }
        }
        Ok(self)
    }

    pub fn set(mut self, key: &str, value: &str) -> Result<Self, CliError> {
        match self.settings.get_mut(key) {
            Some(slot) => *slot = value.trim().to_string(),
            None => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(self)
    }

    /// Applies a `section.key=value` override.
    pub fn assign(self, pair: &str) -> Result<Self, CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn build(self) -> Result<Config, CliError> {
        Config::parse(self.settings)
    }
}

fn get<T: FromStr>(s: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let raw = &s[key];
    raw.parse()
        .map_err(|_| CliError::Config(format!("config key `{key}` has invalid value `{raw}`")))
}

fn list(s: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>, CliError> {
    let raw = &s[key];
    let out: Result<Vec<usize>, _> = raw.split(',').map(|t| t.trim().parse()).collect();
    match out {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Config(format!("config key `{key}` needs a comma-separated list, got `{raw}`"))),
    }
}

fn length_rule(raw: &str) -> Option<LengthRule> {
    if raw == "identity" {
        return Some(LengthRule::Identity);
    }
    raw.strip_prefix("dup:")?.parse().ok().map(LengthRule::DuplicateEvery)
}

impl Config {
    pub fn builder() -> ConfigBuilder {
        ConfigBuilder::default()
    }

    fn parse(s: BTreeMap<String, String>) -> Result<Config, CliError> {
        let seed: u64 = get(&s, "run.seed")?;
        let dtype = match s["run.dtype"].as_str() {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(CliError::Config(format!("config key `run.dtype` must be f32 or f64, got `{other}`"))),
        };
        let rule = length_rule(&s["corpus.length_rule"]).ok_or_else(|| {
            CliError::Config(format!(
                "config key `corpus.length_rule` must be `identity` or `dup:<k>`, got `{}`",
                s["corpus.length_rule"]
            ))
        })?;
        let source_pool = match s["corpus.source_pool"].as_str() {
            "none" => None,
            _ => Some(get(&s, "corpus.source_pool")?),
        };
        let corpus = CorpusSpec {
            source_vocab: get(&s, "corpus.source_vocab")?,
            target_vocab: get(&s, "corpus.target_vocab")?,
            pairs: get(&s, "corpus.pairs")?,
            min_len: get(&s, "corpus.min_len")?,
            max_len: get(&s, "corpus.max_len")?,
            registers: get(&s, "corpus.registers")?,
            length_rule: rule,
            source_pool,
            seed,
        };
        let block = BlockConfig {
            d_model: get(&s, "model.d_model")?,
            heads: get(&s, "model.heads")?,
            ffn_dim: get(&s, "model.ffn_dim")?,
            layers: get(&s, "model.layers")?,
            dropout: get(&s, "model.dropout")?,
            max_positions: get(&s, "model.max_positions")?,
        };
        let rho: f64 = get(&s, "model.rho")?;
        let latent = LatentConfig {
            t_z: get(&s, "model.t_z")?,
            d_z: get(&s, "model.d_z")?,
            rho,
        };
        let at = TrainConfig {
            lr_peak: get(&s, "at.lr_peak")?,
            warmup: get(&s, "at.warmup")?,
            batch_size: get(&s, "at.batch_size")?,
            max_steps: get(&s, "at.max_steps")?,
            patience: get(&s, "at.patience")?,
            validate_every: get(&s, "at.validate_every")?,
            label_smoothing: get(&s, "at.label_smoothing")?,
            clip_norm: get(&s, "at.clip_norm")?,
            max_valid: get(&s, "at.max_valid")?,
            seed,
            ..TrainConfig::default()
        };
        let train = TrainConfig {
            beta: get(&s, "train.beta")?,
            rho,
            lr_peak: get(&s, "train.lr_peak")?,
            warmup: get(&s, "train.warmup")?,
            batch_size: get(&s, "train.batch_size")?,
            max_steps: get(&s, "train.max_steps")?,
            patience: get(&s, "train.patience")?,
            validate_every: get(&s, "train.validate_every")?,
            reuse_noise: get(&s, "train.reuse_noise")?,
            clip_norm: get(&s, "train.clip_norm")?,
            valid_refinements: get(&s, "train.valid_refinements")?,
            max_valid: get(&s, "train.max_valid")?,
            max_nonfinite: get(&s, "train.max_nonfinite")?,
            seed,
            ..TrainConfig::default()
        };
        let cfg = Config {
            seed,
            dtype,
            corpus,
            valid_fraction: get(&s, "corpus.valid_fraction")?,
            test_fraction: get(&s, "corpus.test_fraction")?,
            block,
            latent,
            posterior_layers: get(&s, "model.posterior_layers")?,
            at,
            train,
            kd: get(&s, "train.kd")?,
            eval: EvalSettings {
                refinements: list(&s, "eval.refinements")?,
                batch: get(&s, "eval.batch")?,
            },
            analysis: AnalysisSettings {
                cca_k: get(&s, "analysis.cca_k")?,
                fit_rows: get(&s, "analysis.fit_rows")?,
                probe_pairs: get(&s, "analysis.probe_pairs")?,
                trials: get(&s, "analysis.trials")?,
                words_changed: list(&s, "analysis.words_changed")?,
                purity_k: get(&s, "analysis.purity_k")?,
                pca_dims: get(&s, "analysis.pca_dims")?,
            },
            bench: BenchSettings {
                lengths: list(&s, "bench.lengths")?,
                sentences: get(&s, "bench.sentences")?,
                refinements: get(&s, "bench.refinements")?,
            },
            settings: s,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let named = |section: &str, e: laddernat::Error| CliError::Config(format!("[{section}] {e}"));
        self.corpus
            .validate(self.block.max_positions)
            .map_err(|e| named("corpus", e))?;
        self.model_config(ModelKind::LadderNmt)
            .validate()
            .map_err(|e| named("model", e))?;
        self.at.validate().map_err(|e| named("at", e))?;
        self.train.validate().map_err(|e| named("train", e))?;
        let fractions = self.valid_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&fractions) || self.valid_fraction <= 0.0 || self.test_fraction <= 0.0 {
            return Err(CliError::Config(
                "config keys `corpus.valid_fraction` and `corpus.test_fraction` must be positive and sum below 1".into(),
            ));
        }
        let a = &self.analysis;
        for (key, v) in [
            ("analysis.cca_k", a.cca_k),
            ("analysis.fit_rows", a.fit_rows),
            ("analysis.probe_pairs", a.probe_pairs),
            ("analysis.trials", a.trials),
            ("analysis.purity_k", a.purity_k),
            ("analysis.pca_dims", a.pca_dims),
            ("eval.batch", self.eval.batch),
            ("bench.sentences", self.bench.sentences),
        ] {
            if v == 0 {
                return Err(CliError::Config(format!("config key `{key}` must be positive")));
            }
        }
        if let Some(&l) = self.bench.lengths.iter().find(|&&l| l == 0 || l > self.block.max_positions) {
            return Err(CliError::Config(format!(
                "config key `bench.lengths` has length {l} outside [1, model.max_positions]"
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            block: self.block.clone(),
            latent: self.latent.clone(),
            vocab: self.corpus.joint_vocab(),
            posterior_layers: self.posterior_layers,
            seed: self.seed,
        }
    }

    /// Resolved settings as sorted `section.key=value` lines.
    pub fn canonical(&self) -> String {
        self.settings.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Config::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..8])
    }
}
