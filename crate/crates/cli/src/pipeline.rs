//! Pipeline stages. Each reads its inputs from and writes its outputs to
//! one run directory:
//!
//! ```text
//! config.ini                  resolved settings
//! data/{train,valid,test}.txt corpus splits, data/corpus.json spec
//! data/kd_{forward,reverse}.txt
//! <kind>/<step>.ckpt          checkpoint, manifest.json, metrics.csv
//! eval.csv  analysis.csv  bench.csv
//! latents_<kind>.csv  pca_<kind>.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use laddernat::analysis::{
    cca_fit, cca_score, collect_latents, knn_purity, latent_csv, pca_project, relative_sensitivity,
};
use laddernat::data::{gen_corpus, kd_regenerate, load_corpus, save_corpus, split_corpus, ParallelPair, FIRST_CONTENT};
use laddernat::inference::{bleu, speed_bench};
use laddernat::latent::Side;
use laddernat::models::{Direction, Manifest, ModelBundle, ModelKind};
use laddernat::training::{metrics_csv, train, TrainConfig, TrainData, TrainReport};
use laddernat::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::Config;
use crate::CliError;

/// Analyses `analyze` can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    All,
    Cca,
    RelativeSensitivity,
    Purity,
    Pca,
    Latents,
}

/// One row of `analysis.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRow {
    pub metric: String,
    pub model: ModelKind,
    pub value: f64,
}

/// One row of `eval.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: ModelKind,
    pub direction: Direction,
    pub refinements: usize,
    pub sentences: usize,
    pub bleu: f64,
}

/// One row of `bench.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: ModelKind,
    pub length: usize,
    pub sentences: usize,
    /// Median seconds per sentence.
    pub seconds: f64,
    /// Autoregressive seconds over this model's seconds.
    pub ratio: f64,
}

pub struct Run {
    pub cfg: Config,
    pub dir: PathBuf,
    pub threads: usize,
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "forward",
        Direction::Reverse => "reverse",
    }
}

impl Run {
    pub fn new(cfg: Config, dir: impl Into<PathBuf>, threads: usize) -> Result<Self, CliError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let run = Run { cfg, dir, threads };
        let text = format!("{}\n{}", run.header(), run.cfg.canonical());
        write(&run.dir.join("config.ini"), &text)?;
        Ok(run)
    }

    /// Comment line opening every CSV and corpus file.
    pub fn header(&self) -> String {
        format!("# config-hash={} seed={}", self.cfg.hash(), self.cfg.seed)
    }

    fn csv(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write(&path, &format!("{}\n{body}", self.header()))?;
        Ok(path)
    }

    fn data(&self, name: &str) -> PathBuf {
        self.dir.join("data").join(name)
    }

    fn split(&self, name: &str) -> Result<Vec<ParallelPair>, CliError> {
        Ok(load_corpus(&self.data(&format!("{name}.txt")))?)
    }

    /// Checkpoint named by `<kind>/manifest.json`.
    pub fn checkpoint(&self, kind: ModelKind) -> Result<PathBuf, CliError> {
        let dir = self.dir.join(kind.name());
        let manifest = Manifest::read(&dir.join("manifest.json"))
            .map_err(|e| CliError::Runtime(format!("no trained {kind} model in {}: {e}", self.dir.display())))?;
        Ok(dir.join(format!("{}.ckpt", manifest.step)))
    }

    pub fn load<S: Scalar>(&self, kind: ModelKind) -> Result<ModelBundle<S>, CliError> {
        Ok(ModelBundle::load(&self.checkpoint(kind)?)?)
    }

    pub fn gen_data(&self) -> Result<(), CliError> {
        let pairs = gen_corpus(&self.cfg.corpus, self.cfg.block.max_positions)?;
        let sp = split_corpus(&pairs, self.cfg.valid_fraction, self.cfg.test_fraction, self.cfg.seed)?;
        let header = [format!("config-hash={} seed={}", self.cfg.hash(), self.cfg.seed)];
        for (name, part) in [("train", &sp.train), ("valid", &sp.valid), ("test", &sp.test)] {
            save_corpus(&self.data(&format!("{name}.txt")), part, &header)?;
        }
        let spec = serde_json::to_string_pretty(&self.cfg.corpus).map_err(laddernat::Error::from)?;
        write(&self.data("corpus.json"), &(spec + "\n"))?;
        log::info!(
            "wrote {} train, {} valid, {} test pairs",
            sp.train.len(),
            sp.valid.len(),
            sp.test.len()
        );
        Ok(())
    }

    fn fit<S: Scalar>(&self, kind: ModelKind, data: &TrainData, tc: &TrainConfig) -> Result<TrainReport, CliError> {
        let mut bundle = ModelBundle::<S>::new(self.cfg.model_config(kind))?;
        let report = train(&mut bundle, data, tc)?;
        let extra = json!({
            "config_hash": self.cfg.hash(),
            "best_bleu": report.best_bleu,
            "steps": report.steps,
        });
        bundle.save(&self.dir, report.best_step, extra)?;
        self.csv(&format!("{}/metrics.csv", kind.name()), &metrics_csv(&report.log))?;
        log::info!(
            "{kind}: {} steps, best validation BLEU {:.4} at step {}",
            report.steps,
            report.best_bleu,
            report.best_step
        );
        Ok(report)
    }

    /// Autoregressive teacher for both directions on the original corpus.
    pub fn train_at<S: Scalar>(&self) -> Result<TrainReport, CliError> {
        let data = TrainData::plain(self.split("train")?, self.split("valid")?);
        let tc = TrainConfig {
            rho: self.cfg.latent.rho,
            ..self.cfg.at.clone()
        };
        self.fit::<S>(ModelKind::At, &data, &tc)
    }

    pub fn kd<S: Scalar>(&self) -> Result<(), CliError> {
        let at = self.load::<S>(ModelKind::At)?;
        let train = self.split("train")?;
        let (fwd, rev) = kd_regenerate(&train, &at, self.cfg.eval.batch, self.threads)?;
        let header = [format!("config-hash={} seed={}", self.cfg.hash(), self.cfg.seed)];
        save_corpus(&self.data("kd_forward.txt"), &fwd, &header)?;
        save_corpus(&self.data("kd_reverse.txt"), &rev, &header)?;
        Ok(())
    }

    /// Training data for a latent model: the distilled streams when
    /// distillation is enabled and has been run, else the original corpus.
    pub fn latent_data(&self) -> Result<TrainData, CliError> {
        let valid = self.split("valid")?;
        let kd = self.data("kd_forward.txt");
        if self.cfg.kd && kd.exists() {
            Ok(TrainData {
                forward: load_corpus(&kd)?,
                reverse: load_corpus(&self.data("kd_reverse.txt"))?,
                valid,
            })
        } else {
            if self.cfg.kd {
                log::warn!("no distilled corpus in {}, training on the original pairs", self.dir.display());
            }
            Ok(TrainData::plain(self.split("train")?, valid))
        }
    }

    pub fn train_latent<S: Scalar>(&self, kind: ModelKind) -> Result<TrainReport, CliError> {
        if !kind.is_latent() {
            return Err(CliError::Config("`train` takes lanmt or laddernmt; use `train-at` for at".into()));
        }
        self.fit::<S>(kind, &self.latent_data()?, &self.cfg.train)
    }

    pub fn translate<S: Scalar>(
        &self,
        kind: ModelKind,
        d: Direction,
        sources: &[Vec<u32>],
        refinements: usize,
    ) -> Result<Vec<Vec<u32>>, CliError> {
        let bundle = self.load::<S>(kind)?;
        Ok(bundle.translate_all(d, sources, refinements, self.cfg.eval.batch, self.threads)?)
    }

    /// Test BLEU of every trained model, both directions, at each
    /// configured refinement count (the autoregressive model once).
    pub fn eval<S: Scalar>(&self) -> Result<Vec<EvalRow>, CliError> {
        let test = self.split("test")?;
        let src: Vec<Vec<u32>> = test.iter().map(|p| p.source.clone()).collect();
        let tgt: Vec<Vec<u32>> = test.iter().map(|p| p.target.clone()).collect();
        let mut rows = Vec::new();
        for kind in [ModelKind::At, ModelKind::LaNmt, ModelKind::LadderNmt] {
            if !self.dir.join(kind.name()).join("manifest.json").exists() {
                continue;
            }
            let bundle = self.load::<S>(kind)?;
            let rounds: &[usize] = if kind.is_latent() { &self.cfg.eval.refinements } else { &[0] };
            for &r in rounds {
                for (d, input, refs) in [(Direction::Forward, &src, &tgt), (Direction::Reverse, &tgt, &src)] {
                    let hyp = bundle.translate_all(d, input, r, self.cfg.eval.batch, self.threads)?;
                    rows.push(EvalRow {
                        model: kind,
                        direction: d,
                        refinements: r,
                        sentences: test.len(),
                        bleu: bleu(&hyp, refs)?,
                    });
                }
            }
        }
        if rows.is_empty() {
            return Err(CliError::Runtime(format!("no trained models in {}", self.dir.display())));
        }
        let mut body = String::from("model,direction,refinements,sentences,bleu\n");
        for r in &rows {
            writeln!(body, "{},{},{},{},{:.6}", r.model, direction_name(r.direction), r.refinements, r.sentences, r.bleu)
                .unwrap();
        }
        self.csv("eval.csv", &body)?;
        Ok(rows)
    }

    pub fn analyze<S: Scalar>(&self, metric: Metric, kinds: &[ModelKind]) -> Result<Vec<AnalysisRow>, CliError> {
        let a = &self.cfg.analysis;
        let wants = |m: Metric| metric == Metric::All || metric == m;
        let train = self.split("train")?;
        let test = self.split("test")?;
        let mut rows = Vec::new();
        for &kind in kinds {
            if !kind.is_latent() {
                return Err(CliError::Config(format!("cannot analyze the latent space of {kind}")));
            }
            let bundle = self.load::<S>(kind)?;
            let mut push = |metric: String, value: f64| rows.push(AnalysisRow { metric, model: kind, value });
            let (tx, ty) = (collect_latents(&bundle, &test, Side::X)?, collect_latents(&bundle, &test, Side::Y)?);
            if wants(Metric::Cca) {
                let fit = &train[..train.len().min(a.fit_rows)];
                let (fx, fy) = (collect_latents(&bundle, fit, Side::X)?, collect_latents(&bundle, fit, Side::Y)?);
                let model = cca_fit(&fx, &fy, a.cca_k)?;
                push("cca-score".into(), cca_score(&model, &tx, &ty)?);
                push("cca-train-score".into(), cca_score(&model, &fx, &fy)?);
                push(
                    "cca-mean-correlation".into(),
                    model.correlations.iter().sum::<f64>() / model.k as f64,
                );
            }
            if wants(Metric::RelativeSensitivity) {
                let probe = &test[..test.len().min(a.probe_pairs)];
                let mut logs = 0.0;
                for &w in &a.words_changed {
                    let r = relative_sensitivity(&bundle, probe, w, a.trials, self.cfg.seed)?;
                    logs += r.ln();
                    push(format!("relative-sensitivity-w{w}"), r);
                }
                push("relative-sensitivity".into(), (logs / a.words_changed.len() as f64).exp());
            }
            if wants(Metric::Purity) {
                push("knn-purity".into(), knn_purity(&tx, &ty, a.purity_k)?);
            }
            if wants(Metric::Pca) {
                let p = pca_project(&tx, &ty, a.pca_dims)?;
                self.csv(&format!("pca_{}.csv", kind.name()), &p.to_csv())?;
                for (i, e) in p.explained.iter().enumerate() {
                    push(format!("pca-explained-{}", i + 1), *e);
                }
            }
            if wants(Metric::Latents) {
                self.csv(&format!("latents_{}.csv", kind.name()), &latent_csv(&tx, &ty))?;
            }
        }
        let mut body = String::from("metric,model,value,seed,config-hash\n");
        for r in &rows {
            writeln!(body, "{},{},{:.6},{},{}", r.metric, r.model, r.value, self.cfg.seed, self.cfg.hash()).unwrap();
        }
        self.csv("analysis.csv", &body)?;
        Ok(rows)
    }

    /// Random source sentences of exactly `len` content tokens.
    pub fn bench_sources(&self, len: usize) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ len as u64);
        let top = self.cfg.corpus.source_vocab as u32;
        (0..self.cfg.bench.sentences)
            .map(|_| (0..len).map(|_| rng.gen_range(FIRST_CONTENT..top)).collect())
            .collect()
    }

    /// Per-sentence decoding time of each model against the
    /// autoregressive one, at batch size 1, per length bucket.
    pub fn bench<S: Scalar>(&self, kinds: &[ModelKind]) -> Result<Vec<BenchRow>, CliError> {
        let at = self.load::<S>(ModelKind::At)?;
        let models = kinds
            .iter()
            .filter(|k| k.is_latent())
            .map(|&k| Ok((k, self.load::<S>(k)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut rows = Vec::new();
        for &len in &self.cfg.bench.lengths {
            let sources = self.bench_sources(len);
            for (kind, m) in &models {
                let rep = speed_bench(m, &at, Direction::Forward, &sources, self.cfg.bench.refinements)?;
                if rows.iter().all(|r: &BenchRow| r.model != ModelKind::At || r.length != len) {
                    rows.push(BenchRow {
                        model: ModelKind::At,
                        length: len,
                        sentences: rep.sentences,
                        seconds: rep.at_seconds,
                        ratio: 1.0,
                    });
                }
                rows.push(BenchRow {
                    model: *kind,
                    length: len,
                    sentences: rep.sentences,
                    seconds: rep.nat_seconds,
                    ratio: rep.ratio,
                });
            }
        }
        let mut body = String::from("model,length-bucket,sentences,seconds,ratio\n");
        for r in &rows {
            writeln!(body, "{},{},{},{:.6e},{:.4}", r.model, r.length, r.sentences, r.seconds, r.ratio).unwrap();
        }
        self.csv("bench.csv", &body)?;
        Ok(rows)
    }

    /// gen-data, train-at, kd, train both latent models, eval, analyze.
    pub fn repro<S: Scalar>(&self) -> Result<(), CliError> {
        self.gen_data()?;
        self.train_at::<S>()?;
        if self.cfg.kd {
            self.kd::<S>()?;
        }
        for kind in [ModelKind::LaNmt, ModelKind::LadderNmt] {
            self.train_latent::<S>(kind)?;
        }
        self.eval::<S>()?;
        self.analyze::<S>(Metric::All, &[ModelKind::LaNmt, ModelKind::LadderNmt])?;
        Ok(())
    }
}

/// Parses one space-separated id sequence per line.
pub fn read_sequences(path: &Path) -> Result<Vec<Vec<u32>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::Runtime(format!("{}: line {} is not a list of ids", path.display(), i + 1)))
        })
        .collect()
}

pub fn format_sequences(seqs: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}
