use std::path::Path;
use std::process::Command;

use laddernat_cli::config::Config;
use laddernat_cli::dispatch;

const TINY: &[&str] = &[
    "corpus.pairs=240",
    "corpus.max_len=8",
    "model.d_model=16",
    "model.heads=2",
    "model.ffn_dim=32",
    "model.layers=1",
    "model.max_positions=32",
    "model.t_z=4",
    "model.d_z=4",
    "at.max_steps=12",
    "at.validate_every=6",
    "train.max_steps=12",
    "train.validate_every=6",
    "analysis.fit_rows=100",
    "analysis.cca_k=4",
    "analysis.probe_pairs=5",
    "analysis.trials=4",
    "bench.lengths=4",
    "bench.sentences=2",
    "bench.refinements=1",
];

fn run(cmd: &str, out: &Path, extra: &[&str]) -> i32 {
    let mut argv = vec!["laddernat".to_string(), cmd.to_string(), "--out".into(), out.display().to_string()];
    for s in TINY {
        argv.push("--set".into());
        argv.push(s.to_string());
    }
    argv.extend(extra.iter().map(|s| s.to_string()));
    dispatch(argv)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_reproducible_and_hash_stamped() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = a.path().join("reg2.cfg");
    std::fs::write(&spec, "[corpus]\nregisters = 2\npairs = 300\n").unwrap();
    let spec_arg = spec.display().to_string();
    for dir in [a.path(), b.path()] {
        assert_eq!(run("gen-data", dir, &["--spec", &spec_arg, "--seed", "7"]), 0);
    }
    for f in ["train.txt", "valid.txt", "test.txt", "corpus.json"] {
        assert_eq!(read(&a.path().join("data").join(f)), read(&b.path().join("data").join(f)));
    }
    let train = read(&a.path().join("data/train.txt"));
    let cfg = read(&a.path().join("config.ini"));
    let hash_line = cfg.lines().next().unwrap();
    assert!(hash_line.starts_with("# config-hash="));
    assert!(train.starts_with(hash_line));
    assert!(cfg.contains("corpus.registers=2\n") && cfg.contains("run.seed=7\n"));

    let c = tempfile::tempdir().unwrap();
    assert_eq!(run("gen-data", c.path(), &["--spec", &spec_arg, "--seed", "8"]), 0);
    assert_ne!(train, read(&c.path().join("data/train.txt")));
}

#[test]
fn config_errors_exit_with_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("gen-data", dir.path(), &["--set", "corpus.colour=blue"]), 1);
    assert_eq!(run("gen-data", dir.path(), &["--set", "corpus.pairs=many"]), 1);
    assert_eq!(run("gen-data", dir.path(), &["--set", "train.beta=-1"]), 1);
    assert_eq!(run("gen-data", dir.path(), &["--frobnicate"]), 1);
    assert_eq!(dispatch(["laddernat", "dance"]), 1);

    let bin = env!("CARGO_BIN_EXE_laddernat");
    let out = Command::new(bin)
        .args(["gen-data", "--out"])
        .arg(dir.path())
        .args(["--set", "model.heads=3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("heads"), "{err}");
    let out = Command::new(bin)
        .args(["gen-data", "--out"])
        .arg(dir.path())
        .args(["--set", "analysis.cca_k=0"])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("analysis.cca_k"));
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("train-at", dir.path(), &[]), 2);
    assert_eq!(run("gen-data", dir.path(), &[]), 0);
    assert_eq!(run("kd", dir.path(), &[]), 2);
    assert_eq!(run("eval", dir.path(), &[]), 2);
    assert_eq!(run("train", dir.path(), &["--model", "at"]), 1);
}

#[test]
fn threads_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_laddernat"))
        .env("LADDERNAT_THREADS", "zero")
        .args(["gen-data", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LADDERNAT_THREADS"));
}

#[test]
fn overrides_change_the_hash() {
    let base = Config::builder().build().unwrap();
    let same = Config::builder().assign("train.beta=1.0").unwrap().build().unwrap();
    let other = Config::builder().assign("train.beta=2.5").unwrap().build().unwrap();
    assert_eq!(base.hash(), same.hash());
    assert_ne!(base.hash(), other.hash());
    assert_eq!(base.hash().len(), 16);
    assert!(Config::builder().assign("train.beta").is_err());
}

#[test]
fn pipeline_stages_produce_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run("gen-data", d, &[]), 0);
    assert_eq!(run("train-at", d, &[]), 0);
    assert_eq!(run("kd", d, &[]), 0);
    assert_eq!(run("train", d, &["--model", "laddernmt", "--rho", "1.0", "--beta", "2.5"]), 0);
    assert_eq!(run("train", d, &["--model", "lanmt"]), 0);
    for kind in ["at", "lanmt", "laddernmt"] {
        let metrics = read(&d.join(kind).join("metrics.csv"));
        let mut lines = metrics.lines();
        assert!(lines.next().unwrap().starts_with("# config-hash="));
        assert_eq!(
            lines.next().unwrap(),
            "step,lr,token_ll,length_ll,kl,total,valid_bleu_fwd,valid_bleu_rev"
        );
        assert_eq!(lines.count(), 2);
        assert!(d.join(kind).join("manifest.json").exists());
    }
    let manifest = read(&d.join("laddernmt/manifest.json"));
    assert!(manifest.contains("config_hash"));

    let input = d.join("src.txt");
    std::fs::write(&input, "3 4 5\n6 7 8 9\n").unwrap();
    let output = d.join("hyp.txt");
    let (i, o) = (input.display().to_string(), output.display().to_string());
    assert_eq!(
        run("translate", d, &["--model", "laddernmt", "--input", &i, "--output", &o, "--refinements", "1"]),
        0
    );
    assert_eq!(read(&output).lines().count(), 2);
    assert_eq!(run("translate", d, &["--model", "at", "--input", &i, "--output", &o, "--direction", "reverse"]), 0);

    assert_eq!(run("eval", d, &[]), 0);
    let eval = read(&d.join("eval.csv"));
    // at: 2 directions; each latent model: 3 refinement counts x 2.
    assert_eq!(eval.lines().count(), 2 + 2 + 12);

    assert_eq!(run("analyze", d, &["--metric", "relative-sensitivity", "--models", "lanmt,laddernmt"]), 0);
    let report = read(&d.join("analysis.csv"));
    let rows: Vec<&str> = report.lines().skip(2).collect();
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows.iter().any(|r| r.starts_with("relative-sensitivity-w3,lanmt,")));
    assert_eq!(run("analyze", d, &["--models", "at"]), 1);
    assert_eq!(run("analyze", d, &[]), 0);
    assert!(read(&d.join("pca_laddernmt.csv")).lines().nth(1).unwrap().starts_with("sentence_id,language,pc1,pc2"));
    assert!(d.join("latents_lanmt.csv").exists());

    assert_eq!(run("bench", d, &["--models", "laddernmt"]), 0);
    let bench = read(&d.join("bench.csv"));
    assert_eq!(bench.lines().nth(1).unwrap(), "model,length-bucket,sentences,seconds,ratio");
    assert_eq!(bench.lines().count(), 4);
}

#[test]
fn repro_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert_eq!(run("repro", d, &["--seed", "3", "--set", "run.dtype=f64"]), 0);
    }
    for f in ["at/metrics.csv", "lanmt/metrics.csv", "laddernmt/metrics.csv", "eval.csv", "analysis.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}
