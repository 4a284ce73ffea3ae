use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use medst::eval_harness::{ProbeResult, Task};

fn medst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medst")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = medst(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn probe(path: &Path) -> ProbeResult {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let spec = root.join("gen.toml");
    fs::write(&spec, "n_patients = 30\nimage_size = 8\nstable_fraction = 0.3\n").unwrap();
    ok(&["gen-synthetic", "--spec", p(&spec), "--out", p(&corpus), "--seed", "4"]);
    assert!(corpus.join("manifest.txt").exists() && corpus.join("labels.txt").exists());

    let seqs = root.join("sequences.txt");
    ok(&["build-sequences", "--manifest", p(&corpus.join("manifest.txt")), "--out", p(&seqs)]);
    assert!(fs::read_to_string(&seqs).unwrap().lines().count() >= 30);

    let cfg = root.join("train.toml");
    fs::write(
        &cfg,
        "max_steps = 3\nlr = 1e-3\nbatch_sequences = 4\nimage_size = 8\npatch_size = 4\nembed_dim = 8\nproj_dim = 8\nn_blocks = 1\nn_heads = 2\ntext_blocks = 1\nffn_mult = 2\n",
    )
    .unwrap();
    let ck = root.join("ck");
    ok(&["train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&ck)]);
    let metrics = fs::read_to_string(ck.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,global,vla,tla,fmc_i,rmr_i,fmc_t,rmr_t,total,lr,cycle_back_acc\n"));
    assert_eq!(metrics.lines().count(), 4);

    let results = root.join("results");
    fs::create_dir(&results).unwrap();
    let t = results.join("temporal.json");
    ok(&["eval-temporal", "--ckpt", p(&ck), "--corpus", p(&corpus), "--folds", "5", "--out", p(&t)]);
    let r = probe(&t);
    assert_eq!(r.task, Task::TemporalCls);
    assert!((0.0..=1.0).contains(&r.accuracy));

    let s = results.join("sentence.json");
    ok(&["eval-sentence", "--ckpt", p(&ck.join("model.ckpt")), "--pairs", p(&corpus.join("sentence_pairs.txt")), "--out", p(&s)]);
    assert_eq!(probe(&s).task, Task::SentenceSim);

    let z = results.join("zeroshot.json");
    ok(&["eval-zeroshot", "--ckpt", p(&ck), "--corpus", p(&corpus), "--prompts", p(&corpus.join("prompts.txt")), "--out", p(&z)]);
    assert!(probe(&z).f1.is_some());

    ok(&["dump-beta", "--ckpt", p(&ck), "--corpus", p(&corpus), "--out", p(&results.join("beta.csv"))]);
    let report = root.join("report");
    ok(&["report", "--in", p(&results), "--out", p(&report)]);
    for f in ["temporal_cls.csv", "sentence_sim.csv", "zeroshot.csv", "summary.txt", "beta_histogram.csv"] {
        assert!(report.join(f).exists(), "{f}");
    }
}

#[test]
fn gradcheck_reports_small_error() {
    let out = ok(&["gradcheck", "--loss", "rmr"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let err: f64 = text.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{text}");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    for args in [
        vec!["build-sequences", "--manifest", p(&missing), "--out", p(&dir.path().join("o.txt"))],
        vec!["train", "--config", p(&missing), "--corpus", p(dir.path()), "--out", p(dir.path())],
        vec!["eval-temporal", "--ckpt", p(&missing), "--corpus", p(dir.path())],
    ] {
        let out = medst(&args);
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "));
    }
    assert!(!medst(&["gradcheck", "--loss", "bogus"]).status.success());
}
