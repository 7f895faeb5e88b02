use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vista::data::load_corpus;

fn vista(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vista"))
        .args(args)
        .env_remove("VISTA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small corpus plus a fast config next to it.
fn setup(dir: &Path, steps: u64) -> std::path::PathBuf {
    let corpus = dir.join("corpus.jsonl");
    let out = vista(&["gen", "--preset", "overfit", "--out", p(&corpus)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 4\nsteps = {steps}\nbatch_size = 4\ncorpus = \"corpus.jsonl\"\n\n\
             [model]\nwidth = 8\nheads = 2\nembed_dim = 8\n"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&vista(&[])), 1);
    assert_eq!(code(&vista(&["frobnicate"])), 1);
    assert_eq!(code(&vista(&["--help"])), 0);
}

#[test]
fn unknown_strategy_lists_valid_names() {
    let out = vista(&["eval", "--checkpoint", "x", "--corpus", "y", "--strategy", "early"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    for name in ["fusion_token", "late_fusion", "vision_only"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn invalid_spec_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("c.jsonl");
    let out = vista(&["gen", "--preset", "mixed", "--relevance", "1.5", "--out", p(&target)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!target.exists());
    let out = vista(&["gen", "--preset", "nope", "--out", p(&target)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("discrimination"));
    assert!(!target.exists());
}

#[test]
fn discrimination_corpus_pairs_share_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    assert_eq!(code(&vista(&["gen", "--preset", "discrimination", "--out", p(&path)])), 0);
    let corpus = load_corpus(&path).unwrap();
    for i in 0..corpus.len() {
        for j in i + 1..corpus.len() {
            let same = corpus[i].image.pixels == corpus[j].image.pixels;
            assert_eq!(same, i / 2 == j / 2, "items {i} and {j}");
        }
    }
    for pair in corpus.chunks(2) {
        assert_ne!(pair[0].ocr, pair[1].ocr);
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 6);
    let run = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["train", "--config", p(&cfg), "--out-dir", p(&out_dir)];
        args.extend_from_slice(extra);
        let out = vista(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let ck = |d: &Path| fs::read(d.join("checkpoint_final.bin")).unwrap();
    assert_eq!(ck(&a), ck(&b));
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());

    let half = run("half", &["--steps", "3"]);
    let resumed = run("resumed", &["--resume", p(&half.join("checkpoint_final.bin"))]);
    assert_eq!(ck(&resumed), ck(&a));

    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64);
        assert!(l["loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn eval_report_parses_and_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 3);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&vista(&["train", "--config", p(&cfg), "--out-dir", p(&run_dir)])), 0);
    let eval_dir = dir.path().join("eval");
    for mode in ["scene_text_aware", "scene_text_free"] {
        let out = vista(&[
            "eval",
            "--checkpoint",
            p(&run_dir.join("checkpoint_final.bin")),
            "--corpus",
            p(&dir.path().join("corpus.jsonl")),
            "--mode",
            mode,
            "--out-dir",
            p(&eval_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = fs::read_to_string(eval_dir.join("report.jsonl")).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        for l in &lines {
            assert_eq!(l["mode"], mode);
            let r: Vec<f64> = ["r@1", "r@5", "r@10"].iter().map(|k| l[*k].as_f64().unwrap()).collect();
            assert!(0.0 <= r[0] && r[0] <= r[1] && r[1] <= r[2] && r[2] <= 1.0, "{l}");
        }
    }
}

#[test]
fn bad_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 1);
    let bogus = dir.path().join("bogus.bin");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = vista(&["eval", "--checkpoint", p(&bogus), "--corpus", p(&dir.path().join("corpus.jsonl"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn ablate_reports_three_strategies_and_corpus_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2);
    let out_dir = dir.path().join("ablate");
    let out = Command::new(env!("CARGO_BIN_EXE_vista"))
        .args(["ablate", "--config", p(&cfg)])
        .env("VISTA_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("ablation.txt")).unwrap();
    let corpus = load_corpus(&dir.path().join("corpus.jsonl")).unwrap();
    assert!(table.starts_with(&format!("corpus {}\n", vista::data::corpus_hash(&corpus))));
    let rows: Vec<&str> = table.lines().skip(3).collect();
    assert_eq!(rows.len(), 3);
    for (row, name) in rows.iter().zip(["fusion_token", "late_fusion", "vision_only"]) {
        assert!(row.starts_with(name), "{row}");
    }
    assert_eq!(String::from_utf8_lossy(&out.stdout), table);
}

#[test]
fn embed_writes_vectors_and_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&vista(&["train", "--config", p(&cfg), "--out-dir", p(&run_dir)])), 0);
    let target = dir.path().join("captions.bin");
    let out = vista(&[
        "embed",
        "--checkpoint",
        p(&run_dir.join("checkpoint_final.bin")),
        "--corpus",
        p(&dir.path().join("corpus.jsonl")),
        "--what",
        "captions",
        "--out",
        p(&target),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let set = vista::retrieval::read_embeddings(&target).unwrap();
    assert_eq!(set.len(), 8);
    assert_eq!(set.ids[0], "item00000#0");
}
