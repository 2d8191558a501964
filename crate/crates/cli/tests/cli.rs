//! Black-box tests of the command surface: exit codes, byte-determinism of
//! reruns, annotator self-consistency, and the scoring formats.

use std::path::Path;
use std::process::{Command, Output};

fn ctrlcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrlcap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen(dir: &Path, images: usize) -> String {
    let corpus = dir.join("corpus.jsonl");
    let out = ctrlcap(&[
        "gen-data",
        "--out",
        corpus.to_str().unwrap(),
        "--images",
        &images.to_string(),
    ]);
    assert_ok(&out);
    corpus.to_str().unwrap().to_string()
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        assert_ok(&ctrlcap(&[
            "gen-data",
            "--out",
            p.to_str().unwrap(),
            "--images",
            "25",
            "--seed",
            "7",
        ]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    let out = ctrlcap(&["gen-data", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scheme_and_level_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), 8);
    let out = ctrlcap(&["annotate", "--corpus", &corpus, "--scheme", "no-such-scheme"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: scheme:"), "{err}");
}

#[test]
fn missing_files_exit_5() {
    let out = ctrlcap(&["annotate", "--corpus", "/nonexistent.jsonl", "--scheme", "tense"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn vocab_hash_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), 12);
    let out_dir = dir.path().join("run");
    assert_ok(&ctrlcap(&[
        "train",
        "--stage",
        "xe",
        "--task",
        "length",
        "--corpus",
        &corpus,
        "--epochs",
        "1",
        "--seed",
        "1",
        "--hidden-dim",
        "12",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--deterministic",
    ]));
    // A corpus with a different vocabulary (one caption rewritten to use a
    // new word) must be rejected by eval.
    let text = std::fs::read_to_string(&corpus).unwrap();
    let mangled = text.replace("\"dog\"", "\"zebra\"");
    assert_ne!(text, mangled);
    let other = dir.path().join("other.jsonl");
    std::fs::write(&other, mangled).unwrap();
    let out = ctrlcap(&[
        "eval",
        "--ckpt",
        out_dir.join("xe-1.ckpt").to_str().unwrap(),
        "--corpus",
        other.to_str().unwrap(),
        "--split",
        "train",
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: vocab-hash:"), "{err}");
}

/// `annotate` reproduces the generator's declared levels exactly.
#[test]
fn annotate_agrees_with_the_generator() {
    use ctrlcap_core::corpus::{generate_synthetic_with_attrs, SynthConfig};

    let dir = tempfile::tempdir().unwrap();
    let corpus_path = gen(dir.path(), 30);
    let (_, attrs) = generate_synthetic_with_attrs(&SynthConfig {
        num_images: 30,
        ..Default::default()
    })
    .unwrap();

    // Tense levels.
    let out = ctrlcap(&["annotate", "--corpus", &corpus_path, "--scheme", "tense"]);
    assert_ok(&out);
    check_levels(&out, |i, r| attrs[i][r].tense);

    // Coarse length levels.
    let out = ctrlcap(&["annotate", "--corpus", &corpus_path, "--scheme", "length-coarse"]);
    assert_ok(&out);
    let coarse = ctrlcap_core::control::length_coarse();
    check_levels(&out, |i, r| {
        ctrlcap_core::control::length_level(attrs[i][r].length, &coarse).unwrap()
    });
}

fn check_levels(out: &std::process::Output, expected: impl Fn(usize, usize) -> usize) {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut count = 0;
    for line in stdout.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = record["id"].as_str().unwrap();
        let image_idx: usize = id.trim_start_matches("img").parse().unwrap();
        let ref_idx = record["ref"].as_u64().unwrap() as usize;
        let level = record["level"].as_u64().unwrap() as usize;
        assert_eq!(level, expected(image_idx, ref_idx), "{id} ref {ref_idx}");
        count += 1;
    }
    assert_eq!(count, 150);
}

/// Identical candidate and reference files with per-line df=1 n-grams score
/// exactly 10.
#[test]
fn score_identical_files_gives_ten() {
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("cands.txt");
    let refs = dir.path().join("refs.txt");
    // Two disjoint captions so each n-gram has df 1 of 2.
    let text = "a dog holds a stick\nthe red train pulled in\n";
    std::fs::write(&cands, text).unwrap();
    std::fs::write(&refs, text).unwrap();
    let out = ctrlcap(&[
        "score",
        "--candidates",
        cands.to_str().unwrap(),
        "--refs",
        refs.to_str().unwrap(),
        "--metric",
        "cider",
        "--length-penalty",
        "on",
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut lines = stdout.lines();
    assert_eq!(lines.next().unwrap(), "0\t10.000000");
    assert_eq!(lines.next().unwrap(), "1\t10.000000");
    assert_eq!(lines.next().unwrap(), "mean\t10.000000");
}

#[test]
fn score_bleu_reports_per_n_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("cands.txt");
    let refs = dir.path().join("refs.txt");
    std::fs::write(&cands, "a b c\n").unwrap();
    std::fs::write(&refs, "a b c d e || a b\n").unwrap();
    let out = ctrlcap(&[
        "score",
        "--candidates",
        cands.to_str().unwrap(),
        "--refs",
        refs.to_str().unwrap(),
        "--metric",
        "bleu",
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let first = stdout.lines().next().unwrap();
    let fields: Vec<&str> = first.split('\t').collect();
    // Closest ref length is 2 (tie broken toward shorter is irrelevant
    // here): candidate is longer, so BP = 1 and BLEU-1 = 1.
    assert_eq!(fields[1], "1.000000");
}

/// A config file provides values; flags override them.
#[test]
fn config_file_overlay_with_flag_priority() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), 12);
    let conf = dir.path().join("train.conf");
    std::fs::write(
        &conf,
        format!(
            "stage = xe\ntask = length\ncorpus = {corpus}\nepochs = 1\nseed = 9\nhidden_dim = 12\n"
        ),
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    // Run purely from the config file.
    assert_ok(&ctrlcap(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--out-dir",
        out_a.to_str().unwrap(),
        "--deterministic",
    ]));
    // Same config but the epochs flag wins.
    assert_ok(&ctrlcap(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--epochs",
        "2",
        "--out-dir",
        out_b.to_str().unwrap(),
        "--deterministic",
    ]));
    let rows = |p: &Path| {
        std::fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
            .count()
    };
    assert_eq!(rows(&out_a), 1);
    assert_eq!(rows(&out_b), 2);
}

/// Two identical train invocations produce byte-identical metrics files
/// under --deterministic.
#[test]
fn deterministic_training_reruns_match_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), 20);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        assert_ok(&ctrlcap(&[
            "train",
            "--stage",
            "xe",
            "--task",
            "length",
            "--corpus",
            &corpus,
            "--epochs",
            "2",
            "--seed",
            "3",
            "--hidden-dim",
            "16",
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--deterministic",
        ]));
        std::fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("r1"), run("r2"));
}

#[test]
fn sample_outputs_annotated_captions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path(), 12);
    let out_dir = dir.path().join("run");
    assert_ok(&ctrlcap(&[
        "train",
        "--stage",
        "xe",
        "--task",
        "length",
        "--corpus",
        &corpus,
        "--epochs",
        "1",
        "--seed",
        "2",
        "--hidden-dim",
        "12",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--deterministic",
    ]));
    let out = ctrlcap(&[
        "sample",
        "--ckpt",
        out_dir.join("xe-1.ckpt").to_str().unwrap(),
        "--corpus",
        &corpus,
        "--image-id",
        "img00003",
        "--signal",
        "len=1",
        "--n",
        "3",
        "--seed",
        "11",
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 3);
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["requested"], "len=1");
        assert!(v["annotated"].as_str().unwrap().starts_with("len="));
    }
    // Out-of-range level for the scheme exits 3.
    let out = ctrlcap(&[
        "sample",
        "--ckpt",
        out_dir.join("xe-1.ckpt").to_str().unwrap(),
        "--corpus",
        &corpus,
        "--image-id",
        "img00003",
        "--signal",
        "len=9",
    ]);
    assert_eq!(out.status.code(), Some(3));
}
