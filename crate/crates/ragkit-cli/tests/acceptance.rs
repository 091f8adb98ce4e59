//! End-to-end pipeline acceptance: the full gen-synthetic -> build-db ->
//! eval-retrieval -> decode -> prep-train chain must produce byte-identical
//! outputs across repeated runs and across thread counts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ragkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ragkit"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("failed to spawn ragkit");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under a directory, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn assert_identical_trees(a: &Path, b: &Path) {
    let sa = snapshot(a);
    let sb = snapshot(b);
    let keys_a: Vec<_> = sa.keys().collect();
    let keys_b: Vec<_> = sb.keys().collect();
    assert_eq!(keys_a, keys_b, "{a:?} and {b:?} hold different files");
    for (rel, bytes) in &sa {
        assert_eq!(
            bytes,
            &sb[rel],
            "{} differs between {a:?} and {b:?}",
            rel.display()
        );
    }
}

/// Run the whole pipeline with one seed/thread setting into `root`.
fn run_pipeline(root: &Path, seed: u64, threads: usize) {
    let corpus = root.join("corpus");
    let db = root.join("db");
    let seed = seed.to_string();
    let threads = threads.to_string();

    run_ok(ragkit()
        .args(["gen-synthetic", "--seed", &seed, "--studies", "40", "--out"])
        .arg(&corpus));
    run_ok(ragkit()
        .args(["build-db", "--paragraphs"])
        .arg(corpus.join("paragraphs"))
        .arg("--sent-emb")
        .arg(corpus.join("sentences.aemb"))
        .arg("--img-emb")
        .arg(corpus.join("images"))
        .arg("--labels")
        .arg(corpus.join("labels.tsv"))
        .arg("--finding-map")
        .arg(corpus.join("finding_map.json"))
        .arg("--out")
        .arg(&db));
    for modality in ["img2img", "img2txt", "txt2txt", "upper"] {
        run_ok(ragkit()
            .args(["eval-retrieval", "--threads", &threads, "--db"])
            .arg(&db)
            .arg("--labels")
            .arg(corpus.join("labels.tsv"))
            .args(["--modality", modality, "--organ", "lung", "--k", "10", "--per-query", "--out"])
            .arg(root.join(format!("eval_{modality}.jsonl"))));
    }
    run_ok(ragkit()
        .args(["decode", "--seed", &seed, "--db"])
        .arg(&db)
        .args(["--policy", "adaptive:4", "--strategy", "twostage", "--script"])
        .arg(corpus.join("decode_script.json"))
        .arg("--trace-out")
        .arg(root.join("trace.jsonl")));
    run_ok(ragkit()
        .args(["prep-train", "--seed", &seed, "--threads", &threads, "--db"])
        .arg(&db)
        .arg("--reports")
        .arg(corpus.join("reports.jsonl"))
        .arg("--perplexities")
        .arg(corpus.join("perplexities.jsonl"))
        .args(["--percentile", "70", "--p-oracle", "0.7", "--k-rag", "4", "--out"])
        .arg(root.join("samples.jsonl"))
        .arg("--log-out")
        .arg(root.join("assembly.jsonl")));
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let base = tempfile::tempdir().unwrap();
    let run_a = base.path().join("a");
    let run_b = base.path().join("b");
    let run_c = base.path().join("c");
    std::fs::create_dir_all(&run_a).unwrap();
    std::fs::create_dir_all(&run_b).unwrap();
    std::fs::create_dir_all(&run_c).unwrap();

    // Same seed, two runs, one thread.
    run_pipeline(&run_a, 20240, 1);
    run_pipeline(&run_b, 20240, 1);
    assert_identical_trees(&run_a, &run_b);

    // Same seed, four threads.
    run_pipeline(&run_c, 20240, 4);
    assert_identical_trees(&run_a, &run_c);

    println!("criterion 10 (end-to-end determinism across runs and thread counts 1/4): PASS");
}

#[test]
fn unknown_flag_fails_with_usage() {
    let out = ragkit()
        .args(["gen-synthetic", "--definitely-not-a-flag", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("Usage") || stderr.contains("unexpected argument"),
        "stderr: {stderr}"
    );
}

#[test]
fn config_file_unknown_keys_rejected_with_all_offenders() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "first_bad": true, "second_bad": 2}"#).unwrap();
    let out = ragkit()
        .arg("--config")
        .arg(&cfg)
        .args(["diagnose", "/nonexistent.aemb"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("first_bad"), "stderr: {stderr}");
    assert!(stderr.contains("second_bad"), "stderr: {stderr}");
    // Machine-parsable error record.
    let line = stderr.lines().last().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line).expect("stderr is a JSON record");
    assert!(parsed.get("error").is_some());
}

#[test]
fn config_values_apply_and_flags_win() {
    let base = tempfile::tempdir().unwrap();
    let corpus = base.path().join("corpus");
    run_ok(ragkit().args(["gen-synthetic", "--seed", "3", "--studies", "10", "--out"]).arg(&corpus));
    let db = base.path().join("db");
    run_ok(ragkit()
        .args(["build-db", "--paragraphs"])
        .arg(corpus.join("paragraphs"))
        .arg("--sent-emb")
        .arg(corpus.join("sentences.aemb"))
        .arg("--img-emb")
        .arg(corpus.join("images"))
        .arg("--labels")
        .arg(corpus.join("labels.tsv"))
        .arg("--out")
        .arg(&db));

    // k from the config file caps the hit list; a --k flag overrides it.
    let cfg = base.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"k": 2}"#).unwrap();
    let sentence_id = "study0000:lung:0";
    let out = run_ok(ragkit()
        .arg("--config")
        .arg(&cfg)
        .args(["retrieve", "--db"])
        .arg(&db)
        .args(["--organ", "lung", "--query-id", sentence_id]));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let out = run_ok(ragkit()
        .arg("--config")
        .arg(&cfg)
        .args(["retrieve", "--db"])
        .arg(&db)
        .args(["--organ", "lung", "--query-id", sentence_id, "--k", "4"]));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
}
