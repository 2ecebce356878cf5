use std::fs;
use std::path::{Path, PathBuf};

use malimg::cli::{run, RunManifest, EXIT_OK, EXIT_VALIDATION};
use malimg::trainer::read_metrics;

fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("malimg").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_cache(dir: &Path) -> PathBuf {
    let out = dir.join("corpus");
    let code = run_args(&[
        "synth", "-o", s(&out), "--families", "2", "--per-family", "6", "--seed", "1", "--image-size", "32",
    ]);
    assert_eq!(code, EXIT_OK);
    out
}

fn train(corpus: &Path, runs: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "train", "--corpus", s(corpus), "--runs", s(runs), "--preset", "tiny", "--batch-size", "4",
        "--learning-rate", "1e-3", "--checkpoint-every", "5",
    ];
    args.extend_from_slice(extra);
    assert_eq!(run_args(&args), EXIT_OK);
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort_by_key(|d| fs::metadata(d.join("manifest.json")).and_then(|m| m.modified()).ok());
    dirs.pop().unwrap()
}

#[test]
fn convert_collects_per_file_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    fs::create_dir_all(&raw).unwrap();
    fs::write(raw.join("a.bin"), vec![7u8; 3000]).unwrap();
    fs::write(raw.join("b.bin"), b"").unwrap();
    fs::write(raw.join("c.bin"), vec![200u8; 900]).unwrap();
    let out = tmp.path().join("cache");
    let code = run_args(&["convert", s(&raw), "-o", s(&out), "--image-size", "32"]);
    assert_eq!(code, EXIT_VALIDATION);
    let imgs = fs::read_dir(out.join("images")).unwrap().count();
    assert_eq!(imgs, 2);

    // all valid: exit 0, and a rerun is byte-identical
    fs::remove_file(raw.join("b.bin")).unwrap();
    let out2 = tmp.path().join("cache2");
    assert_eq!(run_args(&["convert", s(&raw), "-o", s(&out2), "--image-size", "32", "--png"]), EXIT_OK);
    let first = fs::read(out2.join("images/000001.bimg")).unwrap();
    let index = fs::read(out2.join("index.json")).unwrap();
    assert_eq!(run_args(&["convert", s(&raw), "-o", s(&out2), "--image-size", "32", "--png"]), EXIT_OK);
    assert_eq!(fs::read(out2.join("images/000001.bimg")).unwrap(), first);
    assert_eq!(fs::read(out2.join("index.json")).unwrap(), index);
    assert!(out2.join("png/000000.png").exists());
}

#[test]
fn convert_labeled_manifest_and_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    assert_eq!(run_args(&["synth", "-o", s(&raw), "--raw", "--families", "2", "--per-family", "2"]), EXIT_OK);
    let out = tmp.path().join("cache");
    let manifest = raw.join("manifest.csv");
    assert_eq!(run_args(&["convert", "--manifest", s(&manifest), "-o", s(&out), "--image-size", "32"]), EXIT_OK);
    let corpus = malimg::dataset::read_cache(&out).unwrap();
    assert_eq!(corpus.len(), 4);
    assert_eq!(corpus.family_names, vec!["synth000", "synth001"]);

    let missing = tmp.path().join("nope.csv");
    assert_ne!(run_args(&["convert", "--manifest", s(&missing), "-o", s(&out)]), EXIT_OK);
}

#[test]
fn train_zero_steps_writes_initial_checkpoint_only() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_cache(tmp.path());
    let runs = tmp.path().join("runs");
    let dir = train(&corpus, &runs, &["--max-steps", "0"]);
    let ckpts: Vec<String> = fs::read_dir(dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    assert_eq!(ckpts, vec!["step_00000000.ckpt"]);
    for f in ["config.json", "split.json", "report.json", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn train_rejects_bad_config_with_key() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_cache(tmp.path());
    let runs = tmp.path().join("runs");
    let code = run_args(&["train", "--corpus", s(&corpus), "--runs", s(&runs), "--preset", "tiny", "--mask-ratio", "2"]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn modes_give_distinct_run_dirs_and_pipeline_composes() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_cache(tmp.path());
    let runs = tmp.path().join("runs");
    let a = train(&corpus, &runs, &["--max-steps", "6", "--mode", "composite", "--seed", "1"]);
    let b = train(&corpus, &runs, &["--max-steps", "6", "--mode", "ce_only", "--seed", "1"]);
    assert_ne!(a, b);
    assert_eq!(read_metrics(&a.join("metrics.jsonl")).unwrap().len(), 6);
    assert_eq!(read_metrics(&b.join("metrics.jsonl")).unwrap().len(), 6);

    let manifest: RunManifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for f in ["config.json", "metrics.jsonl", "report.json", "split.json"] {
        assert!(manifest.outputs.iter().any(|o| o.path.ends_with(f)), "{f} not listed");
    }
    assert!(manifest.outputs.iter().any(|o| o.path.to_string_lossy().ends_with(".ckpt")));

    assert_eq!(run_args(&["eval", "--run", s(&a)]), EXIT_OK);
    assert!(a.join("eval_test.json").exists());
    assert_eq!(run_args(&["embed", "--run", s(&a), "--split", "all"]), EXIT_OK);
    let emb = a.join("embeddings_all.csv");
    let text = fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.starts_with("source_id,family_id,e0000,"));

    assert_eq!(run_args(&["project", "--input", s(&emb)]), EXIT_OK);
    let proj = fs::read_to_string(a.join("embeddings_all.proj.csv")).unwrap();
    assert_eq!(proj.lines().count(), 13);
    assert!(fs::read_to_string(a.join("embeddings_all.proj.svg")).unwrap().contains("<circle"));

    let query = tmp.path().join("q.bin");
    fs::write(&query, vec![0xABu8; 5000]).unwrap();
    let report = tmp.path().join("novelty.csv");
    let code = run_args(&["detect", "--run", s(&a), "--reference", s(&emb), s(&query), "-o", s(&report)]);
    assert_eq!(code, EXIT_OK);
    let rows = fs::read_to_string(&report).unwrap();
    assert!(rows.starts_with("query_id,nearest_family,distance,nearest_threshold,novel,max_prob"));
    assert_eq!(rows.lines().count(), 2);

    let svg = tmp.path().join("loss.svg");
    assert_eq!(run_args(&["plot-loss", s(&a), s(&b), "-o", s(&svg), "--metric", "d2v"]), EXIT_OK);
    let svg = fs::read_to_string(svg).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("composite (seed 1)") && svg.contains("ce_only (seed 1)"));
}

#[test]
fn missing_run_artifacts_name_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run_args(&["eval", "--run", s(&tmp.path().join("ghost"))]);
    assert_eq!(code, EXIT_VALIDATION);
}
