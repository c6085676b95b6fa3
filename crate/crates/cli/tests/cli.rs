use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sbir_core::data::DatasetManifest;
use sbir_core::index::EmbeddingIndex;

const BIN: &str = env!("CARGO_BIN_EXE_sbir");

fn config_text(root: &Path) -> String {
    format!(
        r#"seed = 3

[paths]
data_root = "{root}/data"
checkpoints = "{root}/ckpt"
index = "{root}/photos.sbix"

[data.synth]
num_categories = 5
photos_per_category = 8
sketches_per_category = 8
validation_sketches_per_category = 2
test_categories = 2
seed = 3

[[phases]]
phase = 1
epochs = 1
steps_per_epoch = 20
batch_size = 8

[[phases]]
phase = 2
epochs = 1
steps_per_epoch = 10
batch_size = 8

[[phases]]
phase = 3
epochs = 2
steps_per_epoch = 15
batch_size = 8
"#,
        root = root.display()
    )
}

fn sbir(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("SBIR_DATA_ROOT")
        .env_remove("SBIR_CHECKPOINTS")
        .env_remove("SBIR_INDEX")
        .env("RUST_LOG", "warn")
        .output()
        .expect("running sbir")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Run {
    root: PathBuf,
    config: PathBuf,
    train: String,
    index: String,
}

/// Trains and indexes the tiny configuration under a fresh directory.
fn pipeline(root: PathBuf) -> Run {
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let config = root.join("sbir.toml");
    std::fs::write(&config, config_text(&root)).unwrap();
    let train = ok(sbir(&config, &["train"]));
    let index = ok(sbir(&config, &["index"]));
    Run { root, config, train, index }
}

fn shared() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| pipeline(scratch("cli-pipeline")))
}

fn first_sketch(run: &Run) -> PathBuf {
    run.root.join("data/sketches/c00_s000.json")
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

#[test]
fn missing_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = sbir(&dir.path().join("absent.toml"), &["train"]);
    assert_eq!(code(&out), 2);
    let out = Command::new(BIN).arg("train").env_remove("SBIR_CONFIG").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_key_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, config_text(dir.path()) + "\n[service]\nport = 1\ntop_kk = 4\n").unwrap();
    let out = sbir(&path, &["train"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("top_kk") && err.contains("line"), "{err}");
}

#[test]
fn index_reports_count_and_size() {
    let run = shared();
    let manifest = DatasetManifest::load(run.root.join("data/manifest.tsv")).unwrap();
    let photos: Vec<_> = manifest.items.iter().filter(|i| i.is_photo_like()).collect();
    assert_eq!(field(&run.index, "entries"), photos.len().to_string());
    let dim: u64 = field(&run.index, "dim").parse().unwrap();
    let expected: u64 = 16 + photos.iter().map(|p| 8 + (p.id.len() + p.category.len()) as u64 + 4 * dim).sum::<u64>();
    let on_disk = std::fs::metadata(run.root.join("photos.sbix")).unwrap().len();
    assert_eq!(on_disk, expected);
    assert_eq!(field(&run.index, "bytes"), expected.to_string());
    assert!(run.train.contains("final validation mAP"), "{}", run.train);
}

#[test]
fn pipeline_is_deterministic() {
    let run = shared();
    let other = pipeline(run.root.with_extension("again"));
    for file in ["ckpt/final.sbf", "ckpt/train.csv", "photos.sbix"] {
        let a = std::fs::read(run.root.join(file)).unwrap();
        let b = std::fs::read(other.root.join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
    let q = |r: &Run| ok(sbir(&r.config, &["query", first_sketch(r).to_str().unwrap(), "-k", "5", "--json"]));
    assert_eq!(q(run), q(&other));
    std::fs::remove_dir_all(other.root).unwrap();
}

fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

#[test]
fn reported_map_matches_rankings() {
    let run = shared();
    let out_dir = run.root.join("eval-check");
    let stdout = ok(sbir(&run.config, &["eval", "--split", "test", "--out", out_dir.to_str().unwrap()]));
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    let reported: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("mAP = "))
        .unwrap_or_else(|| panic!("{report}"))
        .trim()
        .parse()
        .unwrap();
    assert!(stdout.contains("mAP"));
    let totals: BTreeMap<String, f64> = read_rows(&out_dir.join("per_query.csv"))
        .into_iter()
        .map(|r| (r["query"].clone(), r["total_relevant"].parse().unwrap()))
        .collect();
    let mut hits: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for row in read_rows(&out_dir.join("rankings.csv")) {
        let entry = hits.entry(row["query"].clone()).or_default();
        if row["relevant"] == "1" || row["relevant"] == "true" {
            let rank: f64 = row["rank"].parse().unwrap();
            entry.0 += 1.0;
            entry.1 += entry.0 / rank;
        }
    }
    let aps: Vec<f64> = totals.iter().map(|(q, &total)| hits.get(q).map_or(0.0, |h| h.1) / total).collect();
    let recomputed = aps.iter().sum::<f64>() / aps.len() as f64;
    assert!((recomputed - reported).abs() < 1e-6, "{recomputed} vs {reported}");
}

fn write_jsonl(path: &Path, lines: &[serde_json::Value]) {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn one_hot_embeddings_score_perfect_map() {
    let run = shared();
    let manifest = DatasetManifest::load(run.root.join("data/manifest.tsv")).unwrap();
    let cats = manifest.categories();
    let dim: usize = field(&run.index, "dim").parse().unwrap();
    let one_hot = |c: &str| {
        let mut v = vec![0.0f32; dim];
        v[cats.iter().position(|x| x == c).unwrap()] = 1.0;
        v
    };
    let mut index = EmbeddingIndex::new(dim).unwrap();
    for p in manifest.items.iter().filter(|i| i.is_photo_like()) {
        index.add(p.id.clone(), &one_hot(&p.category), Some(p.category.clone())).unwrap();
    }
    index.snapshot();
    let index_path = run.root.join("one_hot.sbix");
    index.save(&index_path).unwrap();
    let queries: Vec<_> = manifest
        .items
        .iter()
        .filter(|i| !i.is_photo_like())
        .map(|s| serde_json::json!({"id": s.id, "embedding": one_hot(&s.category), "category": s.category}))
        .collect();
    let emb = run.root.join("one_hot.jsonl");
    write_jsonl(&emb, &queries);
    let out_dir = run.root.join("eval-one-hot");
    let args = [
        "eval",
        "--index",
        index_path.to_str().unwrap(),
        "--embeddings",
        emb.to_str().unwrap(),
        "--scale",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    ok(sbir(&run.config, &args));
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.lines().any(|l| l == "mAP = 1.000000"), "{report}");
}

#[test]
fn dimension_mismatch_exits_three() {
    let run = shared();
    let mut index = EmbeddingIndex::new(16).unwrap();
    index.add("c00_p000", &[0.5; 16], Some("c00_circle".into())).unwrap();
    index.snapshot();
    let path = run.root.join("dim16.sbix");
    index.save(&path).unwrap();
    let sketch = first_sketch(run);
    let out = sbir(&run.config, &["query", sketch.to_str().unwrap(), "--index", path.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let out = sbir(&run.config, &["eval", "--index", path.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn tau_b_without_instance_labels_exits_four() {
    let run = shared();
    let dim: usize = field(&run.index, "dim").parse().unwrap();
    let emb = run.root.join("no_groups.jsonl");
    write_jsonl(&emb, &[serde_json::json!({"id": "q0", "embedding": vec![0.1f32; dim], "category": "c00_circle"})]);
    let out = sbir(&run.config, &["eval", "--protocol", "tau_b", "--embeddings", emb.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let out = sbir(&run.config, &["eval", "--protocol", "precision"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn probe_saddle_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["probe-saddle", "--steps", "20", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = ok(out);
    assert!(stdout.contains("standard: loss 0.500000"), "{stdout}");
    for kind in ["standard", "modified"] {
        let rows = read_rows(&dir.path().join(format!("saddle_{kind}.csv")));
        assert_eq!(rows.len(), 21);
        assert_eq!(rows[0]["loss"].parse::<f64>().unwrap(), 0.5);
    }
}

/// Fresh directory under cargo's per-target scratch space.
fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
