mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taxoneg::catalog::Catalog;
use taxoneg::encoder::{dot, ModelParams};

const CONFIG: &str = "\
model.vocab_buckets = 1024
model.d_tok = 8
model.d = 8
model.d_cust = 4
train.epochs = 2
train.learning_rate = 1.0
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taxoneg"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin()
        .arg("--config")
        .arg(dir.join("cfg.txt"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains a small model; returns the data dir.
fn pipeline(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("cfg.txt"), CONFIG).unwrap();
    let data = dir.join("data");
    run(dir, &["generate", "--out", s(&data), "--customers", "30"]);
    let trip = dir.join("t.tsv");
    run(
        dir,
        &[
            "mine",
            "--catalog",
            s(&data.join("catalog.jsonl")),
            "--engagement",
            s(&data.join("engagement.tsv")),
            "--out",
            s(&trip),
        ],
    );
    run(
        dir,
        &[
            "train",
            "--catalog",
            s(&data.join("catalog.jsonl")),
            "--triplets",
            s(&trip),
            "--out",
            s(&dir.join("params.bin")),
        ],
    );
    run(
        dir,
        &[
            "build-ann",
            "--catalog",
            s(&data.join("catalog.jsonl")),
            "--params",
            s(&dir.join("params.bin")),
            "--out",
            s(&dir.join("index.bin")),
        ],
    );
    data
}

fn search(dir: &Path, data: &Path, extra: &[&str]) -> String {
    let (cat, params, index) = (
        data.join("catalog.jsonl"),
        dir.join("params.bin"),
        dir.join("index.bin"),
    );
    let mut args = vec![
        "search",
        "--catalog",
        s(&cat),
        "--params",
        s(&params),
        "--index",
        s(&index),
    ];
    args.extend_from_slice(extra);
    String::from_utf8(run(dir, &args).stdout).unwrap()
}

#[test]
fn generate_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), "").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(dir.path(), &["--seed", "3", "generate", "--out", s(&a)]);
    run(dir.path(), &["--seed", "3", "generate", "--out", s(&b)]);
    for f in [
        "catalog.jsonl",
        "engagement.tsv",
        "customers.jsonl",
        "truth.jsonl",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let text = std::fs::read_to_string(a.join("catalog.jsonl")).unwrap();
    assert_eq!(
        text.lines().filter(|l| !l.trim().is_empty()).count(),
        4 * 4 * 4 * 10
    );
}

#[test]
fn search_pipeline_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = pipeline(dir.path());
    let catalog = Catalog::load(data.join("catalog.jsonl")).unwrap();
    let params = ModelParams::load(dir.path().join("params.bin")).unwrap();
    let query = catalog.items()[17].title.clone();
    let out = search(dir.path(), &data, &["--query", &query, "-k", "5"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);

    let q = params
        .encode_query(&query, None, &catalog)
        .unwrap()
        .embedding;
    let best = catalog
        .items()
        .iter()
        .map(|it| (dot(&q, &params.encode_item(it)), it.item_id.as_str()))
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| b.1.cmp(a.1)))
        .unwrap();
    let cols: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(cols[0], best.1);
    assert!((cols[1].parse::<f64>().unwrap() - best.0).abs() < 1e-6);
    assert_eq!(cols[2], catalog.get(best.1).unwrap().title);

    // an unknown customer on a non-personalized model changes nothing
    let fallback = bin()
        .arg("--config")
        .arg(dir.path().join("cfg.txt"))
        .args([
            "search",
            "--catalog",
            s(&data.join("catalog.jsonl")),
            "--params",
            s(&dir.path().join("params.bin")),
            "--index",
            s(&dir.path().join("index.bin")),
            "--customers",
            s(&data.join("customers.jsonl")),
            "--customer",
            "nobody",
            "--query",
            &query,
            "-k",
            "5",
        ])
        .output()
        .unwrap();
    assert!(fallback.status.success());
    assert_eq!(String::from_utf8(fallback.stdout).unwrap(), out);
    assert!(String::from_utf8_lossy(&fallback.stderr).contains("unknown customer"));
}

#[test]
fn single_item_index_returns_that_item() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("cfg.txt"), CONFIG).unwrap();
    let cat = p.join("one.jsonl");
    let item = common::item("solo", "cordless drill", &["tools", "drills"]);
    std::fs::write(&cat, Catalog::to_jsonl_line(&item) + "\n").unwrap();
    let params = ModelParams::init(
        taxoneg::encoder::ModelDims {
            vocab_buckets: 1024,
            d_tok: 8,
            d: 8,
            d_cust: 4,
        },
        false,
        1,
    )
    .unwrap();
    params.save(p.join("params.bin")).unwrap();
    run(
        p,
        &[
            "build-ann",
            "--catalog",
            s(&cat),
            "--params",
            s(&p.join("params.bin")),
            "--out",
            s(&p.join("index.bin")),
        ],
    );
    let out = run(
        p,
        &[
            "search",
            "--catalog",
            s(&cat),
            "--params",
            s(&p.join("params.bin")),
            "--index",
            s(&p.join("index.bin")),
            "--query",
            "drill",
            "-k",
            "1",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("solo\t"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["ingest", "--catalog"])
        .arg(dir.path().join("missing.jsonl"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    std::fs::write(dir.path().join("bad.cfg"), "nonsense.key = 3\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(dir.path().join("bad.cfg"))
        .args(["generate", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error: config"));
}

#[test]
fn bench_prints_csv_rows() {
    let out = bin()
        .args([
            "bench",
            "--sizes",
            "500,1000",
            "--samplers",
            "tb_hns",
            "--trials",
            "50",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], taxoneg::eval::bench::BENCH_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("tb_hns,500,50,"));
}
