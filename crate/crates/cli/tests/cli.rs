use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use bob_core::index_store::load_index;
use bob_service::payload::{scan_search, ScanRequest};
use serde_json::Value;

fn bob(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bob")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = bob(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CORPUS: &str = r#"{
  "classes": [
    {"diagnosis": "Lung Adenocarcinoma", "site": "Lung", "slides": 3,
     "texture": {"base_rgb": [200, 120, 170], "accent_rgb": [120, 50, 110], "stripe_period_px": 14,
                 "stripe_angle_deg": 30, "stripe_contrast": 0.6, "blob_density": 0.002, "blob_radius_px": 6}},
    {"diagnosis": "Lung Squamous Cell Carcinoma", "site": "Lung", "slides": 3,
     "texture": {"base_rgb": [150, 90, 190], "accent_rgb": [70, 40, 140], "stripe_period_px": 40,
                 "stripe_angle_deg": 100, "stripe_contrast": 0.2, "blob_density": 0.01, "blob_radius_px": 3}}
  ],
  "width_px": 512,
  "height_px": 512,
  "magnifications": [20, 5, 1.25],
  "background_fraction": 0.4
}"#;

const CONFIG: &str = r#"{"s_l": 16, "s_h": 64}"#;

const PLAN: &str = r#"{
  "experiments": [{"attribute": "diagnosis", "attribute_value": "Lung Adenocarcinoma", "top_k": 2,
                   "mosaic_fractions": [0.5, 1.0], "repeats": 3}],
  "confusion_sites": ["lung"]
}"#;

/// gen-corpus, index and eval under `dir`.
fn pipeline(dir: &Path) {
    std::fs::write(dir.join("corpus.json"), CORPUS).unwrap();
    std::fs::write(dir.join("config.json"), CONFIG).unwrap();
    std::fs::write(dir.join("plan.json"), PLAN).unwrap();
    let gen = ok(&["gen-corpus", s(&dir.join("corpus.json")), "7", "-o", s(&dir.join("corpus"))]);
    assert_eq!(gen["slides"].as_array().unwrap().len(), 6);
    let idx = ok(&[
        "index",
        s(&dir.join("corpus")),
        "-o",
        s(&dir.join("index.bob")),
        "--config",
        s(&dir.join("config.json")),
    ]);
    assert_eq!(idx["slides"], 6);
    assert_eq!(idx["barcode_len"], 255);
    ok(&[
        "eval",
        "--index",
        s(&dir.join("index.bob")),
        "--spec",
        s(&dir.join("plan.json")),
        "-o",
        s(&dir.join("eval")),
    ]);
}

#[test]
fn pipeline_outputs_are_deterministic_and_well_formed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for rel in [
        "index.bob",
        "eval/diagnosis-lung-adenocarcinoma/loo.csv",
        "eval/confusion_lung.csv",
        "eval/summary.json",
    ] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    let loo = std::fs::read_to_string(a.path().join("eval/diagnosis-lung-adenocarcinoma/loo.csv")).unwrap();
    let mut lines = loo.lines();
    assert_eq!(lines.next(), Some("query_id,fraction,seed,success,correct_count"));
    assert_eq!(lines.count(), 3 * 3 + 3);
    let confusion = std::fs::read_to_string(a.path().join("eval/confusion_lung.csv")).unwrap();
    assert!(confusion.starts_with("true,predicted,count\n"));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(a.path().join("eval/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["s_l"], 16);
    assert_eq!(summary["extractor"]["extractor_id"], "ref-v1");
    assert!(summary["experiments"][0]["random_baseline"].as_f64().unwrap() > 0.0);
}

#[test]
fn search_prints_the_service_payload() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let index_path = dir.path().join("index.bob");
    let index = load_index(&index_path).unwrap();
    let id = index.slides().next().unwrap().slide_id.clone();
    let got = ok(&["search", "--index", s(&index_path), "--slide", &id, "-k", "3", "--fraction", "0.5", "--seed", "2"]);
    let mut req = ScanRequest::for_slide(&id, 3);
    req.fraction = Some(0.5);
    req.seed = Some(2);
    assert_eq!(got, serde_json::to_value(scan_search(&index, &req, None).unwrap()).unwrap());
    assert_eq!(got["results"].as_array().unwrap().len(), 3);

    let vertical = ok(&["search", "--index", s(&index_path), "--slide", &id, "--mode", "vertical", "--site", "Lung"]);
    assert_eq!(vertical["results"].as_array().unwrap().len(), 5);

    let upload = ok(&["search", "--index", s(&index_path), "--upload", s(&dir.path().join("corpus").join(&id)), "-k", "2"]);
    assert_eq!(upload["uploaded"], true);

    let p = &index.get(&id).unwrap().bob.patches[0];
    let patch = ok(&[
        "patch",
        "--index",
        s(&index_path),
        "--slide",
        &id,
        "--grid-x",
        &p.grid_x.to_string(),
        "--grid-y",
        &p.grid_y.to_string(),
        "-k",
        "4",
    ]);
    assert_eq!(patch["results"][0]["distance"], 0);
    assert_eq!(patch["results"].as_array().unwrap().len(), 4);
}

#[test]
fn feature_files_round_trip_through_index() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let feat = dir.path().join("ext.feat");
    let corpus = dir.path().join("corpus");
    let config = dir.path().join("config.json");
    let listing = bob(&["mosaic", s(&corpus), "--config", s(&config)]);
    assert!(listing.status.success());
    let listing = String::from_utf8(listing.stdout).unwrap();
    assert!(listing.starts_with("# slide_id grid_x grid_y x y size magnification\n"));

    let written = ok(&["mosaic", s(&corpus), "--config", s(&config), "--features-out", s(&feat), "--extractor-id", "imported"]);
    assert_eq!(written["patches"].as_u64().unwrap() as usize, listing.lines().count() - 1);
    ok(&[
        "index",
        s(&corpus),
        "-o",
        s(&dir.path().join("ext.bob")),
        "--config",
        s(&config),
        "--features",
        s(&feat),
    ]);
    let builtin = load_index(dir.path().join("index.bob")).unwrap();
    let external = load_index(dir.path().join("ext.bob")).unwrap();
    assert_eq!(external.extractor.extractor_id, "imported");
    for (a, b) in builtin.slides().zip(external.slides()) {
        assert_eq!(a.bob.barcodes, b.bob.barcodes);
    }
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = bob(&["search", "--index", s(&dir.path().join("none.bob")), "--slide", "x"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    pipeline(dir.path());
    let index = s(&dir.path().join("index.bob")).to_string();
    let unknown = bob(&["search", "--index", &index, "--slide", "nope"]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown slide nope"));
    let no_site = bob(&["search", "--index", &index, "--slide", "nope", "--mode", "vertical"]);
    assert!(String::from_utf8_lossy(&no_site.stderr).contains("site"));
    assert!(!bob(&["search", "--index", &index]).status.success());

    std::fs::write(dir.path().join("bad.json"), r#"{"classes": []}"#).unwrap();
    let bad = bob(&["gen-corpus", s(&dir.path().join("bad.json")), "1", "-o", s(&dir.path().join("x"))]);
    assert!(!bad.status.success());

    std::fs::create_dir(dir.path().join("empty")).unwrap();
    assert!(!bob(&["index", s(&dir.path().join("empty")), "-o", s(&dir.path().join("e.bob"))]).status.success());
}

fn http_get(addr: &str, path: &str) -> (String, Vec<u8>) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    (String::from_utf8_lossy(&raw[..split]).into_owned(), raw[split + 4..].to_vec())
}

#[test]
fn serve_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_bob"))
        .args([
            "serve",
            "--index",
            s(&dir.path().join("index.bob")),
            "--port",
            "0",
            "--corpus",
            s(&dir.path().join("corpus")),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();

    let (head, body) = http_get(&addr, "/slides");
    assert!(head.starts_with("HTTP/1.1 200"), "{head}");
    assert!(String::from_utf8_lossy(&body).contains("\"barcode_len\":255"));
    let index = load_index(dir.path().join("index.bob")).unwrap();
    let id = &index.slides().next().unwrap().slide_id;
    let (head, body) = http_get(&addr, &format!("/slides/{id}/thumbnail"));
    assert!(head.to_ascii_lowercase().contains("content-type: image/png"), "{head}");
    assert_eq!(&body[1..4], b"PNG");
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn shipped_configs_parse_and_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let read = |name: &str| std::fs::read_to_string(root.join(name)).unwrap();
    let corpus: bob_core::CorpusSpec = serde_json::from_str(&read("corpus-demo.json")).unwrap();
    corpus.validate().unwrap();
    assert_eq!(corpus.total_slides(), 40);
    let cfg: bob_core::IndexingConfig = serde_json::from_str(&read("index-desk.json")).unwrap();
    cfg.validate().unwrap();
    assert_eq!((cfg.s_l, cfg.s_h), (16, 64));
    let plan: bob_core::EvalPlan = serde_json::from_str(&read("eval-plan.json")).unwrap();
    assert_eq!(plan.experiments.len(), 6);

    let partial: bob_core::IndexingConfig = serde_json::from_str(r#"{"kmeans": {"seed": 3}}"#).unwrap();
    assert_eq!(partial.kmeans.seed, 3);
    assert_eq!(partial.kmeans.max_iters, 100);
}
