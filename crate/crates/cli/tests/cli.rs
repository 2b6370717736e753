mod common;

use std::path::Path;
use std::process::{Command, Output};

use layoutgen_cli::engine::{layout_to_string, GenerateResponse};
use layoutgen_cli::exit;
use serde_json::{json, Value};

fn layoutgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutgen"))
        .args(args)
        .env_remove("LAYOUTGEN_PORT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = layoutgen(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(layoutgen(&[]).status.code(), Some(exit::USAGE));
    assert_eq!(layoutgen(&["generate"]).status.code(), Some(exit::USAGE));
    assert_eq!(layoutgen(&["synth", "--n", "many", "--out", "x"]).status.code(), Some(exit::USAGE));
    assert_eq!(
        layoutgen(&["generate", "--model", "m", "--input", "i", "--unconditional"]).status.code(),
        Some(exit::USAGE)
    );
    assert_eq!(layoutgen(&["--help"]).status.code(), Some(exit::SUCCESS));
}

#[test]
fn file_errors_exit_with_three_and_name_the_path() {
    let out = layoutgen(&["generate", "--model", "/definitely/missing.ckpt", "--unconditional"]);
    assert_eq!(out.status.code(), Some(exit::IO));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/missing.ckpt"));
}

#[test]
fn synth_train_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let schema = dir.path().join("schema.json");
    let ckpt = dir.path().join("model.ckpt");
    ok(&["synth", "--n", "60", "--seed", "5", "--out", p(&corpus), "--schema-out", p(&schema)]);
    assert_eq!(std::fs::read_to_string(&corpus).unwrap().lines().count(), 60);
    assert!(read_json(&schema)["categories"].is_array());

    ok(&[
        "train", "--data", p(&corpus), "--schema", p(&schema), "--out", p(&ckpt), "--steps", "4", "--eval-interval", "2",
        "--policy", "random:0.15", "--batch-size", "4",
    ]);
    let log = std::fs::read_to_string(dir.path().join("model.ckpt.log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r["step"].as_u64().unwrap()).collect::<Vec<_>>(), [2, 4]);
    assert!(records.iter().all(|r| r["train_loss"].as_f64().unwrap().is_finite()));

    let input = dir.path().join("input.json");
    let given = json!([
        {"category": "header", "w": 0.875, "h": 0.09375},
        {"category": "image", "w": 0.4, "h": 0.3},
        {"category": "text", "w": 0.61, "h": 0.05}
    ]);
    std::fs::write(&input, json!({"elements": given}).to_string()).unwrap();
    let trace = dir.path().join("trace.json");
    let svg = dir.path().join("out.svg");
    let out = dir.path().join("out.json");
    ok(&[
        "generate", "--model", p(&ckpt), "--input", p(&input), "--seed", "3", "--trace", p(&trace), "--svg", p(&svg),
        "--out", p(&out),
    ]);
    let layout = read_json(&out);
    for (got, want) in layout["elements"].as_array().unwrap().iter().zip(given.as_array().unwrap()) {
        for key in ["category", "w", "h"] {
            assert_eq!(got[key], want[key], "{key} changed");
        }
    }
    assert!(!read_json(&trace).as_array().unwrap().is_empty());

    let svg_text = std::fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&svg_text).expect("well-formed SVG");
    let rects = doc.descendants().filter(|n| n.has_tag_name("rect")).count();
    assert_eq!(rects, 3);

    // Same request through stdout gives the same bytes.
    let stdout = ok(&["generate", "--model", p(&ckpt), "--input", p(&input), "--seed", "3"]);
    assert_eq!(stdout.trim_end(), std::fs::read_to_string(&out).unwrap());
}

#[test]
fn invalid_input_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::tiny_checkpoint(dir.path(), "m", 1);
    let input = dir.path().join("bad.json");
    std::fs::write(&input, r#"{"elements": [{"category": "text", "w": -1}]}"#).unwrap();
    let out = layoutgen(&["generate", "--model", p(&ckpt), "--input", p(&input)]);
    assert_eq!(out.status.code(), Some(exit::VALIDATION));
    assert!(String::from_utf8_lossy(&out.stderr).contains("elements[0].w"));
    let out = layoutgen(&["generate", "--model", p(&ckpt), "--unconditional", "--order", "CCP"]);
    assert_eq!(out.status.code(), Some(exit::VALIDATION));
}

#[test]
fn identical_boxes_render_as_coincident_rectangles() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::tiny_checkpoint(dir.path(), "m", 1);
    let input = dir.path().join("twins.json");
    let e = json!({"category": "text", "x": 0.5, "y": 0.5, "w": 0.25, "h": 0.25});
    std::fs::write(&input, json!({"canvas": {"w": 400, "h": 800}, "elements": [e, e]}).to_string()).unwrap();
    let svg = dir.path().join("twins.svg");
    ok(&["generate", "--model", p(&ckpt), "--input", p(&input), "--svg", p(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let rects: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("rect")).collect();
    assert_eq!(rects.len(), 2);
    let attrs = |n: &roxmltree::Node| ["x", "y", "width", "height"].map(|a| n.attribute(a).unwrap().to_string());
    assert_eq!(attrs(&rects[0]), attrs(&rects[1]));
    assert_eq!(doc.root_element().attribute("viewBox"), Some("0 0 400 800"));
}

#[test]
fn eval_against_itself_maximizes_docsim() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let schema = dir.path().join("c.schema.json");
    ok(&["synth", "--n", "40", "--seed", "2", "--out", p(&corpus)]);
    let text = std::fs::read_to_string(&corpus).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.rotate_left(7);
    let shuffled = dir.path().join("shuffled.jsonl");
    std::fs::write(&shuffled, lines.join("\n")).unwrap();

    let eval = |refs: &Path| -> Value {
        let out = ok(&[
            "eval", "--schema", p(&schema), "--data", p(&corpus), "--references", p(refs), "--metrics",
            "iou,overlap,alignment,docsim",
        ]);
        serde_json::from_str(&out).unwrap()
    };
    let same = eval(&corpus);
    let other = eval(&shuffled);
    let docsim = |v: &Value| v["summary"]["docsim"]["mean"].as_f64().unwrap();
    assert!(docsim(&same) > docsim(&other), "{} vs {}", docsim(&same), docsim(&other));
    assert_eq!(same["summary"]["iou"], other["summary"]["iou"]);
    assert_eq!(same["per_layout"]["docsim"].as_array().unwrap().len(), 40);
}

#[test]
fn bench_reports_invocation_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("big.jsonl");
    let schema = dir.path().join("big.schema.json");
    let ckpt = dir.path().join("big.ckpt");
    ok(&["synth", "--n", "20", "--out", p(&corpus), "--max-items", "23"]);
    assert_eq!(read_json(&schema)["max_elements"], 25);
    ok(&["train", "--data", p(&corpus), "--schema", p(&schema), "--out", p(&ckpt), "--steps", "0"]);
    let out = ok(&["bench", "--model", p(&ckpt), "--objects", "5,20", "--repeats", "2", "--T", "12"]);
    let report: Value = serde_json::from_str(&out).unwrap();
    let rows = report["rows"].as_array().unwrap();
    for (row, k) in rows.iter().zip([5u64, 20]) {
        assert_eq!(row["objects"], k);
        assert_eq!(row["nar_invocations"], 12);
        assert_eq!(row["ar_invocations"], 5 * k + 1);
        assert!(row["speedup"].as_f64().unwrap() > 0.0);
        assert!(row["nar_wall_ms"]["mean"].is_number() && row["ar_sim_wall_ms"]["std"].is_number());
    }
    let out = layoutgen(&["bench", "--model", p(&ckpt), "--objects", "26", "--repeats", "1"]);
    assert_eq!(out.status.code(), Some(exit::VALIDATION));
}

#[test]
fn cli_and_service_agree_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = common::tiny_checkpoint(dir.path(), "m", 4);
    let addr = common::spawn_server(std::slice::from_ref(&ckpt));

    let input = json!({"elements": [{"category": "text", "w": 0.5}, {"category": "image"}, {"x": 0.25, "y": 0.75}]});
    let input_path = dir.path().join("in.json");
    std::fs::write(&input_path, input.to_string()).unwrap();
    for (seed, predictor) in [("1", "greedy"), ("2", "topk:3")] {
        let cli = ok(&["generate", "--model", p(&ckpt), "--input", p(&input_path), "--seed", seed, "--predictor", predictor]);
        let mut req = input.clone();
        req["config"] = json!({"seed": seed.parse::<u64>().unwrap(), "predictor": predictor});
        let r = common::http(addr, "POST", "/v1/generate", Some(&req.to_string()));
        assert_eq!(r.status, 200);
        let resp: GenerateResponse = serde_json::from_str(&r.body).unwrap();
        assert_eq!(cli.trim_end(), layout_to_string(&resp.layout).unwrap());
    }

    let cli = ok(&["generate", "--model", p(&ckpt), "--unconditional", "--seed", "11"]);
    let r = common::http(addr, "POST", "/v1/generate", Some(r#"{"mode":"unconditional","config":{"seed":11}}"#));
    let resp: GenerateResponse = serde_json::from_str(&r.body).unwrap();
    assert_eq!(cli.trim_end(), layout_to_string(&resp.layout).unwrap());
}
