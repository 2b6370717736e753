mod common;

use common::{http, spawn_server, tiny_checkpoint};
use layoutgen_cli::engine::GenerateResponse;
use serde_json::{json, Value};

fn setup() -> (tempfile::TempDir, std::net::SocketAddr) {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_checkpoint(dir.path(), "alpha", 1);
    let b = tiny_checkpoint(dir.path(), "beta", 2);
    let addr = spawn_server(&[a, b]);
    (dir, addr)
}

#[test]
fn healthz_answers_ok() {
    let (_dir, addr) = setup();
    let r = http(addr, "GET", "/healthz", None);
    assert_eq!((r.status, r.body.as_str()), (200, "ok"));
}

#[test]
fn fully_locked_request_is_a_no_op() {
    let (_dir, addr) = setup();
    let elements = json!([
        {"category": "header", "x": 0.5, "y": 0.05, "w": 0.9, "h": 0.08},
        {"category": "button", "x": 0.3, "y": 0.9, "w": 0.2, "h": 0.05}
    ]);
    let req = json!({"mode": "conditional", "elements": elements, "trace": true});
    let r = http(addr, "POST", "/v1/generate", Some(&req.to_string()));
    assert_eq!(r.status, 200, "{}", r.body);
    let body = r.json();
    assert_eq!(body["layout"]["elements"], elements);
    assert_eq!(body["trace"], json!([]));
}

#[test]
fn trace_is_present_only_when_requested() {
    let (_dir, addr) = setup();
    let mut req = json!({"elements": [{"category": "text"}], "trace": false});
    let body = http(addr, "POST", "/v1/generate", Some(&req.to_string())).json();
    assert!(body.get("trace").is_none());
    req["trace"] = json!(true);
    let body = http(addr, "POST", "/v1/generate", Some(&req.to_string())).json();
    let trace = body["trace"].as_array().unwrap();
    assert!(!trace.is_empty());
    for key in ["group", "i", "gamma", "n_i", "positions", "snapshot"] {
        assert!(trace[0].get(key).is_some(), "trace record lacks {key}");
    }
}

#[test]
fn seeded_unconditional_requests_are_identical() {
    let (_dir, addr) = setup();
    let req = json!({"mode": "unconditional", "config": {"seed": 77, "predictor": "topk:5"}}).to_string();
    let first = http(addr, "POST", "/v1/generate", Some(&req));
    assert_eq!(first.status, 200, "{}", first.body);
    let bodies: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..6)
            .map(|_| s.spawn(|| http(addr, "POST", "/v1/generate", Some(&req)).body))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(bodies.iter().all(|b| *b == first.body));
    let parsed: GenerateResponse = serde_json::from_str(&first.body).unwrap();
    assert!(!parsed.layout.elements.is_empty());
}

#[test]
fn malformed_element_names_the_field() {
    let (_dir, addr) = setup();
    let req = json!({"elements": [{"category": "text", "w": -0.3}]}).to_string();
    let r = http(addr, "POST", "/v1/generate", Some(&req));
    assert_eq!(r.status, 400);
    let body = r.json();
    assert_eq!(body["field"], "elements[0].w");
    assert_eq!(body["code"], "validation_error");
    assert!(body["message"].as_str().unwrap().contains("-0.3"));
}

#[test]
fn errors_are_structured() {
    let (_dir, addr) = setup();
    let cases = [
        ("POST", "/v1/generate", Some("{not json"), 400, "malformed_json"),
        ("POST", "/v1/generate", Some(r#"{"bogus": 1}"#), 400, "malformed_json"),
        ("POST", "/v1/generate", Some(r#"{"model": "gamma", "elements": [{}]}"#), 404, "unknown_model"),
        ("POST", "/v1/generate", Some(r#"{"mode": "unconditional", "elements": [{}]}"#), 400, "validation_error"),
        ("POST", "/v1/generate", Some(r#"{"elements": [{"category": "sofa"}]}"#), 400, "validation_error"),
        ("GET", "/v1/prior?model=gamma", None, 404, "unknown_model"),
        ("GET", "/v1/attention", None, 400, "validation_error"),
        ("GET", "/v1/attention?seq=1,999,2", None, 400, "validation_error"),
        ("GET", "/v2/nothing", None, 404, "not_found"),
    ];
    for (method, path, body, status, code) in cases {
        let r = http(addr, method, path, body);
        assert_eq!(r.status, status, "{method} {path}: {}", r.body);
        let v = r.json();
        assert_eq!(v["code"], code, "{method} {path}");
        assert!(v["message"].is_string());
    }
    let many = json!({"elements": vec![json!({}); 9]}).to_string();
    let r = http(addr, "POST", "/v1/generate", Some(&many));
    assert_eq!((r.status, r.json()["code"].clone()), (400, json!("capacity_exceeded")));
}

#[test]
fn models_lists_every_checkpoint() {
    let (_dir, addr) = setup();
    let r = http(addr, "GET", "/v1/models", None);
    assert_eq!(r.status, 200);
    let models = r.json();
    let ids: Vec<&str> = models.as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["alpha", "beta"]);
    let cats = &models[0]["schema"]["categories"];
    assert_eq!(cats, &json!(["header", "footer", "text", "image", "button"]));
    assert!(models[0]["num_parameters"].as_u64().unwrap() > 0);
}

#[test]
fn models_can_be_selected_by_id() {
    let (_dir, addr) = setup();
    let req = |m: &str| json!({"model": m, "elements": [{"category": "text"}]}).to_string();
    let a = http(addr, "POST", "/v1/generate", Some(&req("alpha")));
    let default = http(addr, "POST", "/v1/generate", Some(r#"{"elements": [{"category": "text"}]}"#));
    assert_eq!(a.body, default.body);
    let b = http(addr, "POST", "/v1/generate", Some(&req("beta")));
    assert_eq!(b.status, 200);
}

#[test]
fn prior_is_a_distribution() {
    let (_dir, addr) = setup();
    let v = http(addr, "GET", "/v1/prior", None).json();
    assert_eq!(v["model"], "alpha");
    let probs = v["probabilities"].as_object().unwrap();
    let sum: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-12);
    let counts: u64 = v["counts"].as_object().unwrap().values().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, v["total"].as_u64().unwrap());
}

#[test]
fn attention_rows_are_distributions() {
    let (_dir, addr) = setup();
    let r = http(addr, "GET", "/v1/attention?seq=1,4,3,3,3,3,2", None);
    assert_eq!(r.status, 200, "{}", r.body);
    let v = r.json();
    assert_eq!(v["len"], 7);
    let weights = v["weights"].as_array().unwrap();
    assert_eq!(weights.len(), v["layers"].as_u64().unwrap() as usize);
    for head in weights.iter().flat_map(|l| l.as_array().unwrap()) {
        let rows = head.as_array().unwrap();
        assert_eq!(rows.len(), 7);
        for row in rows {
            let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn metrics_endpoint_scores_layouts() {
    let (_dir, addr) = setup();
    let layout = json!({"canvas": {"w": 1, "h": 1}, "elements": [
        {"category": "text", "x": 0.5, "y": 0.5, "w": 0.4, "h": 0.2},
        {"category": "image", "x": 0.5, "y": 0.75, "w": 0.4, "h": 0.2}
    ]});
    let req = json!({"layouts": [layout.clone()], "references": [layout]});
    let r = http(addr, "POST", "/v1/metrics/evaluate", Some(&req.to_string()));
    assert_eq!(r.status, 200, "{}", r.body);
    let v = r.json();
    for m in ["iou", "overlap", "alignment", "docsim"] {
        assert!(v["summary"][m]["mean"].is_number(), "missing {m}");
    }
    assert_eq!(v["summary"]["iou"]["mean"], 0.0);
    let fid = json!({"layouts": [req["layouts"][0]], "references": req["references"], "metrics": ["fid"]});
    let r = http(addr, "POST", "/v1/metrics/evaluate", Some(&fid.to_string()));
    assert_eq!(r.status, 400);
    let bad: Value = json!({"layouts": [{"canvas": {"w": 1, "h": 1}, "elements": [{"category": "sofa", "x": 0.1, "y": 0.1, "w": 0.1, "h": 0.1}]}]});
    let r = http(addr, "POST", "/v1/metrics/evaluate", Some(&bad.to_string()));
    assert_eq!((r.status, r.json()["field"].clone()), (400, json!("layouts[0]")));
}
