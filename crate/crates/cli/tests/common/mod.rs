#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use layoutgen::dataset::{estimate_length_prior, generate_synthetic, SyntheticStyle};
use layoutgen::model::{init_params, CheckpointFile, ModelConfig};
use layoutgen_cli::engine::{ModelMetadata, ServedModel};
use layoutgen_cli::server::{serve, AppState};

/// Writes an untrained small model for the synthetic schema and returns its path.
pub fn tiny_checkpoint(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let corpus = generate_synthetic(120, seed, &SyntheticStyle::default()).unwrap();
    let mut mc = ModelConfig::desk(&corpus.schema);
    mc.embed_dim = 16;
    mc.ffn_dim = 32;
    let meta = ModelMetadata {
        schema: corpus.schema.clone(),
        length_prior: estimate_length_prior(&corpus).unwrap(),
        train_config: None,
        provenance: corpus.provenance.clone(),
    };
    let mut ck = CheckpointFile::new(init_params(&mc, seed).unwrap());
    ck.metadata = meta.to_value().unwrap();
    let path = dir.join(format!("{name}.ckpt"));
    ck.save(&path).unwrap();
    path
}

/// Starts the service on an ephemeral port in a background thread.
pub fn spawn_server(models: &[PathBuf]) -> SocketAddr {
    let loaded = models.iter().map(|p| ServedModel::load(p).unwrap()).collect();
    let state = Arc::new(AppState::new(loaded, None).unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            serve(listener, state).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.body))
    }
}

/// Minimal HTTP/1.1 client: one request per connection.
pub fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> HttpResponse {
    let mut stream = TcpStream::connect(addr).unwrap();
    let body = body.unwrap_or("");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").expect("response has a header block");
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(
        !head.to_ascii_lowercase().contains("transfer-encoding: chunked"),
        "client does not decode chunked bodies"
    );
    HttpResponse {
        status,
        body: body.to_string(),
    }
}
