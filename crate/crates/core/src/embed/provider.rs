//! Text → embedding providers.
//!
//! The real system encodes text with a large embedding model; here that is
//! an interface with three implementations: an HTTP client for an external
//! model server, a deterministic hashed bag-of-words encoder for offline
//! runs, and a fixed lookup table for tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instruction prefix submitted with every text (passed through unchanged).
pub const DEFAULT_QUERY: &str = "提取支付宝用户数据的文本特征";

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// One vector per text, in input order.
    fn embed(&self, query: &str, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    query: &'a str,
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f32>>,
}

/// `POST {endpoint}/embed` with `{"query", "texts"}`, expecting
/// `{"dim", "embeddings"}` back. An empty `texts` returns immediately
/// without contacting the server.
pub fn fetch_remote_embeddings(
    endpoint: &str,
    query: &str,
    texts: &[String],
    expected_dim: usize,
) -> Result<Vec<Vec<f32>>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let url = format!("{}/embed", endpoint.trim_end_matches('/'));
    let mut resp = ureq::post(&url)
        .send_json(EmbedRequest { query, texts })
        .map_err(|e| match e {
            ureq::Error::StatusCode(code) => Error::Provider(format!("{url}: HTTP status {code}")),
            other => Error::Provider(format!("{url}: {other}")),
        })?;
    let body: EmbedResponse = resp
        .body_mut()
        .read_json()
        .map_err(|e| Error::Provider(format!("{url}: bad response body: {e}")))?;
    if body.dim != expected_dim {
        return Err(Error::Provider(format!(
            "server returned dim {}, configured {expected_dim}",
            body.dim
        )));
    }
    if body.embeddings.len() != texts.len() {
        return Err(Error::Provider(format!(
            "server returned {} embeddings for {} texts",
            body.embeddings.len(),
            texts.len()
        )));
    }
    for (i, e) in body.embeddings.iter().enumerate() {
        if e.len() != expected_dim {
            return Err(Error::Provider(format!(
                "embedding {i} has dim {}, configured {expected_dim}",
                e.len()
            )));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Provider(format!("embedding {i} has non-finite values")));
        }
    }
    Ok(body.embeddings)
}

#[derive(Debug, Clone)]
pub struct HttpProvider {
    pub endpoint: String,
    pub dim: usize,
}

impl EmbeddingProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, query: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        fetch_remote_embeddings(&self.endpoint, query, texts, self.dim)
    }
}

/// Hashed bag-of-words: every lower-cased alphanumeric token maps to a fixed
/// Gaussian vector, the vectors are summed and L2-normalized. The query is
/// ignored since it is the same for every text.
#[derive(Debug, Clone)]
pub struct HashingProvider {
    pub dim: usize,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl HashingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        let mut tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            tokens.push(String::new());
        }
        for t in &tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(t.as_bytes()) ^ self.seed);
            for a in acc.iter_mut() {
                *a += rng.sample::<f64, _>(StandardNormal);
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        acc.iter().map(|v| (v / norm) as f32).collect()
    }
}

impl EmbeddingProvider for HashingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _query: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Fixed text → vector table.
#[derive(Debug, Clone, Default)]
pub struct MapProvider {
    pub dim: usize,
    pub table: BTreeMap<String, Vec<f32>>,
}

impl MapProvider {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector dim {} does not match provider dim {}",
                vector.len(),
                self.dim
            )));
        }
        self.table.insert(text.into(), vector);
        Ok(())
    }

    /// One `{"text":…,"vector":[…]}` object per line.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for (text, vector) in &self.table {
            serde_json::to_writer(&mut w, &MapEntry { text: text.clone(), vector: vector.clone() })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut out: Option<Self> = None;
        let mut offset = 0u64;
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                let e: MapEntry = serde_json::from_str(&line)
                    .map_err(|err| Error::format(offset, format!("bad embedding line: {err}")))?;
                out.get_or_insert_with(|| Self::new(e.vector.len())).insert(e.text, e.vector)?;
            }
            offset += line.len() as u64 + 1;
        }
        out.ok_or_else(|| Error::format(0, "embedding table is empty"))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(Error::file(path))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(Error::file(path))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapEntry {
    text: String,
    vector: Vec<f32>,
}

impl EmbeddingProvider for MapProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _query: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Provider(format!("no embedding for text {t:?}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `body` to every request; counts requests.
    fn stub_server(body: String) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut req = vec![0u8; len];
                reader.read_exact(&mut req).unwrap();
                let resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), hits)
    }

    #[test]
    fn remote_vector_returned_verbatim() {
        let (url, _) = stub_server(r#"{"dim":3,"embeddings":[[0.25,-1.5,3.0]]}"#.into());
        let out = fetch_remote_embeddings(&url, DEFAULT_QUERY, &["hello".into()], 3).unwrap();
        assert_eq!(out, vec![vec![0.25, -1.5, 3.0]]);
    }

    #[test]
    fn remote_dimension_mismatch_is_error() {
        let (url, _) = stub_server(format!(
            r#"{{"dim":8,"embeddings":[{:?}]}}"#,
            vec![0.0f32; 8]
        ));
        let err = fetch_remote_embeddings(&url, DEFAULT_QUERY, &["x".into()], 64).unwrap_err();
        assert!(err.to_string().contains("dim 8"), "{err}");
    }

    #[test]
    fn empty_text_list_sends_nothing() {
        let (url, hits) = stub_server("{}".into());
        let out = fetch_remote_embeddings(&url, DEFAULT_QUERY, &[], 4).unwrap();
        assert!(out.is_empty());
        assert_eq!(hits.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn transport_failure_is_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        assert!(fetch_remote_embeddings(&format!("http://{addr}"), "q", &["t".into()], 2).is_err());
    }

    #[test]
    fn hashing_provider_is_deterministic_and_normalized() {
        let p = HashingProvider::new(16, 1);
        let a = p.embed_one("The user purchased coffee");
        assert_eq!(a, p.embed_one("the USER purchased, coffee!"));
        let n: f32 = a.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
        assert_ne!(a, p.embed_one("The user purchased tea"));
    }

    #[test]
    fn map_provider_misses_are_errors() {
        let mut p = MapProvider::new(2);
        p.insert("a", vec![1.0, 0.0]).unwrap();
        assert!(p.insert("b", vec![1.0]).is_err());
        assert_eq!(p.embed("", &["a".into()]).unwrap(), vec![vec![1.0, 0.0]]);
        assert!(p.embed("", &["zzz".into()]).is_err());
    }

    #[test]
    fn map_table_round_trip() {
        let mut m = MapProvider::new(2);
        m.insert("a b", vec![1.0, -0.5]).unwrap();
        m.insert("c", vec![0.25, 3.0]).unwrap();
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        let back = MapProvider::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.table, m.table);
        assert!(MapProvider::read_jsonl("{\"text\":\"x\",\"vector\":[1]}\n{\"text\":\"y\",\"vector\":[1,2]}".as_bytes()).is_err());
        assert!(MapProvider::read_jsonl(&b""[..]).is_err());
    }
}
