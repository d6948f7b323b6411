//! Retrieval-quality and efficiency measurement: recall at k, queries per
//! second under multi-threaded load, and canonical machine-readable reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::lexindex::{
    brute_force_search, IndexStats, InvertedIndex, QuantizedLexiconVector, RetrievalResult,
    BYTES_PER_POSTING,
};

/// Relevance judgments: query id to the set of relevant sample ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: HashMap<String, HashSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, relevant_id: impl Into<String>) {
        self.map
            .entry(query_id.into())
            .or_default()
            .insert(relevant_id.into());
    }

    pub fn relevant(&self, query_id: &str) -> Option<&HashSet<String>> {
        self.map.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Parse the TSV interchange form: one `query_id<TAB>relevant_id` pair
    /// per line, duplicates merged.
    pub fn from_tsv<R: BufRead>(r: R) -> Result<Qrels> {
        let mut qrels = Qrels::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (q, d) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidInput(format!(
                    "qrels line {} has no tab separator: {line:?}",
                    lineno + 1
                ))
            })?;
            qrels.insert(q, d);
        }
        Ok(qrels)
    }

    pub fn to_tsv(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        for (q, rels) in &self.map {
            for d in rels {
                lines.push(format!("{q}\t{d}"));
            }
        }
        lines.sort();
        let mut out = lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

/// Hit-rate recall: the fraction of queries whose top-k contains at least
/// one relevant id. Every query in `results` must appear in the qrels.
pub fn recall_at_k(
    results: &[(String, RetrievalResult)],
    qrels: &Qrels,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no query results to score".into()));
    }
    for (query_id, _) in results {
        if qrels.relevant(query_id).is_none() {
            return Err(Error::MissingQrel(query_id.clone()));
        }
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = results
            .iter()
            .filter(|(query_id, result)| {
                let relevant = qrels.relevant(query_id).expect("checked above");
                result
                    .hits
                    .iter()
                    .take(k)
                    .any(|(doc_id, _)| relevant.contains(doc_id))
            })
            .count();
        out.insert(k, hits as f64 / results.len() as f64);
    }
    Ok(out)
}

/// Anything the QPS benchmark can drive: the inverted index, or the
/// full-scan baseline over raw quantized vectors.
pub trait SearchEngine: Sync {
    fn run(&self, query: &QuantizedLexiconVector, k: usize) -> Result<RetrievalResult>;
    fn engine_stats(&self) -> IndexStats;
    fn label(&self) -> &'static str;
}

impl SearchEngine for InvertedIndex {
    fn run(&self, query: &QuantizedLexiconVector, k: usize) -> Result<RetrievalResult> {
        self.search(query, k)
    }

    fn engine_stats(&self) -> IndexStats {
        self.stats()
    }

    fn label(&self) -> &'static str {
        "inverted_index"
    }
}

/// Full-scan baseline over the same vectors, for efficiency comparisons.
pub struct FullScanBaseline<'a> {
    pub corpus: &'a [QuantizedLexiconVector],
}

impl SearchEngine for FullScanBaseline<'_> {
    fn run(&self, query: &QuantizedLexiconVector, k: usize) -> Result<RetrievalResult> {
        brute_force_search(self.corpus, query, k)
    }

    fn engine_stats(&self) -> IndexStats {
        let total: u64 = self.corpus.iter().map(|d| d.nnz() as u64).sum();
        let max_doc = self
            .corpus
            .iter()
            .map(|d| d.nnz() as u64)
            .max()
            .unwrap_or(0);
        IndexStats {
            doc_count: self.corpus.len(),
            total_postings: total,
            payload_bytes: BYTES_PER_POSTING * total,
            avg_doc_bytes: if self.corpus.is_empty() {
                0.0
            } else {
                (BYTES_PER_POSTING * total) as f64 / self.corpus.len() as f64
            },
            max_doc_bytes: BYTES_PER_POSTING * max_doc,
        }
    }

    fn label(&self) -> &'static str {
        "full_scan"
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub k: usize,
    pub threads: usize,
    pub warmup: Duration,
    pub duration: Duration,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub engine: &'static str,
    pub qps: f64,
    pub completed: u64,
    pub wall_secs: f64,
    pub threads: usize,
    pub k: usize,
    pub num_queries: usize,
    pub warmup_secs: f64,
    pub duration_secs: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub index_stats: IndexStats,
    pub recall: Option<BTreeMap<usize, f64>>,
}

/// Sustained-throughput measurement: worker threads cycle the query set
/// round-robin against a shared immutable engine. Search is pure, so the
/// measurement never alters retrieval results.
pub fn qps_bench<E: SearchEngine>(
    engine: &E,
    queries: &[QuantizedLexiconVector],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    if cfg.threads == 0 {
        return Err(Error::InvalidArgument("thread count must be >= 1".into()));
    }
    if cfg.duration.is_zero() {
        return Err(Error::InvalidArgument(
            "measurement duration must be > 0".into(),
        ));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("search requires k >= 1".into()));
    }

    let run_window = |window: Duration, record: bool| -> Result<(u64, f64, Vec<f64>)> {
        let next = AtomicUsize::new(0);
        let completed = AtomicU64::new(0);
        let start = Instant::now();
        let deadline = start + window;
        let latencies = std::sync::Mutex::new(Vec::<f64>::new());
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for _ in 0..cfg.threads {
                handles.push(scope.spawn(|| -> Result<()> {
                    let mut local = Vec::new();
                    while Instant::now() < deadline {
                        let idx = next.fetch_add(1, Ordering::Relaxed) % queries.len();
                        let t0 = Instant::now();
                        engine.run(&queries[idx], cfg.k)?;
                        if record {
                            local.push(t0.elapsed().as_secs_f64() * 1e3);
                        }
                        completed.fetch_add(1, Ordering::Relaxed);
                    }
                    if record {
                        latencies.lock().unwrap().extend(local);
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("benchmark worker panicked")?;
            }
            Ok(())
        })?;
        let wall = start.elapsed().as_secs_f64();
        Ok((
            completed.load(Ordering::Relaxed),
            wall,
            latencies.into_inner().unwrap(),
        ))
    };

    if !cfg.warmup.is_zero() {
        run_window(cfg.warmup, false)?;
    }
    let (completed, wall, mut latencies) = run_window(cfg.duration, true)?;
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        if latencies.is_empty() {
            return 0.0;
        }
        let idx = ((q * latencies.len() as f64).ceil() as usize)
            .clamp(1, latencies.len())
            - 1;
        latencies[idx]
    };

    Ok(BenchReport {
        engine: engine.label(),
        qps: completed as f64 / wall,
        completed,
        wall_secs: wall,
        threads: cfg.threads,
        k: cfg.k,
        num_queries: queries.len(),
        warmup_secs: cfg.warmup.as_secs_f64(),
        duration_secs: cfg.duration.as_secs_f64(),
        p50_ms: quantile(0.50),
        p99_ms: quantile(0.99),
        index_stats: engine.engine_stats(),
        recall: None,
    })
}

/// Hardware metadata recorded alongside machine-dependent throughput
/// numbers.
pub fn hardware_metadata() -> Value {
    json!({
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(0),
    })
}

impl BenchReport {
    pub fn to_value(&self) -> Value {
        let mut root = serde_json::Map::new();
        root.insert("engine".into(), json!(self.engine));
        root.insert("qps".into(), json!(self.qps));
        root.insert("completed".into(), json!(self.completed));
        root.insert("wall_secs".into(), json!(self.wall_secs));
        root.insert("p50_ms".into(), json!(self.p50_ms));
        root.insert("p99_ms".into(), json!(self.p99_ms));
        root.insert(
            "config".into(),
            json!({
                "k": self.k,
                "threads": self.threads,
                "warmup_secs": self.warmup_secs,
                "duration_secs": self.duration_secs,
                "num_queries": self.num_queries,
            }),
        );
        root.insert(
            "index_stats".into(),
            json!({
                "doc_count": self.index_stats.doc_count,
                "total_postings": self.index_stats.total_postings,
                "payload_bytes": self.index_stats.payload_bytes,
                "avg_doc_bytes": self.index_stats.avg_doc_bytes,
                "max_doc_bytes": self.index_stats.max_doc_bytes,
            }),
        );
        if let Some(recall) = &self.recall {
            let mut rec = serde_json::Map::new();
            for (k, v) in recall {
                rec.insert(format!("r{k}"), json!(v));
            }
            root.insert("recall".into(), Value::Object(rec));
        }
        root.insert("hardware".into(), hardware_metadata());
        Value::Object(root)
    }
}

/// Serialize a report value canonically: object keys sorted (the default
/// `serde_json` map is a BTreeMap) and floats in shortest round-trip form,
/// so equal reports are byte-identical and parse -> emit is stable.
pub fn emit_report(report: &Value) -> Vec<u8> {
    serde_json::to_vec(report).expect("report serialization cannot fail")
}

pub fn parse_report(bytes: &[u8]) -> Result<Value> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Build a recall report value from per-query results.
pub fn recall_report(
    results: &[(String, RetrievalResult)],
    qrels: &Qrels,
    ks: &[usize],
) -> Result<Value> {
    let recalls = recall_at_k(results, qrels, ks)?;
    let mut rec = serde_json::Map::new();
    for (k, v) in &recalls {
        rec.insert(format!("r{k}"), json!(v));
    }
    Ok(json!({
        "num_queries": results.len(),
        "recall": Value::Object(rec),
    }))
}
