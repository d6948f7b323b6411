//! The retrieval engine: impact quantization, inverted-index construction,
//! and exact lexicon-matching top-k search, plus a full-scan oracle.
//!
//! A query scores a candidate as the sum over shared terms of
//! `query_weight * candidate_weight`, in exact integer arithmetic. Search
//! walks only the posting lists of the query's own terms, so candidates
//! sharing no term are never touched.

mod format;
mod jsonl;

pub use format::{deserialize, serialize};
pub use jsonl::{read_quantized_jsonl, write_quantized_jsonl};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::sparse_repr::SparseLexiconVector;

/// Largest vocabulary addressable by the 2-byte term ids the index stores.
pub const MAX_VOCAB: usize = 65536;

/// One sample as `(term_id, weight)` pairs after quantization. Term ids are
/// strictly increasing 16-bit values; weights are 1..=255 (zeros dropped).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLexiconVector {
    pub id: String,
    terms: Vec<(u16, u8)>,
}

impl QuantizedLexiconVector {
    pub fn new(id: impl Into<String>, terms: Vec<(u16, u8)>) -> Result<Self> {
        let mut prev: Option<u16> = None;
        for &(term, weight) in &terms {
            if weight == 0 {
                return Err(Error::InvalidInput(format!(
                    "quantized weight for term {term} must be >= 1"
                )));
            }
            if let Some(p) = prev {
                if term <= p {
                    return Err(Error::InvalidInput(format!(
                        "term ids must be strictly increasing ({p} then {term})"
                    )));
                }
            }
            prev = Some(term);
        }
        Ok(QuantizedLexiconVector {
            id: id.into(),
            terms,
        })
    }

    pub fn terms(&self) -> &[(u16, u8)] {
        &self.terms
    }

    pub fn nnz(&self) -> usize {
        self.terms.len()
    }

    /// Exact integer dot product by merge walk. A single term contributes at
    /// most 255 * 255; the u64 accumulator cannot overflow at any realistic
    /// vocabulary size.
    pub fn dot(&self, other: &QuantizedLexiconVector) -> u64 {
        let (mut i, mut j) = (0, 0);
        let mut acc: u64 = 0;
        while i < self.terms.len() && j < other.terms.len() {
            let (ta, wa) = self.terms[i];
            let (tb, wb) = other.terms[j];
            match ta.cmp(&tb) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += wa as u64 * wb as u64;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Map a real-valued sparse representation to integer impact weights:
/// `weight = min(255, floor(100 * p))`, dropping entries that floor to zero.
///
/// The flooring adds a 1e-9 nudge so decimal rationals land on the
/// mathematically exact bucket (0.69 stored as the nearest binary double
/// floors to 68 without it).
pub fn quantize(id: impl Into<String>, vec: &SparseLexiconVector) -> Result<QuantizedLexiconVector> {
    if vec.vocab_size() > MAX_VOCAB {
        return Err(Error::UnsupportedVocab(vec.vocab_size()));
    }
    let mut terms = Vec::with_capacity(vec.nnz());
    for &(term, weight) in vec.entries() {
        let scaled = ((100.0 * weight) + 1e-9).floor();
        let q = if scaled >= 255.0 { 255 } else { scaled as u8 };
        if q >= 1 {
            terms.push((term as u16, q));
        }
    }
    QuantizedLexiconVector::new(id, terms)
}

/// Term-indexed postings over a corpus. Immutable once built; search is
/// read-only and safe to run from many threads concurrently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedIndex {
    vocab_size: usize,
    /// postings[term] = (doc ordinal, weight), ordinals ascending.
    postings: Vec<Vec<(u32, u8)>>,
    /// ordinal -> sample id.
    doc_ids: Vec<String>,
    total_postings: u64,
}

/// Storage accounting. Logical payload counts 3 bytes per posting: 2 for the
/// term id and 1 for its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexStats {
    pub doc_count: usize,
    pub total_postings: u64,
    pub payload_bytes: u64,
    pub avg_doc_bytes: f64,
    pub max_doc_bytes: u64,
}

pub const BYTES_PER_POSTING: u64 = 3;

/// Counters describing what one search touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub posting_lists_read: usize,
    pub postings_scanned: u64,
    pub docs_scored: usize,
}

/// Ranked retrieval output: `(sample id, integer score)` with scores
/// non-increasing and ties broken by ascending doc ordinal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalResult {
    pub hits: Vec<(String, u64)>,
}

impl InvertedIndex {
    /// Build from a corpus stream. Ordinals follow arrival order, so the
    /// same input order always produces the identical index. The vocabulary
    /// size is inferred as `max term id + 1`.
    pub fn build<I>(corpus: I) -> Result<InvertedIndex>
    where
        I: IntoIterator<Item = QuantizedLexiconVector>,
    {
        let mut doc_ids: Vec<String> = Vec::new();
        let mut seen: HashMap<String, ()> = HashMap::new();
        let mut postings: Vec<Vec<(u32, u8)>> = Vec::new();
        let mut total: u64 = 0;
        for doc in corpus {
            if doc.id.len() > u16::MAX as usize {
                return Err(Error::InvalidInput(format!(
                    "sample id of {} bytes exceeds the u16 length prefix of the index format",
                    doc.id.len()
                )));
            }
            if seen.insert(doc.id.clone(), ()).is_some() {
                return Err(Error::DuplicateId(doc.id));
            }
            let ordinal = doc_ids.len() as u32;
            for &(term, weight) in doc.terms() {
                let t = term as usize;
                if t >= postings.len() {
                    postings.resize_with(t + 1, Vec::new);
                }
                postings[t].push((ordinal, weight));
                total += 1;
            }
            doc_ids.push(doc.id);
        }
        Ok(InvertedIndex {
            vocab_size: postings.len(),
            postings,
            doc_ids,
            total_postings: total,
        })
    }

    pub(crate) fn from_parts(
        vocab_size: usize,
        postings: Vec<Vec<(u32, u8)>>,
        doc_ids: Vec<String>,
        total_postings: u64,
    ) -> Self {
        InvertedIndex {
            vocab_size,
            postings,
            doc_ids,
            total_postings,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    pub fn total_postings(&self) -> u64 {
        self.total_postings
    }

    pub(crate) fn postings(&self, term: usize) -> &[(u32, u8)] {
        &self.postings[term]
    }

    pub(crate) fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// Reassemble the quantized vectors the index was built from, in
    /// ordinal order.
    pub fn reconstruct_corpus(&self) -> Vec<QuantizedLexiconVector> {
        let mut terms_per_doc: Vec<Vec<(u16, u8)>> = vec![Vec::new(); self.doc_ids.len()];
        for (term, list) in self.postings.iter().enumerate() {
            for &(ordinal, weight) in list {
                terms_per_doc[ordinal as usize].push((term as u16, weight));
            }
        }
        self.doc_ids
            .iter()
            .zip(terms_per_doc)
            .map(|(id, terms)| QuantizedLexiconVector {
                id: id.clone(),
                terms,
            })
            .collect()
    }

    pub fn stats(&self) -> IndexStats {
        let mut per_doc_postings: Vec<u64> = vec![0; self.doc_ids.len()];
        for list in &self.postings {
            for &(ordinal, _) in list {
                per_doc_postings[ordinal as usize] += 1;
            }
        }
        let payload = BYTES_PER_POSTING * self.total_postings;
        let max_doc = per_doc_postings.iter().max().copied().unwrap_or(0) * BYTES_PER_POSTING;
        let avg = if self.doc_ids.is_empty() {
            0.0
        } else {
            payload as f64 / self.doc_ids.len() as f64
        };
        IndexStats {
            doc_count: self.doc_ids.len(),
            total_postings: self.total_postings,
            payload_bytes: payload,
            avg_doc_bytes: avg,
            max_doc_bytes: max_doc,
        }
    }

    /// Exact top-k by term-at-a-time accumulation over the query's posting
    /// lists only.
    pub fn search(&self, query: &QuantizedLexiconVector, k: usize) -> Result<RetrievalResult> {
        Ok(self.search_with_stats(query, k)?.0)
    }

    /// [`Self::search`] plus instrumentation counters; the counters are how
    /// tests assert that no posting list outside the query is ever read.
    pub fn search_with_stats(
        &self,
        query: &QuantizedLexiconVector,
        k: usize,
    ) -> Result<(RetrievalResult, SearchStats)> {
        if k == 0 {
            return Err(Error::InvalidArgument("search requires k >= 1".into()));
        }
        let mut stats = SearchStats::default();
        let mut accumulators: Vec<u64> = vec![0; self.doc_ids.len()];
        let mut touched: Vec<u32> = Vec::new();
        for &(term, query_weight) in query.terms() {
            let t = term as usize;
            if t >= self.postings.len() {
                continue;
            }
            stats.posting_lists_read += 1;
            for &(ordinal, doc_weight) in &self.postings[t] {
                stats.postings_scanned += 1;
                let acc = &mut accumulators[ordinal as usize];
                if *acc == 0 {
                    touched.push(ordinal);
                }
                *acc += query_weight as u64 * doc_weight as u64;
            }
        }
        stats.docs_scored = touched.len();
        let mut scored: Vec<(u32, u64)> = touched
            .into_iter()
            .map(|ordinal| (ordinal, accumulators[ordinal as usize]))
            .collect();
        scored.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        let hits = scored
            .into_iter()
            .map(|(ordinal, score)| (self.doc_ids[ordinal as usize].clone(), score))
            .collect();
        Ok((RetrievalResult { hits }, stats))
    }
}

/// Full-scan oracle: the same score and tie-break rule evaluated against
/// every corpus document.
pub fn brute_force_search(
    corpus: &[QuantizedLexiconVector],
    query: &QuantizedLexiconVector,
    k: usize,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("search requires k >= 1".into()));
    }
    let mut scored: Vec<(usize, u64)> = corpus
        .iter()
        .enumerate()
        .map(|(ordinal, doc)| (ordinal, query.dot(doc)))
        .filter(|&(_, score)| score > 0)
        .collect();
    scored.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(RetrievalResult {
        hits: scored
            .into_iter()
            .map(|(ordinal, score)| (corpus[ordinal].id.clone(), score))
            .collect(),
    })
}
