//! Sparse lexicon representations.
//!
//! The transforms here turn token/patch-level language-model logits into the
//! three vocabulary-space objects the rest of the stack consumes:
//!
//! * [`saturate_pool`]: ReLU, max-pool over the sequence axis, then
//!   `log(1 + .)` saturation, yielding a non-negative sparse weighting.
//! * [`lexicon_distribution`]: max-pool followed by a stable softmax,
//!   yielding a term-importance distribution (no ReLU, no saturation).
//! * [`cbow_bottleneck`]: the distribution times a token-embedding matrix,
//!   yielding a dense continuous bag-of-words vector. Gradients flow to the
//!   distribution only, never to the embedding matrix.
//!
//! All operations are pure functions on immutable inputs and safe to call
//! concurrently.

mod jsonl;
mod logit_file;

pub use jsonl::{read_sparse_jsonl, write_sparse_jsonl};
pub use logit_file::{
    read_logit_file, read_manifest, write_logit_file, write_manifest, ManifestEntry,
};

use crate::error::{Error, Result};
use crate::matrix::{softmax, Matrix};

/// Token/patch-level LM logits over the vocabulary, one row per sequence
/// position (including the prepended CLS slot). Construction rejects
/// non-finite values, so a held `LogitMatrix` is always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    values: Matrix,
}

impl LogitMatrix {
    pub fn new(rows: usize, vocab_size: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || vocab_size == 0 {
            return Err(Error::InvalidInput(format!(
                "logit matrix must be at least 1x1, got {rows}x{vocab_size}"
            )));
        }
        if values.len() != rows * vocab_size {
            return Err(Error::Shape(format!(
                "logit data length {} does not match {rows}x{vocab_size}",
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite logit {v} at row {}, column {}",
                    i / vocab_size,
                    i % vocab_size
                )));
            }
        }
        Ok(LogitMatrix {
            values: Matrix::from_vec(rows, vocab_size, values)?,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = Matrix::from_rows(rows)?;
        LogitMatrix::new(m.rows(), m.cols(), m.data().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }
}

/// Non-negative vocabulary-space representation stored sparsely.
/// Entries are `(term_id, weight)` with strictly increasing term ids and
/// strictly positive weights; zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLexiconVector {
    vocab_size: usize,
    entries: Vec<(u32, f64)>,
}

impl SparseLexiconVector {
    pub fn from_entries(vocab_size: usize, entries: Vec<(u32, f64)>) -> Result<Self> {
        let mut prev: Option<u32> = None;
        for &(term, weight) in &entries {
            if (term as usize) >= vocab_size {
                return Err(Error::InvalidInput(format!(
                    "term id {term} out of range for vocab size {vocab_size}"
                )));
            }
            if !weight.is_finite() || weight <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "weight {weight} for term {term} must be finite and > 0"
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
        Ok(SparseLexiconVector {
            vocab_size,
            entries,
        })
    }

    /// Build from a dense vector, keeping entries with weight strictly
    /// greater than `epsilon` (pass 0.0 to keep every positive weight).
    pub fn from_dense(values: &[f64], epsilon: f64) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > epsilon && w > 0.0)
            .map(|(i, &w)| (i as u32, w))
            .collect();
        SparseLexiconVector {
            vocab_size: values.len(),
            entries,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        for &(term, weight) in &self.entries {
            out[term as usize] = weight;
        }
        out
    }

    /// Sparse-sparse dot product by merge walk.
    pub fn dot(&self, other: &SparseLexiconVector) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < self.entries.len() && j < other.entries.len() {
            let (ta, wa) = self.entries[i];
            let (tb, wb) = other.entries[j];
            match ta.cmp(&tb) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += wa * wb;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Normalized term-importance distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconDistribution {
    probs: Vec<f64>,
}

impl LexiconDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities must lie in [0,1] and sum to 1 (sum = {sum})"
            )));
        }
        Ok(LexiconDistribution { probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Dense continuous bag-of-words bottleneck vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckVector {
    values: Vec<f64>,
}

impl BottleneckVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Max over the sequence axis, recording which row supplied each column's
/// maximum (first row wins ties). The argmax bookkeeping is what the trainer
/// needs to route gradients back through the pooling.
pub(crate) fn max_pool_with_argmax(values: &Matrix) -> (Vec<f64>, Vec<usize>) {
    let vocab = values.cols();
    let mut maxes = values.row(0).to_vec();
    let mut argmax = vec![0usize; vocab];
    for r in 1..values.rows() {
        let row = values.row(r);
        for c in 0..vocab {
            if row[c] > maxes[c] {
                maxes[c] = row[c];
                argmax[c] = r;
            }
        }
    }
    (maxes, argmax)
}

pub(crate) fn saturate(pooled: f64) -> f64 {
    // log(1 + max(0, x)); exact zero for non-positive inputs.
    pooled.max(0.0).ln_1p()
}

/// ReLU → sequence max-pool → `log(1+·)`, dropping exact zeros.
pub fn saturate_pool(logits: &LogitMatrix) -> SparseLexiconVector {
    saturate_pool_with_epsilon(logits, 0.0)
}

/// [`saturate_pool`] with an activation-pruning knob: entries with weight
/// `<= epsilon` are dropped. The default threshold of 0 keeps every
/// strictly positive weight.
pub fn saturate_pool_with_epsilon(logits: &LogitMatrix, epsilon: f64) -> SparseLexiconVector {
    let (maxes, _) = max_pool_with_argmax(logits.as_matrix());
    let dense: Vec<f64> = maxes.into_iter().map(saturate).collect();
    SparseLexiconVector::from_dense(&dense, epsilon)
}

/// Softmax over the max-pooled logits. Unlike [`saturate_pool`] there is no
/// ReLU and no log-saturation on this path.
pub fn lexicon_distribution(logits: &LogitMatrix) -> LexiconDistribution {
    let (maxes, _) = max_pool_with_argmax(logits.as_matrix());
    LexiconDistribution {
        probs: softmax(&maxes),
    }
}

/// `b = a · W`, a row vector times the token-embedding matrix.
///
/// Gradient contract: in training, gradients flow to the distribution but
/// never to the embedding matrix; see [`cbow_bottleneck_backward`].
pub fn cbow_bottleneck(
    dist: &LexiconDistribution,
    embeddings: &Matrix,
) -> Result<BottleneckVector> {
    if dist.vocab_size() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "distribution length {} does not match embedding rows {}",
            dist.vocab_size(),
            embeddings.rows()
        )));
    }
    Ok(BottleneckVector {
        values: embeddings.vec_mul(dist.probs())?,
    })
}

/// Backward pass of [`cbow_bottleneck`] for a given upstream gradient on the
/// bottleneck vector.
///
/// Returns the gradient w.r.t. the distribution. When `honor_stop_gradient`
/// is true (the production contract) the embedding-matrix gradient is `None`:
/// the bottleneck product contributes nothing to the embedding update. The
/// `false` path exists solely so tests and the self-check harness can inject
/// the violation and observe a nonzero embedding gradient.
pub fn cbow_bottleneck_backward(
    dist: &LexiconDistribution,
    embeddings: &Matrix,
    grad_bottleneck: &[f64],
    honor_stop_gradient: bool,
) -> Result<(Vec<f64>, Option<Matrix>)> {
    if dist.vocab_size() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "distribution length {} does not match embedding rows {}",
            dist.vocab_size(),
            embeddings.rows()
        )));
    }
    if grad_bottleneck.len() != embeddings.cols() {
        return Err(Error::Shape(format!(
            "bottleneck gradient length {} does not match embedding cols {}",
            grad_bottleneck.len(),
            embeddings.cols()
        )));
    }
    let grad_dist = embeddings.mat_vec(grad_bottleneck)?;
    let grad_embeddings = if honor_stop_gradient {
        None
    } else {
        let mut g = Matrix::zeros(embeddings.rows(), embeddings.cols());
        for (r, &a) in dist.probs().iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = g.row_mut(r);
            for (out, &gb) in row.iter_mut().zip(grad_bottleneck) {
                *out = a * gb;
            }
        }
        Some(g)
    };
    Ok((grad_dist, grad_embeddings))
}

/// Keep the `k` largest-weight entries, breaking weight ties in favour of
/// the smaller term id. The result preserves the ascending-term-id storage
/// order.
pub fn top_k_sparsify(vec: &SparseLexiconVector, k: usize) -> Result<SparseLexiconVector> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "top-k sparsification requires k >= 1".into(),
        ));
    }
    if vec.nnz() <= k {
        return Ok(vec.clone());
    }
    let mut ranked: Vec<(u32, f64)> = vec.entries.clone();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("weights are finite")
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    ranked.sort_by_key(|&(term, _)| term);
    Ok(SparseLexiconVector {
        vocab_size: vec.vocab_size,
        entries: ranked,
    })
}
