//! Training objectives: the masking procedure, MLM-style reconstruction
//! losses, the in-batch lexicon-contrastive loss with its activation
//! regularizer, and the momentum-contrastive loss. Every loss returns its
//! analytic gradients with respect to its representation inputs, which the
//! finite-difference harness in [`crate::gradcheck`] verifies.
//!
//! Each loss has a dense-batch variant operating on row matrices
//! (`*_dense`). The sparse-vector entry points densify and delegate; the
//! dense variants are what gradient checking perturbs, since sparse vectors
//! cannot represent the off-support coordinates a perturbation touches.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, log_sum_exp, softmax, Matrix};
use crate::sparse_repr::{LogitMatrix, SparseLexiconVector};

/// A token sequence after the masking procedure, together with everything
/// needed to score reconstructions against the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    tokens: Vec<u32>,
    original: Vec<u32>,
    masked_positions: Vec<usize>,
    mask_token_id: u32,
}

impl MaskedSequence {
    /// Post-masking tokens.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Pre-masking tokens.
    pub fn original(&self) -> &[u32] {
        &self.original
    }

    /// Sorted positions selected for masking, including those left
    /// unchanged by the keep branch of the 80/10/10 split.
    pub fn masked_positions(&self) -> &[usize] {
        &self.masked_positions
    }

    pub fn mask_token_id(&self) -> u32 {
        self.mask_token_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Scalar loss value plus per-input gradient matrices.
///
/// The order and shapes of `grads` are fixed per operation:
/// * [`mlm_loss`]: one matrix matching the logit matrix.
/// * [`baco_loss`] / [`baco_loss_dense`]: `[image batch NxV, text batch NxV]`.
/// * [`moco_loss`] / [`moco_loss_dense`]: one `1xV` matrix for the query.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

impl LossOutput {
    fn validate_finite(self) -> Result<Self> {
        if !self.value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "loss value {} is not finite",
                self.value
            )));
        }
        if self.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidInput("non-finite loss gradient".into()));
        }
        Ok(self)
    }
}

/// Select `round(rate * len)` positions uniformly without replacement under
/// a seeded generator, then apply the BERT-style 80/10/10
/// mask/random/keep split with a per-position draw. Rounding is half-up.
///
/// Draw order is fixed: first the position selection, then one split draw
/// per selected position in ascending position order, so a given
/// `(tokens, rate, seed)` always yields the same sequence.
pub fn mask_tokens(
    tokens: &[u32],
    rate: f64,
    mask_id: u32,
    vocab_size: usize,
    seed: u64,
) -> Result<MaskedSequence> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot mask an empty sequence".into()));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "masking rate must lie in (0, 1), got {rate}"
        )));
    }
    if (mask_id as usize) >= vocab_size {
        return Err(Error::InvalidArgument(format!(
            "mask token id {mask_id} out of range for vocab size {vocab_size}"
        )));
    }
    let len = tokens.len();
    let count = ((rate * len as f64).round() as usize).min(len);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first `count` slots end up holding a uniform
    // sample without replacement.
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.random_range(i..len);
        indices.swap(i, j);
    }
    let mut selected: Vec<usize> = indices[..count].to_vec();
    selected.sort_unstable();

    let mut masked = tokens.to_vec();
    for &pos in &selected {
        let u: f64 = rng.random();
        if u < 0.8 {
            masked[pos] = mask_id;
        } else if u < 0.9 {
            masked[pos] = rng.random_range(0..vocab_size as u32);
        }
        // else: kept unchanged, but still recorded as a masked position.
    }

    Ok(MaskedSequence {
        tokens: masked,
        original: tokens.to_vec(),
        masked_positions: selected,
        mask_token_id: mask_id,
    })
}

/// Cross-entropy reconstruction loss over the masked positions.
///
/// `logits` has one row per input slot including the prepended CLS (or
/// bottleneck) row, so token position `j` scores against row `j + 1`; the
/// prepended row is excluded from the loss. The value sums over masked
/// positions; the gradient is `softmax(row) - onehot(original)` at each
/// masked row and exactly zero everywhere else.
pub fn mlm_loss(logits: &LogitMatrix, masked: &MaskedSequence) -> Result<LossOutput> {
    let rows = logits.rows();
    let vocab = logits.vocab_size();
    let mut value = 0.0;
    let mut grads = Matrix::zeros(rows, vocab);
    for &pos in &masked.masked_positions {
        let row_idx = pos + 1;
        if row_idx >= rows {
            return Err(Error::Shape(format!(
                "masked position {pos} needs logit row {row_idx} but the matrix has {rows} rows"
            )));
        }
        let target = masked.original[pos] as usize;
        if target >= vocab {
            return Err(Error::Shape(format!(
                "target token {target} out of range for vocab size {vocab}"
            )));
        }
        let row = logits.row(row_idx);
        let lse = log_sum_exp(row);
        value += lse - row[target];
        let probs = softmax(row);
        let grad_row = grads.row_mut(row_idx);
        grad_row.copy_from_slice(&probs);
        grad_row[target] -= 1.0;
    }
    LossOutput {
        value,
        grads: vec![grads],
    }
    .validate_finite()
}

/// Squared mean activation per vocabulary dimension, summed over the
/// vocabulary: `F = sum_j (mean_i p_i[j])^2`.
pub fn flops_reg(batch: &[SparseLexiconVector]) -> Result<f64> {
    let dense = densify_batch(batch)?;
    Ok(flops_reg_dense(&dense))
}

pub fn flops_reg_dense(batch: &Matrix) -> f64 {
    flops_means(batch).iter().map(|m| m * m).sum()
}

pub(crate) fn flops_means(batch: &Matrix) -> Vec<f64> {
    let n = batch.rows() as f64;
    let mut means = vec![0.0; batch.cols()];
    for r in 0..batch.rows() {
        for (m, v) in means.iter_mut().zip(batch.row(r)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    means
}

/// `dF/dp_i[j] = 2 * mean[j] / N`, identical across rows.
pub(crate) fn flops_grad_row(batch: &Matrix) -> Vec<f64> {
    let n = batch.rows() as f64;
    flops_means(batch)
        .into_iter()
        .map(|m| 2.0 * m / n)
        .collect()
}

fn densify_batch(batch: &[SparseLexiconVector]) -> Result<Matrix> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("batch must be non-empty".into()))?;
    let vocab = first.vocab_size();
    let mut m = Matrix::zeros(batch.len(), vocab);
    for (r, vec) in batch.iter().enumerate() {
        if vec.vocab_size() != vocab {
            return Err(Error::Shape(format!(
                "batch vector {r} has vocab size {} (expected {vocab})",
                vec.vocab_size()
            )));
        }
        for &(term, weight) in vec.entries() {
            m.set(r, term as usize, weight);
        }
    }
    Ok(m)
}

/// In-batch lexicon-contrastive loss over aligned image/text batches, with
/// the activation regularizer applied to each modality's batch on its own
/// direction. Similarity is the raw dot product; each directional term is a
/// batch mean; the two directions are averaged.
pub fn baco_loss(
    img_reps: &[SparseLexiconVector],
    txt_reps: &[SparseLexiconVector],
    tau: f64,
    lambda: f64,
) -> Result<LossOutput> {
    if img_reps.len() != txt_reps.len() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} images vs {} texts",
            img_reps.len(),
            txt_reps.len()
        )));
    }
    let img = densify_batch(img_reps)?;
    let txt = densify_batch(txt_reps)?;
    baco_loss_dense(&img, &txt, tau, lambda)
}

/// Dense-batch form of [`baco_loss`]: rows are vocabulary-space vectors.
pub fn baco_loss_dense(img: &Matrix, txt: &Matrix, tau: f64, lambda: f64) -> Result<LossOutput> {
    if img.rows() != txt.rows() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} images vs {} texts",
            img.rows(),
            txt.rows()
        )));
    }
    if img.cols() != txt.cols() {
        return Err(Error::Shape(format!(
            "vocab sizes differ: {} vs {}",
            img.cols(),
            txt.cols()
        )));
    }
    if img.rows() == 0 {
        return Err(Error::InvalidArgument("batch must be non-empty".into()));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let n = img.rows();
    let nf = n as f64;

    // Scaled similarity matrix s[i][j] = (v_i . t_j) / tau.
    let mut sims = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sims.set(i, j, dot(img.row(i), txt.row(j)) / tau);
        }
    }

    let mut value = 0.0;
    // d(value)/d(sims[i][j]), accumulated over both directions.
    let mut dsims = Matrix::zeros(n, n);

    // Image-to-text: softmax across each row.
    for i in 0..n {
        let row = sims.row(i).to_vec();
        value += (log_sum_exp(&row) - row[i]) / (2.0 * nf);
        for (j, p) in softmax(&row).into_iter().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            let cell = &mut dsims.row_mut(i)[j];
            *cell += (p - delta) / (2.0 * nf);
        }
    }
    // Text-to-image: softmax down each column.
    for i in 0..n {
        let col: Vec<f64> = (0..n).map(|j| sims.get(j, i)).collect();
        value += (log_sum_exp(&col) - col[i]) / (2.0 * nf);
        for (j, p) in softmax(&col).into_iter().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            let cell = &mut dsims.row_mut(j)[i];
            *cell += (p - delta) / (2.0 * nf);
        }
    }

    // Regularizer: lambda * F per direction, so lambda/2 per modality in the
    // averaged total.
    value += lambda / 2.0 * (flops_reg_dense(img) + flops_reg_dense(txt));

    let mut grad_img = Matrix::zeros(n, img.cols());
    let mut grad_txt = Matrix::zeros(n, txt.cols());
    for i in 0..n {
        for j in 0..n {
            let d = dsims.get(i, j) / tau;
            if d == 0.0 {
                continue;
            }
            let txt_row = txt.row(j);
            for (g, t) in grad_img.row_mut(i).iter_mut().zip(txt_row) {
                *g += d * t;
            }
            let img_row = img.row(i);
            for (g, v) in grad_txt.row_mut(j).iter_mut().zip(img_row) {
                *g += d * v;
            }
        }
    }
    let fg_img = flops_grad_row(img);
    let fg_txt = flops_grad_row(txt);
    for i in 0..n {
        for (g, f) in grad_img.row_mut(i).iter_mut().zip(&fg_img) {
            *g += lambda / 2.0 * f;
        }
        for (g, f) in grad_txt.row_mut(i).iter_mut().zip(&fg_txt) {
            *g += lambda / 2.0 * f;
        }
    }

    LossOutput {
        value,
        grads: vec![grad_img, grad_txt],
    }
    .validate_finite()
}

/// Momentum-contrastive loss for one query against a momentum positive and
/// a queue of momentum negatives. The denominator enumerates the queue plus
/// the positive; the regularizer applies to the query; gradients flow only
/// to the query (momentum targets come from gradient-truncated encoders).
pub fn moco_loss(
    query: &SparseLexiconVector,
    momentum_positive: &SparseLexiconVector,
    queue: &[SparseLexiconVector],
    tau: f64,
    lambda: f64,
) -> Result<LossOutput> {
    let vocab = query.vocab_size();
    if momentum_positive.vocab_size() != vocab
        || queue.iter().any(|q| q.vocab_size() != vocab)
    {
        return Err(Error::Shape(
            "query, positive and queue entries must share a vocab size".into(),
        ));
    }
    let queue_dense: Vec<Vec<f64>> = queue.iter().map(SparseLexiconVector::to_dense).collect();
    let queue_refs: Vec<&[f64]> = queue_dense.iter().map(Vec::as_slice).collect();
    moco_loss_dense(
        &query.to_dense(),
        &momentum_positive.to_dense(),
        &queue_refs,
        tau,
        lambda,
    )
}

/// Dense form of [`moco_loss`].
pub fn moco_loss_dense(
    query: &[f64],
    positive: &[f64],
    queue: &[&[f64]],
    tau: f64,
    lambda: f64,
) -> Result<LossOutput> {
    let vocab = query.len();
    if vocab == 0 {
        return Err(Error::InvalidArgument("empty vocabulary".into()));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    if positive.len() != vocab || queue.iter().any(|q| q.len() != vocab) {
        return Err(Error::Shape(
            "query, positive and queue entries must share a vocab size".into(),
        ));
    }

    // Candidate scores: the positive first, then the queue in order.
    let mut scores = Vec::with_capacity(queue.len() + 1);
    scores.push(dot(query, positive) / tau);
    for neg in queue {
        scores.push(dot(query, neg) / tau);
    }
    let lse = log_sum_exp(&scores);
    let reg: f64 = query.iter().map(|q| q * q).sum();
    let value = lse - scores[0] + lambda * reg;

    let probs = softmax(&scores);
    let mut grad = vec![0.0; vocab];
    for (g, (&p, &q)) in grad.iter_mut().zip(positive.iter().zip(query)) {
        *g = (probs[0] - 1.0) * p / tau + 2.0 * lambda * q;
    }
    for (sigma, neg) in probs[1..].iter().zip(queue) {
        for (g, &nv) in grad.iter_mut().zip(neg.iter()) {
            *g += sigma * nv / tau;
        }
    }

    LossOutput {
        value,
        grads: vec![Matrix::from_vec(1, vocab, grad)?],
    }
    .validate_finite()
}

/// Unweighted sum of the four phase-1 loss terms.
pub fn phase1_total(self_mlm: f64, i2t_mlm: f64, t2i_mlm: f64, baco: f64) -> Result<f64> {
    for (name, v) in [
        ("self_mlm", self_mlm),
        ("i2t_mlm", i2t_mlm),
        ("t2i_mlm", t2i_mlm),
        ("baco", baco),
    ] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} loss {v} is not finite")));
        }
    }
    Ok(self_mlm + i2t_mlm + t2i_mlm + baco)
}
