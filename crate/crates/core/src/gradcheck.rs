//! Central finite-difference verification of the analytic loss gradients.
//!
//! The checker perturbs one coordinate at a time and evaluates only the
//! loss *value* at the shifted points, so it exercises none of the code
//! that produces analytic gradients. Harnesses for each loss generate
//! randomized small instances and report the worst relative error seen.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::objectives::{baco_loss_dense, mask_tokens, mlm_loss, moco_loss_dense};
use crate::sparse_repr::LogitMatrix;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst-case relative error across every checked coordinate, plus how many
/// coordinates were compared.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub instances: usize,
}

impl GradCheckReport {
    fn absorb(&mut self, rel: f64) {
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
        }
        self.coords_checked += 1;
    }
}

/// Central difference (f(x+h) - f(x-h)) / 2h for every coordinate of `x`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor: differences below `1e-8` count as
/// exact so that coordinates whose true gradient is zero do not divide by
/// noise.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-8 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

fn compare(report: &mut GradCheckReport, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (&a, &n) in analytic.iter().zip(numeric) {
        report.absorb(relative_error(a, n));
    }
}

/// Random non-negative vocabulary-space row with roughly half its entries
/// zero, the shape saturate-pooled representations take.
fn random_rep(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<f64> {
    (0..vocab)
        .map(|_| {
            if rng.random::<f64>() < 0.5 {
                0.0
            } else {
                rng.random_range(0.05..2.0)
            }
        })
        .collect()
}

/// Finite-difference check of [`mlm_loss`] gradients over randomized
/// instances with small vocabularies and short sequences.
pub fn check_mlm_gradient(seed: u64, instances: usize, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let vocab = rng.random_range(2..=16usize);
        let len = rng.random_range(1..=6usize);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
        let rate = rng.random_range(0.2..0.8);
        let masked = mask_tokens(&tokens, rate, (vocab - 1) as u32, vocab, rng.random())?;
        let flat: Vec<f64> = (0..(len + 1) * vocab)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();

        let logits = LogitMatrix::new(len + 1, vocab, flat.clone())?;
        let analytic = mlm_loss(&logits, &masked)?;
        let numeric = central_difference(
            |x| {
                let lm = LogitMatrix::new(len + 1, vocab, x.to_vec()).unwrap();
                mlm_loss(&lm, &masked).unwrap().value
            },
            &flat,
            h,
        );
        compare(&mut report, analytic.grads[0].data(), &numeric);
    }
    Ok(report)
}

/// Finite-difference check of [`baco_loss_dense`] gradients, both batches,
/// with a strictly positive regularizer weight.
pub fn check_baco_gradient(seed: u64, instances: usize, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let vocab = rng.random_range(2..=16usize);
        let n = rng.random_range(1..=4usize);
        let tau = rng.random_range(0.05..1.0);
        let lambda = rng.random_range(0.001..0.1);
        let img: Vec<f64> = (0..n)
            .flat_map(|_| random_rep(&mut rng, vocab))
            .collect();
        let txt: Vec<f64> = (0..n)
            .flat_map(|_| random_rep(&mut rng, vocab))
            .collect();

        let img_m = Matrix::from_vec(n, vocab, img.clone())?;
        let txt_m = Matrix::from_vec(n, vocab, txt.clone())?;
        let analytic = baco_loss_dense(&img_m, &txt_m, tau, lambda)?;

        // One flat parameter vector: image batch then text batch.
        let mut flat = img.clone();
        flat.extend_from_slice(&txt);
        let numeric = central_difference(
            |x| {
                let im = Matrix::from_vec(n, vocab, x[..n * vocab].to_vec()).unwrap();
                let tm = Matrix::from_vec(n, vocab, x[n * vocab..].to_vec()).unwrap();
                baco_loss_dense(&im, &tm, tau, lambda).unwrap().value
            },
            &flat,
            h,
        );
        let mut analytic_flat = analytic.grads[0].data().to_vec();
        analytic_flat.extend_from_slice(analytic.grads[1].data());
        compare(&mut report, &analytic_flat, &numeric);
    }
    Ok(report)
}

/// Finite-difference check of [`moco_loss_dense`] gradients w.r.t. the query.
pub fn check_moco_gradient(seed: u64, instances: usize, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let vocab = rng.random_range(2..=16usize);
        let queue_len = rng.random_range(0..=8usize);
        let tau = rng.random_range(0.05..1.0);
        let lambda = rng.random_range(0.0..0.1);
        let query = random_rep(&mut rng, vocab);
        let positive = random_rep(&mut rng, vocab);
        let queue: Vec<Vec<f64>> = (0..queue_len).map(|_| random_rep(&mut rng, vocab)).collect();
        let queue_refs: Vec<&[f64]> = queue.iter().map(Vec::as_slice).collect();

        let analytic = moco_loss_dense(&query, &positive, &queue_refs, tau, lambda)?;
        let numeric = central_difference(
            |x| {
                moco_loss_dense(x, &positive, &queue_refs, tau, lambda)
                    .unwrap()
                    .value
            },
            &query,
            h,
        );
        compare(&mut report, analytic.grads[0].data(), &numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_matches_polynomial_derivative() {
        // f(x, y) = x^2 + 3xy, grad = (2x + 3y, 3x).
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let x = [1.5, -0.5];
        let g = central_difference(f, &x, 1e-6);
        assert!((g[0] - (2.0 * 1.5 + 3.0 * -0.5)).abs() < 1e-6);
        assert!((g[1] - 3.0 * 1.5).abs() < 1e-6);
    }

    #[test]
    fn loss_gradients_survive_a_quick_fd_pass() {
        let mlm = check_mlm_gradient(7, 10, DEFAULT_STEP).unwrap();
        assert!(mlm.max_rel_err < 1e-4, "mlm: {}", mlm.max_rel_err);
        let baco = check_baco_gradient(7, 10, DEFAULT_STEP).unwrap();
        assert!(baco.max_rel_err < 1e-4, "baco: {}", baco.max_rel_err);
        let moco = check_moco_gradient(7, 10, DEFAULT_STEP).unwrap();
        assert!(moco.max_rel_err < 1e-4, "moco: {}", moco.max_rel_err);
    }
}
