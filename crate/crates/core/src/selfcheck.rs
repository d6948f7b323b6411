//! The runtime self-check battery behind the CLI's `selfcheck` subcommand:
//! finite-difference gradient verification plus a sweep of structural
//! invariants, each reported as a named pass/fail line.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{
    check_baco_gradient, check_mlm_gradient, check_moco_gradient, DEFAULT_STEP,
};
use crate::lexindex::{brute_force_search, quantize, InvertedIndex, QuantizedLexiconVector};
use crate::matrix::Matrix;
use crate::momentum::NegativeQueue;
use crate::sparse_repr::{
    cbow_bottleneck_backward, lexicon_distribution, saturate_pool, top_k_sparsify,
    LexiconDistribution, LogitMatrix, SparseLexiconVector,
};
use crate::trainer::{synth_pairs, wte_gradient_probe, TrainConfig};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name,
        passed,
        detail: detail.into(),
    }
}

/// Run the full battery. `seed` drives every randomized instance;
/// `gradient_instances` controls how many cases each finite-difference
/// check draws.
pub fn run_selfcheck(seed: u64, gradient_instances: usize) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let tol = 1e-4;

    match check_mlm_gradient(seed, gradient_instances, DEFAULT_STEP) {
        Ok(r) => results.push(check(
            "gradients: masked reconstruction loss vs central differences",
            r.max_rel_err < tol,
            format!("max rel err {:.3e} over {} instances", r.max_rel_err, r.instances),
        )),
        Err(e) => results.push(check("gradients: masked reconstruction loss vs central differences", false, e.to_string())),
    }
    match check_baco_gradient(seed + 1, gradient_instances, DEFAULT_STEP) {
        Ok(r) => results.push(check(
            "gradients: in-batch contrastive loss vs central differences",
            r.max_rel_err < tol,
            format!("max rel err {:.3e} over {} instances", r.max_rel_err, r.instances),
        )),
        Err(e) => results.push(check("gradients: in-batch contrastive loss vs central differences", false, e.to_string())),
    }
    match check_moco_gradient(seed + 2, gradient_instances, DEFAULT_STEP) {
        Ok(r) => results.push(check(
            "gradients: momentum contrastive loss vs central differences",
            r.max_rel_err < tol,
            format!("max rel err {:.3e} over {} instances", r.max_rel_err, r.instances),
        )),
        Err(e) => results.push(check("gradients: momentum contrastive loss vs central differences", false, e.to_string())),
    }

    results.push(stop_gradient_check(seed));
    results.push(pooling_permutation_check(seed));
    results.push(distribution_shift_check(seed));
    results.push(top_k_idempotence_check(seed));
    results.push(queue_replay_check(seed));
    results.push(oracle_equivalence_check(seed));
    results
}

/// The stop-gradient contract, probed two ways: directly on the bottleneck
/// backward, and end to end through a training step where the image
/// reconstruction loss is the only objective. The deliberate violation must
/// produce a nonzero embedding gradient, which proves the honored
/// path is not vacuously zero.
fn stop_gradient_check(seed: u64) -> CheckResult {
    let dist = match LexiconDistribution::new(vec![0.25, 0.5, 0.25]) {
        Ok(d) => d,
        Err(e) => return check("stop-gradient on the token-embedding matrix", false, e.to_string()),
    };
    let w = Matrix::from_vec(3, 2, vec![1.0, -1.0, 0.5, 2.0, 0.0, 1.0]).unwrap();
    let grad_b = vec![0.3, -0.7];
    let honored = cbow_bottleneck_backward(&dist, &w, &grad_b, true);
    let violated = cbow_bottleneck_backward(&dist, &w, &grad_b, false);
    let unit_ok = match (honored, violated) {
        (Ok((_, None)), Ok((_, Some(g)))) => g.frobenius_norm() > 0.0,
        _ => false,
    };

    let data = match synth_pairs(4, 8, 6, 64, seed) {
        Ok(d) => d,
        Err(e) => return check("stop-gradient on the token-embedding matrix", false, e.to_string()),
    };
    let mut cfg = TrainConfig::toy_defaults(64);
    cfg.dim = 8;
    cfg.batch_size = 4;
    cfg.seed = seed;
    let honored_norm = wte_gradient_probe(&cfg, &data, true);
    let violated_norm = wte_gradient_probe(&cfg, &data, false);
    let e2e_ok = matches!((honored_norm, violated_norm), (Ok(h), Ok(v)) if h == 0.0 && v > 0.0);

    check(
        "stop-gradient on the token-embedding matrix",
        unit_ok && e2e_ok,
        format!("unit probe ok: {unit_ok}; end-to-end probe ok: {e2e_ok}"),
    )
}

fn pooling_permutation_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..20 {
        let rows = rng.random_range(1..6usize);
        let vocab = rng.random_range(1..10usize);
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut shuffled = data.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = saturate_pool(&LogitMatrix::from_rows(&data).unwrap());
        let b = saturate_pool(&LogitMatrix::from_rows(&shuffled).unwrap());
        ok &= a == b;
    }
    check(
        "row-permutation invariance of the saturated pooling",
        ok,
        "20 randomized matrices",
    )
}

fn distribution_shift_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..20 {
        let vocab = rng.random_range(1..10usize);
        let row: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let a = lexicon_distribution(&LogitMatrix::from_rows(&[row]).unwrap());
        let b = lexicon_distribution(&LogitMatrix::from_rows(&[shifted]).unwrap());
        ok &= a
            .probs()
            .iter()
            .zip(b.probs())
            .all(|(x, y)| (x - y).abs() < 1e-9);
    }
    check(
        "shift invariance of the importance distribution",
        ok,
        "20 randomized rows",
    )
}

fn top_k_idempotence_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..20 {
        let vocab = rng.random_range(4..32usize);
        let dense: Vec<f64> = (0..vocab)
            .map(|_| {
                if rng.random::<f64>() < 0.4 {
                    0.0
                } else {
                    rng.random_range(0.01..4.0)
                }
            })
            .collect();
        let v = SparseLexiconVector::from_dense(&dense, 0.0);
        let k = rng.random_range(1..8usize);
        let once = top_k_sparsify(&v, k).unwrap();
        let twice = top_k_sparsify(&once, k).unwrap();
        ok &= once == twice && once.nnz() <= k.min(v.nnz());
    }
    check(
        "top-k sparsification is idempotent and bounded",
        ok,
        "20 randomized vectors",
    )
}

fn queue_replay_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..20 {
        let capacity = rng.random_range(1..12usize);
        let mut queue = NegativeQueue::new(capacity).unwrap();
        let mut replay: Vec<u32> = Vec::new();
        for _ in 0..rng.random_range(0..10usize) {
            let batch: Vec<u32> = (0..rng.random_range(0..8usize))
                .map(|_| rng.random())
                .collect();
            replay.extend_from_slice(&batch);
            queue.push_batch(batch);
            let tail = replay.len().saturating_sub(capacity);
            ok &= queue.len() <= capacity;
            ok &= queue.iter().copied().collect::<Vec<u32>>() == replay[tail..];
        }
    }
    check(
        "negative queue matches the unbounded-replay oracle",
        ok,
        "20 randomized push sequences",
    )
}

fn oracle_equivalence_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..50 {
        let vocab = 64usize;
        let docs: Vec<QuantizedLexiconVector> = (0..rng.random_range(0..100usize))
            .enumerate()
            .map(|(i, _)| {
                let dense: Vec<f64> = (0..vocab)
                    .map(|_| {
                        if rng.random::<f64>() < 0.9 {
                            0.0
                        } else {
                            rng.random_range(0.02..3.0)
                        }
                    })
                    .collect();
                quantize(format!("d{i}"), &SparseLexiconVector::from_dense(&dense, 0.0)).unwrap()
            })
            .collect();
        let dense: Vec<f64> = (0..vocab)
            .map(|_| {
                if rng.random::<f64>() < 0.8 {
                    0.0
                } else {
                    rng.random_range(0.02..3.0)
                }
            })
            .collect();
        let query = quantize("q", &SparseLexiconVector::from_dense(&dense, 0.0)).unwrap();
        let k = rng.random_range(1..12usize);
        let index = InvertedIndex::build(docs.clone()).unwrap();
        ok &= index.search(&query, k).unwrap() == brute_force_search(&docs, &query, k).unwrap();
    }
    check(
        "index search equals the full-scan oracle",
        ok,
        "50 randomized corpora",
    )
}
