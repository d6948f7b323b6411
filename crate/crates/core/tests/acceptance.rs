//! Acceptance suite: one test per criterion, each printing a pass line with
//! its measured numbers (run with `--nocapture` to see them). Criterion 8
//! is machine-dependent throughput and therefore `#[ignore]`d by default;
//! run it explicitly with `cargo test --test acceptance -- --ignored`.

use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lexipse_core::evalbench::{qps_bench, BenchConfig, FullScanBaseline};
use lexipse_core::gradcheck::{
    check_baco_gradient, check_mlm_gradient, check_moco_gradient, DEFAULT_STEP,
};
use lexipse_core::lexindex::{
    brute_force_search, deserialize, quantize, serialize, InvertedIndex, QuantizedLexiconVector,
};
use lexipse_core::matrix::Matrix;
use lexipse_core::sparse_repr::{
    cbow_bottleneck_backward, top_k_sparsify, LexiconDistribution, SparseLexiconVector,
};
use lexipse_core::trainer::{
    read_checkpoint, synth_pairs, train_phase1, train_phase2, write_checkpoint, ModelParams,
    ObjectiveToggles, TrainConfig,
};
use lexipse_core::Error;

/// Random quantized vector with the given density over `vocab` dimensions.
fn random_quantized(rng: &mut ChaCha8Rng, id: String, vocab: usize, density: f64) -> QuantizedLexiconVector {
    let nnz = ((vocab as f64 * density) as usize).min(vocab);
    let mut terms: Vec<u16> = (0..nnz).map(|_| rng.random_range(0..vocab as u16)).collect();
    terms.sort_unstable();
    terms.dedup();
    let terms: Vec<(u16, u8)> = terms
        .into_iter()
        .map(|t| (t, rng.random_range(1..=255u8)))
        .collect();
    QuantizedLexiconVector::new(id, terms).unwrap()
}

#[test]
fn criterion_1_index_search_equals_brute_force_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut instances = 0usize;
    let mut searches = 0usize;
    while instances < 1000 {
        let vocab = rng.random_range(8..=2048usize);
        let doc_count = rng.random_range(0..=1000usize);
        let density = rng.random_range(0.0..=0.10);
        let corpus: Vec<QuantizedLexiconVector> = (0..doc_count)
            .map(|i| random_quantized(&mut rng, format!("d{i}"), vocab, density))
            .collect();
        let index = InvertedIndex::build(corpus.clone()).unwrap();
        let query_density = rng.random_range(0.0..=0.10f64).max(1.0 / vocab as f64);
        let query = random_quantized(&mut rng, "q".into(), vocab, query_density);
        for k in [1usize, 5, 10, 50] {
            let fast = index.search(&query, k).unwrap();
            let slow = brute_force_search(&corpus, &query, k).unwrap();
            assert_eq!(
                fast, slow,
                "instance {instances}: k={k}, vocab={vocab}, docs={doc_count}"
            );
            searches += 1;
        }
        instances += 1;
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "oracle equivalence took {elapsed:?}, budget is 60s"
    );
    println!(
        "[PASS] criterion 1: {instances} randomized instances ({searches} searches) matched the \
         brute-force oracle exactly in {elapsed:.2?}"
    );
}

#[test]
fn criterion_2_analytic_gradients_match_finite_differences() {
    let started = Instant::now();
    let tol = 1e-4;
    let mlm = check_mlm_gradient(0xA1, 100, DEFAULT_STEP).unwrap();
    let baco = check_baco_gradient(0xA2, 100, DEFAULT_STEP).unwrap();
    let moco = check_moco_gradient(0xA3, 100, DEFAULT_STEP).unwrap();
    for (name, report) in [("mlm", &mlm), ("baco", &baco), ("moco", &moco)] {
        assert!(report.instances >= 100, "{name}: {} instances", report.instances);
        assert!(
            report.max_rel_err < tol,
            "{name}: max relative error {} exceeds {tol}",
            report.max_rel_err
        );
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(30),
        "gradient verification took {elapsed:?}, budget is 30s"
    );
    println!(
        "[PASS] criterion 2: finite differences agree (max rel err mlm {:.2e}, baco {:.2e}, \
         moco {:.2e}; {} coords) in {elapsed:.2?}",
        mlm.max_rel_err,
        baco.max_rel_err,
        moco.max_rel_err,
        mlm.coords_checked + baco.coords_checked + moco.coords_checked
    );
}

#[test]
#[allow(clippy::approx_constant)] // 0.6931 is a fixed decimal input, not ln 2
fn criterion_3_quantization_and_byte_accounting_match_closed_forms() {
    // Quantization floor(100 * p) on decimal rationals, including values
    // whose nearest binary double sits just below the true product.
    let vec = SparseLexiconVector::from_entries(
        16,
        vec![
            (0, 0.6931),
            (1, 0.69),
            (2, 0.009),
            (3, 0.01),
            (4, 1.0),
            (5, 2.55),
            (6, 3.0),
            (7, 0.999),
        ],
    )
    .unwrap();
    let q = quantize("sample", &vec).unwrap();
    assert_eq!(
        q.terms(),
        &[
            (0u16, 69u8),
            (1, 69),
            (3, 1),
            (4, 100),
            (5, 255),
            (6, 255),
            (7, 99),
        ],
        "0.009 floors to zero and is dropped; 3.0 clamps to the byte maximum"
    );

    // Per-doc byte accounting: 3 bytes per posting, so top-K sparsification
    // caps a document at exactly 3K bytes when K terms survive.
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
    let vocab = 512usize;
    for (k, expect_bytes) in [(64usize, 192u64), (32, 96), (16, 48), (12, 36), (8, 24)] {
        let corpus: Vec<QuantizedLexiconVector> = (0..50)
            .map(|i| {
                // At least 80 quantizable terms per doc so top-K always
                // keeps exactly K.
                let mut terms: Vec<u16> = Vec::new();
                while terms.len() < 80 {
                    terms.push(rng.random_range(0..vocab as u16));
                    terms.sort_unstable();
                    terms.dedup();
                }
                let entries: Vec<(u32, f64)> = terms
                    .iter()
                    .map(|&t| (t as u32, rng.random_range(0.02..2.0)))
                    .collect();
                let sparse = SparseLexiconVector::from_entries(vocab, entries).unwrap();
                let kept = top_k_sparsify(&sparse, k).unwrap();
                quantize(format!("d{i}"), &kept).unwrap()
            })
            .collect();
        assert!(corpus.iter().all(|d| d.nnz() == k));
        let index = InvertedIndex::build(corpus).unwrap();
        let stats = index.stats();
        assert_eq!(stats.max_doc_bytes, expect_bytes, "top-{k}");
        assert_eq!(stats.payload_bytes, 50 * expect_bytes, "top-{k}");
        assert_eq!(stats.avg_doc_bytes, expect_bytes as f64, "top-{k}");
    }

    // A ten-term document occupies 30 logical bytes.
    let ten = InvertedIndex::build(vec![QuantizedLexiconVector::new(
        "ten",
        (0..10u16).map(|t| (t, 1)).collect(),
    )
    .unwrap()])
    .unwrap();
    assert_eq!(ten.stats().payload_bytes, 30);

    println!(
        "[PASS] criterion 3: quantization matches floor(100p) on rationals; per-doc bytes are \
         exactly 3K for top-K in {{64, 32, 16, 12, 8}} -> {{192, 96, 48, 36, 24}}"
    );
}

#[test]
fn criterion_4_phase1_recall_beats_ten_times_random() {
    let started = Instant::now();
    let mut sum_r1 = 0.0;
    let mut candidates = 0usize;
    for seed in [1u64, 2, 3] {
        let data = synth_pairs(10, 20, 12, 500, seed).unwrap();
        candidates = data.heldout_pairs().len();
        let mut cfg = TrainConfig::toy_defaults(500);
        cfg.seed = seed;
        // The pinned hyperparameter defaults.
        assert_eq!(cfg.tau, 0.05);
        assert_eq!(cfg.lambda, 0.002);
        assert_eq!(cfg.enc_mask_rate, 0.3);
        assert_eq!(cfg.dec_mask_rate, 0.5);
        assert_eq!(cfg.ema_decay, 0.99);
        assert!(cfg.steps <= 2000);
        let out = train_phase1(&cfg, &data).unwrap();
        sum_r1 += out.final_r1.unwrap();
    }
    let mean_r1 = sum_r1 / 3.0;
    let random_baseline = 1.0 / candidates as f64;
    let elapsed = started.elapsed();
    assert!(
        mean_r1 >= 10.0 * random_baseline,
        "seed-averaged R@1 {mean_r1:.4} below 10x random baseline {:.4}",
        10.0 * random_baseline
    );
    assert!(
        elapsed < Duration::from_secs(300),
        "phase-1 training took {elapsed:?}, budget is 5 minutes"
    );
    println!(
        "[PASS] criterion 4: seed-averaged held-out R@1 {mean_r1:.3} >= {:.3} (10x random over \
         {candidates} candidates) in {elapsed:.2?}",
        10.0 * random_baseline
    );
}

#[test]
fn criterion_5_flops_regularizer_strictly_reduces_nnz() {
    // Small corpus, long horizon: the regularizer's pressure accumulates
    // over steps while everything else is seed-identical between the arms.
    let mut margins = Vec::new();
    for seed in [1u64, 2, 3] {
        let data = synth_pairs(6, 12, 10, 200, seed).unwrap();
        let mut nnz = Vec::new();
        for lambda in [0.0, 0.002] {
            let mut cfg = TrainConfig::toy_defaults(200);
            cfg.steps = 2000;
            cfg.seed = seed;
            cfg.lambda = lambda;
            let out = train_phase1(&cfg, &data).unwrap();
            nnz.push((out.final_mean_nnz_img + out.final_mean_nnz_txt) / 2.0);
        }
        assert!(
            nnz[1] < nnz[0],
            "seed {seed}: mean nnz with regularizer ({:.2}) not strictly below without ({:.2})",
            nnz[1],
            nnz[0]
        );
        margins.push(nnz[0] - nnz[1]);
    }
    println!(
        "[PASS] criterion 5: regularized runs are strictly sparser on 3/3 seeds \
         (nnz margins {:.2}, {:.2}, {:.2})",
        margins[0], margins[1], margins[2]
    );
}

#[test]
fn criterion_6_phase2_helps_and_ablations_do_not() {
    // Full pipeline vs phase 1 alone vs a pipeline whose phase 1 drops the
    // in-batch contrastive loss. Removing the momentum loss IS the
    // phase-1-alone arm, so the first comparison covers both ablations.
    let (mut m_p1, mut m_full, mut m_nobaco) = (0.0, 0.0, 0.0);
    for seed in [1u64, 2, 3] {
        let data = synth_pairs(10, 20, 12, 500, seed).unwrap();
        let mut cfg = TrainConfig::toy_defaults(500);
        cfg.steps = 300;
        cfg.seed = seed;
        let mut cfg2 = cfg.clone();
        cfg2.steps = 200;
        cfg2.learning_rate = cfg.learning_rate / 10.0;

        let p1 = train_phase1(&cfg, &data).unwrap();
        m_p1 += p1.final_r1.unwrap() / 3.0;
        let full = train_phase2(&cfg2, &data, p1.params).unwrap();
        m_full += full.final_r1.unwrap() / 3.0;

        let mut cfg_nobaco = cfg.clone();
        cfg_nobaco.toggles = ObjectiveToggles {
            baco: false,
            ..Default::default()
        };
        let p1_nb = train_phase1(&cfg_nobaco, &data).unwrap();
        let full_nb = train_phase2(&cfg2, &data, p1_nb.params).unwrap();
        m_nobaco += full_nb.final_r1.unwrap() / 3.0;
    }
    assert!(
        m_full >= m_p1,
        "phase 2 did not help: full {m_full:.4} vs phase-1-only {m_p1:.4}"
    );
    assert!(
        m_full >= m_nobaco,
        "dropping the in-batch loss improved R@1: {m_nobaco:.4} vs {m_full:.4}"
    );
    println!(
        "[PASS] criterion 6: seed-averaged R@1 full {m_full:.3} >= phase-1-only {m_p1:.3} and \
         >= no-in-batch-loss pipeline {m_nobaco:.3}"
    );
}

#[test]
fn criterion_7_stop_gradient_blocks_the_embedding_matrix() {
    // Operation level: the honored backward returns no embedding gradient;
    // the deliberate violation returns a nonzero one.
    let dist = LexiconDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
    let w = Matrix::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
    let grad_b = vec![1.0, -0.5];
    let (grad_dist, grad_w) = cbow_bottleneck_backward(&dist, &w, &grad_b, true).unwrap();
    assert!(grad_w.is_none());
    assert!(grad_dist.iter().any(|&g| g != 0.0));
    let (_, grad_w) = cbow_bottleneck_backward(&dist, &w, &grad_b, false).unwrap();
    assert!(grad_w.unwrap().frobenius_norm() > 0.0);

    // End to end: with only the image-bottleneck reconstruction loss
    // enabled, the token-embedding matrix is reachable solely through the
    // bottleneck product, so its gradient is exactly zero iff the
    // stop-gradient holds.
    let data = synth_pairs(4, 10, 6, 64, 17).unwrap();
    let mut cfg = TrainConfig::toy_defaults(64);
    cfg.dim = 16;
    cfg.batch_size = 8;
    cfg.seed = 17;
    let honored = lexipse_core::trainer::wte_gradient_probe(&cfg, &data, true).unwrap();
    let violated = lexipse_core::trainer::wte_gradient_probe(&cfg, &data, false).unwrap();
    assert_eq!(honored, 0.0, "stop-gradient leaked into the embedding matrix");
    assert!(
        violated > 0.0,
        "the deliberate violation must produce a nonzero gradient, proving the probe is not vacuous"
    );
    println!(
        "[PASS] criterion 7: embedding-matrix gradient is exactly 0 with the stop-gradient \
         honored and {violated:.3e} with it violated"
    );
}

/// Machine-dependent throughput ordering; excluded from default runs.
#[test]
#[ignore = "report-only efficiency trend; machine-dependent, excluded from CI gating"]
fn criterion_8_sparser_indexes_serve_more_queries_per_second() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let vocab = 2048usize;
    let docs = 100_000usize;
    let corpus: Vec<QuantizedLexiconVector> = (0..docs)
        .map(|i| {
            let mut terms: Vec<u16> = (0..90).map(|_| rng.random_range(0..vocab as u16)).collect();
            terms.sort_unstable();
            terms.dedup();
            QuantizedLexiconVector::new(
                format!("d{i}"),
                terms
                    .into_iter()
                    .map(|t| (t, rng.random_range(1..=255u8)))
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        })
        .collect();
    let queries: Vec<QuantizedLexiconVector> = (0..200)
        .map(|i| random_quantized(&mut rng, format!("q{i}"), vocab, 32.0 / vocab as f64))
        .collect();

    let sparsified = |k: usize| -> Vec<QuantizedLexiconVector> {
        corpus
            .iter()
            .map(|doc| {
                let entries: Vec<(u32, f64)> = doc
                    .terms()
                    .iter()
                    .map(|&(t, w)| (t as u32, w as f64 / 100.0))
                    .collect();
                let sparse = SparseLexiconVector::from_entries(vocab, entries).unwrap();
                quantize(doc.id.clone(), &top_k_sparsify(&sparse, k).unwrap()).unwrap()
            })
            .collect()
    };

    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2);
    let cfg = BenchConfig {
        k: 10,
        threads,
        warmup: Duration::from_millis(300),
        duration: Duration::from_millis(1500),
    };
    let index_top8 = InvertedIndex::build(sparsified(8)).unwrap();
    let index_top64 = InvertedIndex::build(sparsified(64)).unwrap();
    let report_top8 = qps_bench(&index_top8, &queries, &cfg).unwrap();
    let report_top64 = qps_bench(&index_top64, &queries, &cfg).unwrap();
    let baseline = FullScanBaseline { corpus: &corpus };
    let report_scan = qps_bench(&baseline, &queries, &cfg).unwrap();

    let report = serde_json::json!({
        "top8": report_top8.to_value(),
        "top64": report_top64.to_value(),
        "full_scan": report_scan.to_value(),
        "hardware": lexipse_core::evalbench::hardware_metadata(),
    });
    let path = std::env::temp_dir().join("lexipse-efficiency-report.json");
    std::fs::write(&path, lexipse_core::evalbench::emit_report(&report)).unwrap();
    println!(
        "top-8 {:.1} qps, top-64 {:.1} qps, full scan {:.1} qps; report at {}",
        report_top8.qps,
        report_top64.qps,
        report_scan.qps,
        path.display()
    );
    assert!(report_top8.qps > report_top64.qps);
    assert!(report_top64.qps > report_scan.qps);
    println!("[PASS] criterion 8: throughput ordering top-8 > top-64 > full scan holds");
}

#[test]
fn criterion_9_formats_round_trip_and_reject_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD9);
    for trial in 0..100 {
        let vocab = rng.random_range(1..=300usize);
        let docs = rng.random_range(0..=60usize);
        let corpus: Vec<QuantizedLexiconVector> = (0..docs)
            .map(|i| random_quantized(&mut rng, format!("doc-{trial}-{i}"), vocab, 0.1))
            .collect();
        let index = InvertedIndex::build(corpus).unwrap();
        let bytes = serialize(&index);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, index);
        assert_eq!(serialize(&back), bytes, "trial {trial}");
    }
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let vocab = rng.random_range(4..=40usize);
        let dim = rng.random_range(2..=12usize);
        let params = ModelParams::init(vocab, dim, trial);
        let bytes = write_checkpoint(&params);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&back), bytes, "trial {trial}");
    }

    // Corrupted headers are rejected with format errors.
    let index = InvertedIndex::build(vec![QuantizedLexiconVector::new("d", vec![(1, 9)]).unwrap()])
        .unwrap();
    let mut bytes = serialize(&index);
    bytes[0] ^= 0x55;
    assert!(matches!(deserialize(&bytes), Err(Error::Format { .. })));
    let mut bytes = serialize(&index);
    bytes[4] = 0xff;
    assert!(matches!(deserialize(&bytes), Err(Error::Format { .. })));

    let params = ModelParams::init(8, 4, 1);
    let mut bytes = write_checkpoint(&params);
    bytes[1] = b'?';
    assert!(matches!(read_checkpoint(&bytes), Err(Error::Format { .. })));
    let good = write_checkpoint(&params);
    assert!(matches!(
        read_checkpoint(&good[..good.len() - 1]),
        Err(Error::Format { .. })
    ));

    println!(
        "[PASS] criterion 9: 100 random indexes and 100 random checkpoints round-trip \
         byte-identically; corrupted headers are rejected"
    );
}
