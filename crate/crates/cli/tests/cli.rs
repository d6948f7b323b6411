//! End-to-end tests of the `lexipse` binary: every subcommand, the full
//! synth -> train -> encode -> index -> search -> eval pipeline, and the
//! exit-code contract (0 ok, 1 runtime failure, 2 usage error).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lexipse_core::lexindex::read_quantized_jsonl;
use lexipse_core::sparse_repr::{write_logit_file, write_manifest, LogitMatrix, ManifestEntry};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lexipse"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lexipse-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let pairs = dir.join(format!("pairs-{seed}.jsonl"));
    let qrels = dir.join(format!("qrels-{seed}.tsv"));
    run_ok(bin().args([
        "synth",
        "--out",
        pairs.to_str().unwrap(),
        "--qrels-out",
        qrels.to_str().unwrap(),
        "--topics",
        "4",
        "--pairs",
        "10",
        "--seq-len",
        "6",
        "--vocab",
        "64",
        "--seed",
        &seed.to_string(),
    ]));
    (pairs, qrels)
}

fn train(dir: &Path, pairs: &Path, name: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let ckpt = dir.join(format!("{name}.lxck"));
    let trace = dir.join(format!("{name}.trace.jsonl"));
    let mut cmd = bin();
    cmd.args([
        "train",
        "--pairs",
        pairs.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--dim",
        "16",
        "--batch",
        "8",
        "--steps",
        "150",
        "--steps2",
        "50",
        "--eval-every",
        "50",
        "--seed",
        "5",
    ]);
    cmd.args(extra);
    run_ok(&mut cmd);
    (ckpt, trace)
}

#[test]
fn synth_is_deterministic_and_counts_records() {
    let dir = workdir("synth");
    let (pairs_a, qrels_a) = synth(&dir, 7);
    let bytes_a = std::fs::read(&pairs_a).unwrap();
    // Re-run with the same seed into a fresh file.
    let dir_b = workdir("synth-b");
    let (pairs_b, qrels_b) = synth(&dir_b, 7);
    assert_eq!(bytes_a, std::fs::read(&pairs_b).unwrap());
    assert_eq!(
        std::fs::read(&qrels_a).unwrap(),
        std::fs::read(&qrels_b).unwrap()
    );
    // Metadata line plus topics * pairs records.
    let lines = String::from_utf8(bytes_a).unwrap().lines().count();
    assert_eq!(lines, 1 + 4 * 10);
}

#[test]
fn full_pipeline_produces_sane_recall() {
    let dir = workdir("pipeline");
    let (pairs, qrels) = synth(&dir, 7);
    let (ckpt, trace) = train(&dir, &pairs, "model", &[]);
    assert!(ckpt.exists());
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    assert!(trace_text.lines().count() >= 200);
    assert!(trace_text.contains("\"L_baco\""));
    assert!(trace_text.contains("\"L_moco\""));

    // Encode the image side of everything as the corpus, the text side of
    // the held-out split as queries.
    let corpus = dir.join("corpus.jsonl");
    run_ok(bin().args([
        "encode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
        "--modality",
        "image",
        "--split",
        "all",
        "--out",
        corpus.to_str().unwrap(),
    ]));
    let queries = dir.join("queries.jsonl");
    run_ok(bin().args([
        "encode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
        "--modality",
        "text",
        "--split",
        "heldout",
        "--out",
        queries.to_str().unwrap(),
    ]));

    // Quantized weights stay in [1, 255] (u8 round trip enforces the upper
    // bound; zero weights are rejected by the reader).
    let corpus_vecs = read_quantized_jsonl(std::fs::read(&corpus).unwrap().as_slice()).unwrap();
    assert_eq!(corpus_vecs.len(), 40);
    assert!(corpus_vecs.iter().any(|v| v.nnz() > 0));

    let index = dir.join("index.lxix");
    let index_out = run_ok(bin().args([
        "index",
        "--input",
        corpus.to_str().unwrap(),
        "--out",
        index.to_str().unwrap(),
    ]));
    // The printed stats echo a recount of the corpus.
    let total_postings: usize = corpus_vecs.iter().map(|v| v.nnz()).sum();
    let stats_line = String::from_utf8_lossy(&index_out.stdout).to_string();
    assert!(stats_line.contains("indexed 40 docs"), "{stats_line}");
    assert!(
        stats_line.contains(&format!("{total_postings} postings")),
        "{stats_line}"
    );

    let results = dir.join("results.jsonl");
    let out = run_ok(bin().args([
        "search",
        "--index",
        index.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--k",
        "10",
        "--out",
        results.to_str().unwrap(),
        "--oracle",
    ]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("oracle cross-check passed"));

    let report = dir.join("report.json");
    run_ok(bin().args([
        "eval",
        "--results",
        results.to_str().unwrap(),
        "--qrels",
        qrels.to_str().unwrap(),
        "--ks",
        "1,5,10",
        "--out",
        report.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let recall = report.get("recall").unwrap();
    let r1 = recall.get("r1").unwrap().as_f64().unwrap();
    let r5 = recall.get("r5").unwrap().as_f64().unwrap();
    let r10 = recall.get("r10").unwrap().as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert!(r1 <= r5 && r5 <= r10, "recall not monotone: {r1} {r5} {r10}");

    // Bench over the same index; thread count echoed in the report, recall
    // included when qrels are passed.
    let bench_out = run_ok(bin().args([
        "bench",
        "--index",
        index.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--k",
        "5",
        "--threads",
        "2",
        "--warmup-secs",
        "0.05",
        "--duration-secs",
        "0.15",
        "--baseline-corpus",
        corpus.to_str().unwrap(),
        "--qrels",
        qrels.to_str().unwrap(),
    ]));
    let bench: serde_json::Value =
        serde_json::from_slice(&bench_out.stdout).unwrap();
    let idx_report = bench.get("index").unwrap();
    assert_eq!(
        idx_report.pointer("/config/threads").unwrap().as_u64(),
        Some(2)
    );
    assert!(idx_report.get("qps").unwrap().as_f64().unwrap() > 0.0);
    assert!(idx_report.pointer("/recall/r1").is_some());
    assert!(idx_report.pointer("/index_stats/avg_doc_bytes").is_some());
    assert!(bench.get("full_scan").is_some());
    assert!(bench.pointer("/hardware/cpus").is_some());
}

#[test]
fn train_is_deterministic_and_ablations_change_the_trace() {
    let dir = workdir("train-det");
    let (pairs, _) = synth(&dir, 9);
    let (ckpt_a, _) = train(&dir, &pairs, "a", &[]);
    let dir_b = workdir("train-det-b");
    let (ckpt_b, _) = train(&dir_b, &pairs, "b", &[]);
    assert_eq!(
        std::fs::read(&ckpt_a).unwrap(),
        std::fs::read(&ckpt_b).unwrap()
    );

    let (_, trace_nobaco) = train(&dir, &pairs, "nobaco", &["--ablate", "baco"]);
    let text = std::fs::read_to_string(&trace_nobaco).unwrap();
    assert!(!text.contains("\"L_baco\""));
    assert!(text.contains("\"L_self\""));

    // Ablating the momentum loss skips phase 2 entirely.
    let (_, trace_nomoco) = train(&dir, &pairs, "nomoco", &["--ablate", "moco"]);
    let text = std::fs::read_to_string(&trace_nomoco).unwrap();
    assert!(!text.contains("\"L_moco\""));
    assert_eq!(text.lines().count(), 150);
}

#[test]
fn phase_one_then_two_via_checkpoint_matches_flag_contract() {
    let dir = workdir("phases");
    let (pairs, _) = synth(&dir, 21);
    let (ckpt1, trace1) = train(&dir, &pairs, "p1", &["--phase", "1"]);
    let text1 = std::fs::read_to_string(&trace1).unwrap();
    assert!(!text1.contains("L_moco"));

    // Phase 2 alone requires an init checkpoint.
    let ckpt2 = dir.join("p2.lxck");
    let trace2 = dir.join("p2.trace.jsonl");
    let out = bin()
        .args([
            "train",
            "--pairs",
            pairs.to_str().unwrap(),
            "--out",
            ckpt2.to_str().unwrap(),
            "--phase",
            "2",
            "--steps",
            "30",
            "--dim",
            "16",
            "--batch",
            "8",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    run_ok(bin().args([
        "train",
        "--pairs",
        pairs.to_str().unwrap(),
        "--out",
        ckpt2.to_str().unwrap(),
        "--trace",
        trace2.to_str().unwrap(),
        "--phase",
        "2",
        "--init",
        ckpt1.to_str().unwrap(),
        "--steps",
        "30",
        "--dim",
        "16",
        "--batch",
        "8",
        "--seed",
        "5",
    ]));
    let text2 = std::fs::read_to_string(&trace2).unwrap();
    assert!(text2.contains("L_moco"));
    assert!(!text2.contains("L_self"));
}

#[test]
fn encode_from_logit_files_honors_topk_and_zero_logits() {
    let dir = workdir("encode-logits");
    // One sample with staggered positive logits, one all-zero sample.
    let a = LogitMatrix::from_rows(&[vec![0.0, 2.0, 1.0, 3.0, 0.5, -1.0]]).unwrap();
    let b = LogitMatrix::from_rows(&[vec![0.0; 6]]).unwrap();
    write_logit_file(&dir.join("a.llgt"), &a).unwrap();
    write_logit_file(&dir.join("b.llgt"), &b).unwrap();
    let manifest = dir.join("manifest.tsv");
    write_manifest(
        &manifest,
        &[
            ManifestEntry {
                id: "a".into(),
                path: "a.llgt".into(),
            },
            ManifestEntry {
                id: "b".into(),
                path: "b.llgt".into(),
            },
        ],
    )
    .unwrap();

    let out_path = dir.join("enc.jsonl");
    run_ok(bin().args([
        "encode",
        "--logits",
        manifest.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--topk",
        "2",
    ]));
    let vecs = read_quantized_jsonl(std::fs::read(&out_path).unwrap().as_slice()).unwrap();
    assert_eq!(vecs.len(), 2);
    assert_eq!(vecs[0].id, "a");
    // Top-2 of log1p([0,2,1,3,0.5,0]) keeps terms 1 and 3.
    let terms: Vec<u16> = vecs[0].terms().iter().map(|&(t, _)| t).collect();
    assert_eq!(terms, vec![1, 3]);
    assert!(vecs[0].terms().iter().all(|&(_, w)| (1..=255).contains(&w)));
    // All-zero logits produce an empty term list.
    assert_eq!(vecs[1].nnz(), 0);
}

#[test]
fn duplicate_corpus_ids_fail_indexing() {
    let dir = workdir("dup");
    let corpus = dir.join("dup.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\":\"x\",\"terms\":[[1,10]]}\n{\"id\":\"x\",\"terms\":[[2,10]]}\n",
    )
    .unwrap();
    let out = bin()
        .args([
            "index",
            "--input",
            corpus.to_str().unwrap(),
            "--out",
            dir.join("i.lxix").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate id"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    // Unknown flag.
    let out = bin().args(["synth", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Missing required flag.
    let out = bin().args(["synth"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Zero benchmark duration is rejected at parse time.
    let out = bin()
        .args([
            "bench",
            "--index",
            "x",
            "--queries",
            "y",
            "--duration-secs",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // --help succeeds and lists every subcommand.
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "encode", "index", "search", "eval", "bench", "selfcheck"] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
}

#[test]
fn eval_with_perfect_results_reports_ones() {
    let dir = workdir("eval");
    std::fs::write(dir.join("qrels.tsv"), "q1\td1\nq2\td2\n").unwrap();
    std::fs::write(
        dir.join("results.jsonl"),
        "{\"id\":\"q1\",\"hits\":[[\"d1\",100]]}\n{\"id\":\"q2\",\"hits\":[[\"d2\",90]]}\n",
    )
    .unwrap();
    let out = run_ok(bin().args([
        "eval",
        "--results",
        dir.join("results.jsonl").to_str().unwrap(),
        "--qrels",
        dir.join("qrels.tsv").to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["r1", "r5", "r10"] {
        assert_eq!(report.pointer(&format!("/recall/{k}")).unwrap().as_f64(), Some(1.0));
    }
}

#[test]
fn selfcheck_passes_on_a_clean_build() {
    let out = run_ok(bin().args(["selfcheck", "--gradient-instances", "12", "--seed", "3"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("all"));
    assert!(!text.contains("FAIL"));
}
