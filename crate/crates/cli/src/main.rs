//! Single command-line entry point wiring the pipeline: data synthesis,
//! two-phase training, encoding, index construction, search, evaluation,
//! throughput benchmarking, and the gradient/invariant self-check.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! `LEXIPSE_LOG` (error | info | debug) controls stderr verbosity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lexipse_core::evalbench::{
    emit_report, hardware_metadata, qps_bench, recall_report, BenchConfig, FullScanBaseline,
    Qrels,
};
use lexipse_core::lexindex::{
    brute_force_search, deserialize, quantize, read_quantized_jsonl, serialize,
    write_quantized_jsonl, InvertedIndex, QuantizedLexiconVector, RetrievalResult,
};
use lexipse_core::selfcheck::run_selfcheck;
use lexipse_core::sparse_repr::{
    read_logit_file, read_manifest, saturate_pool_with_epsilon, top_k_sparsify,
    write_sparse_jsonl, SparseLexiconVector,
};
use lexipse_core::trainer::{
    encode_sequence, read_checkpoint, read_pairs_jsonl, synth_pairs, train_phase1, train_phase2,
    write_checkpoint, write_pairs_jsonl, write_trace_jsonl, Modality, ObjectiveToggles, Split,
    SyntheticPairSet, TraceRecord, TrainConfig,
};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(
    name = "lexipse",
    version,
    about = "Sparse lexicon retrieval: synthesize data, train toy encoders, encode, index, \
             search, evaluate and benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Synth(SynthArgs),
    /// Run the two pre-training phases over a pairs file.
    Train(TrainArgs),
    /// Encode logit files or pairs into sparse/quantized vectors.
    Encode(EncodeArgs),
    /// Build a binary inverted index from quantized vectors.
    Index(IndexArgs),
    /// Query an index, optionally cross-checking against the full-scan oracle.
    Search(SearchArgs),
    /// Score search results against relevance judgments.
    Eval(EvalArgs),
    /// Measure sustained query throughput over an index.
    Bench(BenchArgs),
    /// Run the gradient and invariant self-check battery.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output pairs file (JSONL: metadata line, then one pair per line).
    #[arg(long)]
    out: PathBuf,
    /// Also write identity qrels (pair id -> pair id) as TSV.
    #[arg(long)]
    qrels_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    topics: usize,
    /// Pairs per topic.
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 12)]
    seq_len: usize,
    #[arg(long, default_value_t = 500)]
    vocab: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    /// Pairs file from `synth`.
    #[arg(long)]
    pairs: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics trace output (JSONL, one record per step).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Which pre-training phase(s) to run.
    #[arg(long, value_enum, default_value = "both")]
    phase: PhaseArg,
    /// Checkpoint to continue from (required for --phase 2).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Drop objectives: any of self, i2t, t2i, baco, moco.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Phase-1 step count (also phase-2 count when --phase 2).
    #[arg(long, default_value_t = 400)]
    steps: usize,
    /// Phase-2 step count under --phase both (default: steps / 2).
    #[arg(long)]
    steps2: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Phase-2 learning rate under --phase both (default: lr / 10).
    #[arg(long)]
    lr2: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 0.002)]
    lambda: f64,
    #[arg(long, default_value_t = 0.3)]
    enc_mask: f64,
    #[arg(long, default_value_t = 0.5)]
    dec_mask: f64,
    #[arg(long, default_value_t = 0.99)]
    ema: f64,
    #[arg(long, default_value_t = 4096)]
    queue_cap: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Image,
    Text,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    All,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Quantized,
    Sparse,
}

#[derive(Args)]
struct EncodeArgs {
    /// Manifest of logit files (`id<TAB>path` per line, paths relative to
    /// the manifest).
    #[arg(long, conflicts_with_all = ["checkpoint", "pairs"])]
    logits: Option<PathBuf>,
    /// Checkpoint to encode with (requires --pairs).
    #[arg(long, requires = "pairs")]
    checkpoint: Option<PathBuf>,
    /// Pairs file to encode (requires --checkpoint).
    #[arg(long, requires = "checkpoint")]
    pairs: Option<PathBuf>,
    /// Which side of each pair to encode.
    #[arg(long, value_enum, default_value = "image")]
    modality: ModalityArg,
    /// Which split of the pairs file to encode.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Keep only the K largest-weight terms per vector.
    #[arg(long)]
    topk: Option<usize>,
    /// Drop activations at or below this threshold (default keeps every
    /// positive weight).
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "quantized")]
    format: FormatArg,
}

#[derive(Args)]
struct IndexArgs {
    /// Quantized-vector JSONL.
    #[arg(long)]
    input: PathBuf,
    /// Output index file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query vectors (quantized JSONL).
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Results output (JSONL: {"id": ..., "hits": [[doc, score], ...]}).
    #[arg(long)]
    out: PathBuf,
    /// Cross-check every query against the full-scan oracle; any mismatch
    /// is a failure.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Search results JSONL.
    #[arg(long)]
    results: PathBuf,
    /// Relevance judgments TSV (`query_id<TAB>relevant_id`).
    #[arg(long)]
    qrels: PathBuf,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    ks: Vec<usize>,
    /// Report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn positive_secs(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("duration must be > 0 seconds, got {v}"))
    }
}

fn nonnegative_secs(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("warmup must be >= 0 seconds, got {v}"))
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, value_parser = nonnegative_secs, default_value = "0.2")]
    warmup_secs: f64,
    #[arg(long, value_parser = positive_secs, default_value = "1.0")]
    duration_secs: f64,
    /// Also benchmark a full-scan baseline over this quantized corpus.
    #[arg(long)]
    baseline_corpus: Option<PathBuf>,
    /// Score the query set against these qrels and include recall in the
    /// report.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Recall cutoffs used with --qrels.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    recall_ks: Vec<usize>,
    /// Report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Randomized instances per gradient check.
    #[arg(long, default_value_t = 60)]
    gradient_instances: usize,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Index(args) => cmd_index(args),
        Command::Search(args) => cmd_search(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    }
}

fn open_reader(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        format!("cannot open {}: {e}", path.display())
    })?))
}

fn create_writer(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        format!("cannot create {}: {e}", path.display())
    })?))
}

fn cmd_synth(args: SynthArgs) -> CliResult<i32> {
    let set = synth_pairs(args.topics, args.pairs, args.seq_len, args.vocab, args.seed)?;
    let mut w = create_writer(&args.out)?;
    write_pairs_jsonl(&mut w, &set)?;
    w.flush()?;
    if let Some(qrels_path) = &args.qrels_out {
        let mut qrels = Qrels::new();
        for pair in &set.pairs {
            qrels.insert(pair.id.clone(), pair.id.clone());
        }
        std::fs::write(qrels_path, qrels.to_tsv())?;
    }
    println!(
        "wrote {} pairs ({} held out) to {}",
        set.pairs.len(),
        set.heldout_pairs().len(),
        args.out.display()
    );
    Ok(0)
}

fn parse_toggles(ablate: &[String]) -> CliResult<(ObjectiveToggles, bool)> {
    let mut toggles = ObjectiveToggles::default();
    let mut moco = true;
    for name in ablate {
        match name.as_str() {
            "self" => toggles.self_mlm = false,
            "i2t" => toggles.i2t = false,
            "t2i" => toggles.t2i = false,
            "baco" => toggles.baco = false,
            "moco" => moco = false,
            other => return Err(format!("unknown objective {other:?} in --ablate").into()),
        }
    }
    Ok((toggles, moco))
}

fn cmd_train(args: TrainArgs) -> CliResult<i32> {
    let data = read_pairs_jsonl(open_reader(&args.pairs)?)?;
    let (toggles, moco_enabled) = parse_toggles(&args.ablate)?;
    let cfg = TrainConfig {
        dim: args.dim,
        vocab_size: data.vocab_size,
        batch_size: args.batch,
        steps: args.steps,
        learning_rate: args.lr,
        tau: args.tau,
        lambda: args.lambda,
        enc_mask_rate: args.enc_mask,
        dec_mask_rate: args.dec_mask,
        ema_decay: args.ema,
        queue_capacity: args.queue_cap,
        seed: args.seed,
        eval_every: args.eval_every,
        toggles,
    };

    let mut trace: Vec<TraceRecord> = Vec::new();
    let params = match args.phase {
        PhaseArg::One => {
            let out = train_phase1(&cfg, &data)?;
            trace = out.trace;
            report_phase("phase 1", &out.final_r1, out.final_mean_nnz_img, out.final_mean_nnz_txt);
            out.params
        }
        PhaseArg::Two => {
            if !moco_enabled {
                return Err("--phase 2 with --ablate moco leaves nothing to train".into());
            }
            let init = args
                .init
                .as_ref()
                .ok_or("--phase 2 requires --init with phase-1 weights")?;
            let params = read_checkpoint(&std::fs::read(init)?)?;
            let out = train_phase2(&cfg, &data, params)?;
            trace = out.trace;
            report_phase("phase 2", &out.final_r1, out.final_mean_nnz_img, out.final_mean_nnz_txt);
            out.params
        }
        PhaseArg::Both => {
            let p1 = train_phase1(&cfg, &data)?;
            trace.extend(p1.trace.iter().cloned());
            report_phase("phase 1", &p1.final_r1, p1.final_mean_nnz_img, p1.final_mean_nnz_txt);
            if moco_enabled {
                let mut cfg2 = cfg.phase2_follow_on();
                if let Some(steps2) = args.steps2 {
                    cfg2.steps = steps2;
                }
                if let Some(lr2) = args.lr2 {
                    cfg2.learning_rate = lr2;
                }
                let p2 = train_phase2(&cfg2, &data, p1.params)?;
                for mut rec in p2.trace.iter().cloned() {
                    rec.step += cfg.steps;
                    trace.push(rec);
                }
                report_phase("phase 2", &p2.final_r1, p2.final_mean_nnz_img, p2.final_mean_nnz_txt);
                p2.params
            } else {
                println!("phase 2 skipped (--ablate moco)");
                p1.params
            }
        }
    };

    std::fs::write(&args.out, write_checkpoint(&params))?;
    println!("checkpoint written to {}", args.out.display());
    if let Some(trace_path) = &args.trace {
        let mut w = create_writer(trace_path)?;
        write_trace_jsonl(&mut w, &trace)?;
        w.flush()?;
        println!("trace written to {}", trace_path.display());
    }
    Ok(0)
}

fn report_phase(label: &str, r1: &Option<f64>, nnz_img: f64, nnz_txt: f64) {
    match r1 {
        Some(r1) => println!(
            "{label} done: held-out R@1 {r1:.4}, mean nnz image {nnz_img:.1} / text {nnz_txt:.1}"
        ),
        None => println!(
            "{label} done: no held-out split; mean nnz image {nnz_img:.1} / text {nnz_txt:.1}"
        ),
    }
}

fn cmd_encode(args: EncodeArgs) -> CliResult<i32> {
    let mut sparse: Vec<(String, SparseLexiconVector)> = Vec::new();
    if let Some(manifest_path) = &args.logits {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        for entry in read_manifest(manifest_path)? {
            let file = base.join(&entry.path);
            let logits = read_logit_file(&file)
                .map_err(|e| format!("{}: {e}", file.display()))?;
            sparse.push((entry.id, saturate_pool_with_epsilon(&logits, args.epsilon)));
        }
    } else if let (Some(ckpt_path), Some(pairs_path)) = (&args.checkpoint, &args.pairs) {
        let params = read_checkpoint(&std::fs::read(ckpt_path)?)?;
        let data: SyntheticPairSet = read_pairs_jsonl(open_reader(pairs_path)?)?;
        let modality = match args.modality {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Text => Modality::Text,
        };
        for pair in &data.pairs {
            let keep = match args.split {
                SplitArg::All => true,
                SplitArg::Train => pair.split == Split::Train,
                SplitArg::Heldout => pair.split == Split::Heldout,
            };
            if !keep {
                continue;
            }
            let tokens = match modality {
                Modality::Image => &pair.image,
                Modality::Text => &pair.text,
            };
            sparse.push((pair.id.clone(), encode_sequence(&params, modality, tokens)?));
        }
    } else {
        return Err("encode needs either --logits or --checkpoint with --pairs".into());
    }

    if let Some(k) = args.topk {
        for (_, vec) in &mut sparse {
            *vec = top_k_sparsify(vec, k)?;
        }
    }

    let mut w = create_writer(&args.out)?;
    let count = sparse.len();
    match args.format {
        FormatArg::Sparse => write_sparse_jsonl(&mut w, &sparse)?,
        FormatArg::Quantized => {
            let quantized: Vec<QuantizedLexiconVector> = sparse
                .into_iter()
                .map(|(id, vec)| quantize(id, &vec))
                .collect::<Result<_, _>>()?;
            write_quantized_jsonl(&mut w, &quantized)?;
        }
    }
    w.flush()?;
    println!("encoded {count} vectors to {}", args.out.display());
    Ok(0)
}

fn cmd_index(args: IndexArgs) -> CliResult<i32> {
    let corpus = read_quantized_jsonl(open_reader(&args.input)?)?;
    let index = InvertedIndex::build(corpus)?;
    let stats = index.stats();
    std::fs::write(&args.out, serialize(&index))?;
    println!(
        "indexed {} docs, {} postings, payload {} bytes (avg {:.1} / max {} per doc) -> {}",
        stats.doc_count,
        stats.total_postings,
        stats.payload_bytes,
        stats.avg_doc_bytes,
        stats.max_doc_bytes,
        args.out.display()
    );
    Ok(0)
}

fn write_results<W: Write>(mut w: W, results: &[(String, RetrievalResult)]) -> CliResult<()> {
    for (id, result) in results {
        let hits: Vec<serde_json::Value> = result
            .hits
            .iter()
            .map(|(doc, score)| serde_json::json!([doc, score]))
            .collect();
        serde_json::to_writer(&mut w, &serde_json::json!({"id": id, "hits": hits}))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_results(path: &Path) -> CliResult<Vec<(String, RetrievalResult)>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (lineno, line) in open_reader(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| format!("results line {}: {e}", lineno + 1))?;
        let id = v
            .get("id")
            .and_then(|x| x.as_str())
            .ok_or_else(|| format!("results line {}: missing id", lineno + 1))?
            .to_string();
        let mut hits = Vec::new();
        for hit in v
            .get("hits")
            .and_then(|x| x.as_array())
            .ok_or_else(|| format!("results line {}: missing hits", lineno + 1))?
        {
            let doc = hit[0]
                .as_str()
                .ok_or_else(|| format!("results line {}: bad hit", lineno + 1))?;
            let score = hit[1]
                .as_u64()
                .ok_or_else(|| format!("results line {}: bad score", lineno + 1))?;
            hits.push((doc.to_string(), score));
        }
        out.push((id, RetrievalResult { hits }));
    }
    Ok(out)
}

fn cmd_search(args: SearchArgs) -> CliResult<i32> {
    let index = deserialize(&std::fs::read(&args.index)?)?;
    let queries = read_quantized_jsonl(open_reader(&args.queries)?)?;
    let oracle_corpus = args.oracle.then(|| index.reconstruct_corpus());

    let mut results = Vec::with_capacity(queries.len());
    let mut mismatches = 0usize;
    for query in &queries {
        let result = index.search(query, args.k)?;
        if let Some(corpus) = &oracle_corpus {
            let expect = brute_force_search(corpus, query, args.k)?;
            if expect != result {
                eprintln!("oracle mismatch for query {}", query.id);
                mismatches += 1;
            }
        }
        results.push((query.id.clone(), result));
    }
    let mut w = create_writer(&args.out)?;
    write_results(&mut w, &results)?;
    w.flush()?;
    println!(
        "searched {} queries (k={}) -> {}",
        results.len(),
        args.k,
        args.out.display()
    );
    if mismatches > 0 {
        return Err(format!("{mismatches} queries disagreed with the full-scan oracle").into());
    }
    if args.oracle {
        println!("oracle cross-check passed for all {} queries", results.len());
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> CliResult<i32> {
    let results = read_results(&args.results)?;
    let qrels = Qrels::from_tsv(open_reader(&args.qrels)?)?;
    let report = recall_report(&results, &qrels, &args.ks)?;
    let bytes = emit_report(&report);
    match &args.out {
        Some(path) => std::fs::write(path, bytes)?,
        None => {
            std::io::stdout().write_all(&bytes)?;
            println!();
        }
    }
    Ok(0)
}

fn cmd_bench(args: BenchArgs) -> CliResult<i32> {
    let index = deserialize(&std::fs::read(&args.index)?)?;
    let queries = read_quantized_jsonl(open_reader(&args.queries)?)?;
    let cfg = BenchConfig {
        k: args.k,
        threads: args.threads,
        warmup: Duration::from_secs_f64(args.warmup_secs),
        duration: Duration::from_secs_f64(args.duration_secs),
    };
    let mut report = qps_bench(&index, &queries, &cfg)?;
    if let Some(qrels_path) = &args.qrels {
        let qrels = Qrels::from_tsv(open_reader(qrels_path)?)?;
        let max_k = args.recall_ks.iter().copied().max().unwrap_or(args.k);
        let results: Vec<(String, RetrievalResult)> = queries
            .iter()
            .map(|q| Ok((q.id.clone(), index.search(q, max_k)?)))
            .collect::<Result<_, lexipse_core::Error>>()?;
        report.recall = Some(lexipse_core::evalbench::recall_at_k(
            &results,
            &qrels,
            &args.recall_ks,
        )?);
    }
    let mut root = serde_json::Map::new();
    root.insert("index".into(), report.to_value());
    if let Some(corpus_path) = &args.baseline_corpus {
        let corpus = read_quantized_jsonl(open_reader(corpus_path)?)?;
        let baseline = FullScanBaseline { corpus: &corpus };
        let scan_report = qps_bench(&baseline, &queries, &cfg)?;
        root.insert("full_scan".into(), scan_report.to_value());
    }
    root.insert("hardware".into(), hardware_metadata());
    let bytes = emit_report(&serde_json::Value::Object(root));
    match &args.out {
        Some(path) => std::fs::write(path, bytes)?,
        None => {
            std::io::stdout().write_all(&bytes)?;
            println!();
        }
    }
    Ok(0)
}

fn cmd_selfcheck(args: SelfcheckArgs) -> CliResult<i32> {
    let results = run_selfcheck(args.seed, args.gradient_instances);
    let mut failures = 0usize;
    for r in &results {
        let status = if r.passed { "ok  " } else { "FAIL" };
        println!("{status}  {} ({})", r.name, r.detail);
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} of {} checks failed", results.len());
        Ok(1)
    } else {
        println!("all {} checks passed", results.len());
        Ok(0)
    }
}
