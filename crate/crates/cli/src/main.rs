use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ctxpress_core::compress::{
    compress, gradcam_token_scores, CompressionRequest, CompressionResult, GradcamLayer, Method, DEFAULT_GEN_STEPS,
};
use ctxpress_core::data::{read_jsonl, write_jsonl, CandidateSet, QaPair};
use ctxpress_core::eval::{
    answer_scores, cost_report, needle_retained, parallel_map, recall_at_k, run_sweep, CostReport, RougeScore,
    SweepOptions,
};
use ctxpress_core::io::{emit_heatmap, validate_dataset, Schema};
use ctxpress_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use ctxpress_core::tokenizer::{tokenize, ChunkingStrategy};
use ctxpress_core::train::synthetic::gen_synthetic;
use ctxpress_core::train::{build_items, train_joint, Progress, TrainConfig, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "ctxpress", version, about = "Instruction-aware context compression", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on candidate sets and QA pairs.
    Train(TrainArgs),
    /// Compress every pair of a QA file.
    Compress(CompressArgs),
    /// Rank candidate documents and report Recall@k.
    Rank(RankArgs),
    /// Score compression results against their QA pairs.
    Eval(EvalArgs),
    /// Retention-ratio sweep over methods.
    Sweep(SweepArgs),
    /// Write a synthetic needle-in-a-haystack dataset.
    GenSynthetic(GenArgs),
    /// Grad-CAM token relevance as a standalone HTML heatmap.
    GradcamViz(VizArgs),
    /// Check a JSONL dataset against its schema.
    Validate(ValidateArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    Ranking,
    Generation,
    Ensemble,
    Selective,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ranking => Method::Ranking,
            MethodArg::Generation => Method::Generation,
            MethodArg::Ensemble => Method::Ensemble,
            MethodArg::Selective => Method::Selective,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Toy,
    Large,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SchemaArg {
    Qa,
    Candidates,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("ratio must be in (0,1], got {s:?}"))?;
    if r > 0.0 && r <= 1.0 {
        Ok(r)
    } else {
        Err("ratio must be in (0,1]".to_string())
    }
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn parse_layer(s: &str) -> Result<GradcamLayer, String> {
    if s == "last" {
        return Ok(GradcamLayer::Last);
    }
    s.parse().map(GradcamLayer::Index).map_err(|_| format!("expected \"last\" or a layer index, got {s:?}"))
}

#[derive(Args, Debug, Clone)]
struct ChunkArgs {
    /// Split on these delimiter characters (default: '.', '。' and newline).
    #[arg(long, conflicts_with = "window_tokens")]
    delimiters: Option<String>,
    /// Split into fixed windows of this many tokens instead of delimiters.
    #[arg(long, value_parser = parse_positive)]
    window_tokens: Option<usize>,
}

impl ChunkArgs {
    fn strategy(&self) -> ctxpress_core::Result<ChunkingStrategy> {
        match (&self.delimiters, self.window_tokens) {
            (_, Some(w)) => ChunkingStrategy::window(w),
            (Some(d), None) => ChunkingStrategy::delimiters(d.chars().collect()),
            (None, None) => Ok(ChunkingStrategy::default()),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    qa: Option<PathBuf>,
    /// Held-out candidate sets for ranking accuracy.
    #[arg(long)]
    val_candidates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long, conflicts_with = "preset")]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, value_parser = parse_positive, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().smoothing)]
    smoothing: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss_weights.0)]
    w_rank: f64,
    #[arg(long, default_value_t = TrainConfig::default().loss_weights.1)]
    w_lm: f64,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Training report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ensemble")]
    method: MethodArg,
    #[arg(long, value_parser = parse_ratio, default_value = "0.5")]
    ratio: f64,
    #[arg(long, value_parser = parse_positive, default_value_t = DEFAULT_GEN_STEPS)]
    gen_steps: usize,
    #[arg(long, value_parser = parse_layer, default_value = "last")]
    gradcam_layer: GradcamLayer,
    #[command(flatten)]
    chunking: ChunkArgs,
    #[arg(long, value_parser = parse_positive, default_value_t = 1)]
    jobs: usize,
    /// Accepted by every subcommand; compression itself draws no randomness.
    #[allow(dead_code)]
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_positive, default_value_t = 1)]
    jobs: usize,
    #[allow(dead_code)]
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// QA pairs the results were produced from.
    #[arg(long)]
    qa: PathBuf,
    /// Output of `compress`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[allow(dead_code)]
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "ranking,generation,ensemble,selective")]
    methods: Vec<MethodArg>,
    #[arg(long, value_parser = parse_ratio, value_delimiter = ',', default_value = "0.2,0.35,0.5,0.65,0.8")]
    ratios: Vec<f64>,
    #[arg(long, value_parser = parse_positive, default_value_t = DEFAULT_GEN_STEPS)]
    gen_steps: usize,
    #[arg(long, value_parser = parse_layer, default_value = "last")]
    gradcam_layer: GradcamLayer,
    #[command(flatten)]
    chunking: ChunkArgs,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, value_parser = parse_positive, default_value_t = 1)]
    jobs: usize,
    #[allow(dead_code)]
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = parse_positive)]
    n: usize,
    #[arg(long, default_value_t = 9)]
    fillers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes candidates.jsonl and qa.jsonl here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long, conflicts_with = "document_file", required_unless_present = "document_file")]
    document: Option<String>,
    #[arg(long)]
    document_file: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_positive, default_value_t = DEFAULT_GEN_STEPS)]
    gen_steps: usize,
    #[arg(long, value_parser = parse_layer, default_value = "last")]
    gradcam_layer: GradcamLayer,
    #[allow(dead_code)]
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    path: PathBuf,
    #[arg(long, value_enum)]
    schema: SchemaArg,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<ctxpress_core::Error> for Failure {
    fn from(e: ctxpress_core::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train(a) => train(a),
        Command::Compress(a) => compress_cmd(a),
        Command::Rank(a) => rank(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::GenSynthetic(a) => gen(a),
        Command::GradcamViz(a) => viz(a),
        Command::Validate(a) => validate(a),
    }
}

/// Validates, then reads. Schema violations are data errors.
fn load<T: serde::de::DeserializeOwned>(path: &Path, schema: Schema) -> CliResult<Vec<T>> {
    let report = validate_dataset(path, schema)?;
    if !report.is_clean() {
        let mut msg = format!("{}: {} invalid line(s)", path.display(), report.invalid);
        for v in &report.violations {
            msg.push_str(&format!("\n  line {}: {}", v.line, v.message));
        }
        return Err(Failure::Data(msg));
    }
    Ok(read_jsonl(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        smoothing: a.smoothing,
        loss_weights: (a.w_rank, a.w_lm),
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.eval_every > 0 && a.val_candidates.is_none() {
        return Err(Failure::Usage("--eval-every needs --val-candidates".into()));
    }
    if a.target_accuracy.is_some() && (a.val_candidates.is_none() || a.eval_every == 0) {
        return Err(Failure::Usage("--target-accuracy needs --val-candidates and --eval-every".into()));
    }
    let sets: Vec<CandidateSet> = load(&a.candidates, Schema::Candidates)?;
    let pairs: Vec<QaPair> = match &a.qa {
        Some(p) => load(p, Schema::Qa)?,
        None => Vec::new(),
    };
    let val_items = match &a.val_candidates {
        Some(p) => Some(build_items(&load::<CandidateSet>(p, Schema::Candidates)?, &[])),
        None => None,
    };
    let mut model = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => {
            let base = match a.preset {
                Preset::Toy => ModelConfig::toy(),
                Preset::Large => ModelConfig::large(),
            };
            Model::new(base.with_seed(a.seed))?
        }
    };
    let items = build_items(&sets, &pairs);
    let mut progress = |p: &Progress| match p {
        Progress::Step { step, rank_loss, lm_loss } if step % 10 == 0 => {
            eprintln!("step {step} rank {} lm {}", fmt_opt(*rank_loss), fmt_opt(*lm_loss))
        }
        Progress::Eval { step, accuracy } => eprintln!("step {step} val accuracy {accuracy:.4}"),
        _ => {}
    };
    let opts = TrainOptions {
        validation: val_items.as_deref(),
        eval_every: a.eval_every,
        target_accuracy: a.target_accuracy,
        max_steps: a.max_steps,
        progress: Some(&mut progress),
    };
    let report = train_joint(&mut model, &items, &cfg, opts)?;
    save_checkpoint(&model, &a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    println!("trained {} steps, checkpoint written to {}", report.steps, a.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

#[derive(Serialize)]
struct CompressLine<'a> {
    id: &'a str,
    method: Method,
    #[serde(flatten)]
    result: CompressionResult,
}

fn compress_cmd(a: CompressArgs) -> CliResult {
    let strategy = a.chunking.strategy().map_err(|e| Failure::Usage(e.to_string()))?;
    let model = load_checkpoint(&a.checkpoint)?;
    if let GradcamLayer::Index(i) = a.gradcam_layer {
        if i >= model.config().dec_layers {
            return Err(Failure::Usage(format!("--gradcam-layer {i} exceeds the model's decoder layers")));
        }
    }
    let pairs: Vec<QaPair> = load(&a.input, Schema::Qa)?;
    let method: Method = a.method.into();
    let results = parallel_map(&pairs, a.jobs, |qa| {
        let req = CompressionRequest {
            instruction: qa.instruction.clone(),
            document: qa.document.clone(),
            ratio: a.ratio,
            method,
            chunking: strategy.clone(),
            gen_steps: a.gen_steps,
            gradcam_layer: a.gradcam_layer,
        };
        compress(&model, &req)
    });
    let mut lines = Vec::with_capacity(pairs.len());
    for (qa, r) in pairs.iter().zip(results) {
        let result = r.map_err(|e| Failure::Data(format!("pair {}: {e}", qa.id)))?;
        lines.push(CompressLine { id: &qa.id, method, result });
    }
    write_jsonl(&a.out, &lines)?;
    Ok(())
}

#[derive(Serialize)]
struct RankLine<'a> {
    id: &'a str,
    ranking: Vec<usize>,
    scores: Vec<f64>,
}

fn rank(a: RankArgs) -> CliResult {
    let model = load_checkpoint(&a.checkpoint)?;
    let sets: Vec<CandidateSet> = load(&a.input, Schema::Candidates)?;
    if sets.is_empty() {
        return Err(Failure::Data(format!("{} holds no candidate sets", a.input.display())));
    }
    let scored = parallel_map(&sets, a.jobs, |set| -> ctxpress_core::Result<Vec<f64>> {
        let states = set.candidates.iter().map(|d| model.encode(&tokenize(d))).collect::<ctxpress_core::Result<Vec<_>>>()?;
        model.rank_scores(&tokenize(&set.instruction), &states)
    });
    let mut lines = Vec::with_capacity(sets.len());
    for (set, s) in sets.iter().zip(scored) {
        let scores = s?;
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
        lines.push(RankLine { id: &set.id, ranking, scores });
    }
    write_jsonl(&a.out, &lines)?;
    let ranked: Vec<Vec<usize>> = lines.iter().map(|l| l.ranking.clone()).collect();
    let positives = vec![vec![0usize]; ranked.len()];
    for k in [1, 5, 10] {
        println!("recall@{k}\t{:.4}", recall_at_k(&ranked, &positives, k)?);
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ResultLine {
    id: String,
    #[serde(flatten)]
    result: CompressionResult,
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    rouge1: RougeScore,
    rouge2: RougeScore,
    rouge_l: RougeScore,
    needle_retention: f64,
    cost: CostReport,
}

fn eval(a: EvalArgs) -> CliResult {
    let pairs: Vec<QaPair> = load(&a.qa, Schema::Qa)?;
    let lines: Vec<ResultLine> = read_jsonl(&a.results)?;
    if lines.is_empty() {
        return Err(Failure::Data(format!("{} holds no results", a.results.display())));
    }
    let by_id: std::collections::HashMap<&str, &QaPair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut sums = [RougeScore::default(); 3];
    let mut retained = 0usize;
    for line in &lines {
        let qa = by_id.get(line.id.as_str()).ok_or_else(|| Failure::Data(format!("no QA pair with id {}", line.id)))?;
        for (acc, s) in sums.iter_mut().zip(answer_scores(&line.result.compressed_text, qa)) {
            acc.precision += s.precision;
            acc.recall += s.recall;
            acc.f1 += s.f1;
        }
        retained += usize::from(needle_retained(&line.result, qa));
    }
    let n = lines.len() as f64;
    let mean = |s: RougeScore| RougeScore { precision: s.precision / n, recall: s.recall / n, f1: s.f1 / n };
    let results: Vec<CompressionResult> = lines.into_iter().map(|l| l.result).collect();
    let report = EvalReport {
        samples: results.len(),
        rouge1: mean(sums[0]),
        rouge2: mean(sums[1]),
        rouge_l: mean(sums[2]),
        needle_retention: retained as f64 / n,
        cost: cost_report(&results)?,
    };
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult {
    let chunking = a.chunking.strategy().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.methods.is_empty() || a.ratios.is_empty() {
        return Err(Failure::Usage("--methods and --ratios must not be empty".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let pairs: Vec<QaPair> = load(&a.input, Schema::Qa)?;
    let methods: Vec<Method> = a.methods.iter().map(|&m| m.into()).collect();
    let opts = SweepOptions { chunking, gen_steps: a.gen_steps, gradcam_layer: a.gradcam_layer, jobs: a.jobs };
    let report = run_sweep(&model, &pairs, &methods, &a.ratios, &opts)?;
    let csv = report.to_csv_string()?;
    match &a.csv {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn gen(a: GenArgs) -> CliResult {
    let set = gen_synthetic(a.n, a.fillers, a.seed);
    fs::create_dir_all(&a.out_dir)?;
    write_jsonl(a.out_dir.join("candidates.jsonl"), &set.candidates)?;
    write_jsonl(a.out_dir.join("qa.jsonl"), &set.qa)?;
    Ok(())
}

fn viz(a: VizArgs) -> CliResult {
    let document = match (&a.document, &a.document_file) {
        (Some(d), _) => d.clone(),
        (None, Some(p)) => fs::read_to_string(p)?,
        (None, None) => return Err(Failure::Usage("--document or --document-file is required".into())),
    };
    if a.instruction.is_empty() {
        return Err(Failure::Usage("--instruction must not be empty".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let scores = gradcam_token_scores(&model, &a.instruction, &document, a.gen_steps, a.gradcam_layer)?;
    emit_heatmap(&document, &scores, &a.instruction, &a.out)?;
    Ok(())
}

fn validate(a: ValidateArgs) -> CliResult {
    let schema = match a.schema {
        SchemaArg::Qa => Schema::Qa,
        SchemaArg::Candidates => Schema::Candidates,
    };
    let report = validate_dataset(&a.path, schema)?;
    println!("valid {}\tinvalid {}", report.valid, report.invalid);
    for v in &report.violations {
        println!("line {}: {}", v.line, v.message);
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{} invalid line(s)", report.invalid)))
    }
}
