//! ROUGE, Recall@k, retention-ratio sweeps and a token-cost estimate.

mod rouge;

pub use rouge::{lcs_len, rouge_l, rouge_l_tokens, rouge_n, rouge_n_tokens, rouge_tokens, RougeScore};

use std::io::Write;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::compress::{
    fuse_average_rank, gradcam_from_trace, score_chunks, select_with_boundary, CompressionRequest, CompressionResult, GradcamLayer,
    Method, DEFAULT_GEN_STEPS,
};
use crate::data::QaPair;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::{split_chunks, tokenize, Chunk, ChunkingStrategy};

pub const DEFAULT_RATIOS: [f64; 5] = [0.2, 0.35, 0.5, 0.65, 0.8];
pub const ORIGIN: &str = "origin";

/// Fraction of queries with a positive among the first `k` ranked ids.
pub fn recall_at_k<T: PartialEq>(ranked: &[Vec<T>], positives: &[Vec<T>], k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::InvalidInput("no queries".into()));
    }
    if k < 1 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if ranked.len() != positives.len() {
        return Err(Error::InvalidInput(format!("{} rankings for {} positive sets", ranked.len(), positives.len())));
    }
    let hits = ranked
        .iter()
        .zip(positives)
        .filter(|(list, pos)| list.iter().take(k).any(|id| pos.contains(id)))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Average ranks (1-based), ties share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation, `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// A constant series counts as non-decreasing.
pub fn non_decreasing_trend(x: &[f64], y: &[f64]) -> bool {
    spearman(x, y).map_or(true, |r| r >= 0.0)
}

/// The sentence of `text` with the best ROUGE-1 F1 against the instruction;
/// the first one wins ties.
pub fn extractive_answer(text: &str, instruction: &str) -> String {
    let query = rouge_tokens(instruction);
    let mut best: Option<(f64, &str)> = None;
    let chunks = split_chunks(text, &ChunkingStrategy::default());
    for c in &chunks {
        let sentence = c.text.trim();
        if sentence.is_empty() {
            continue;
        }
        let f = rouge_n_tokens(&rouge_tokens(sentence), &query, 1).f1;
        if best.map_or(true, |(b, _)| f > b) {
            best = Some((f, sentence));
        }
    }
    best.map(|(_, s)| s.to_string()).unwrap_or_default()
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of the extractive answer against the reference.
pub fn answer_scores(text: &str, qa: &QaPair) -> [RougeScore; 3] {
    let answer = rouge_tokens(&extractive_answer(text, &qa.instruction));
    let reference = rouge_tokens(&qa.reference);
    [rouge_n_tokens(&answer, &reference, 1), rouge_n_tokens(&answer, &reference, 2), rouge_l_tokens(&answer, &reference)]
}

/// Whether the compressed output still holds the needle: by chunk index when
/// the pair records one, otherwise by the reference appearing verbatim.
pub fn needle_retained(result: &CompressionResult, qa: &QaPair) -> bool {
    match qa.needle_chunk_index {
        Some(i) => result.retained_indices.binary_search(&i).is_ok(),
        None => result.compressed_text.contains(&qa.reference),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub chunking: ChunkingStrategy,
    pub gen_steps: usize,
    pub gradcam_layer: GradcamLayer,
    /// Worker threads over samples; results are reduced in sample order.
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { chunking: ChunkingStrategy::default(), gen_steps: DEFAULT_GEN_STEPS, gradcam_layer: GradcamLayer::Last, jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub ratio: f64,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub rouge1_diff: f64,
    pub rouge2_diff: f64,
    pub rouge_l_diff: f64,
    pub needle_retention: f64,
    pub token_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub samples: usize,
    pub gen_steps: usize,
    pub rows: Vec<SweepRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    ratio: f64,
    rouge1: f64,
    rouge2: f64,
    #[serde(rename = "rougeL")]
    rouge_l: f64,
    rouge1_diff: f64,
    rouge2_diff: f64,
    #[serde(rename = "rougeL_diff")]
    rouge_l_diff: f64,
    needle_retention: f64,
    token_reduction: f64,
}

impl SweepReport {
    pub fn row(&self, method: &str, ratio: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.method == method && r.ratio == ratio)
    }

    pub fn origin(&self) -> &SweepRow {
        &self.rows[0]
    }

    /// `(ratio, needle_retention)` for one method in report order.
    pub fn retention_curve(&self, method: Method) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.method == method.name()).map(|r| (r.ratio, r.needle_retention)).collect()
    }

    /// ROUGE values are F1 scores.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow {
                method: &r.method,
                ratio: r.ratio,
                rouge1: r.rouge1.f1,
                rouge2: r.rouge2.f1,
                rouge_l: r.rouge_l.f1,
                rouge1_diff: r.rouge1_diff,
                rouge2_diff: r.rouge2_diff,
                rouge_l_diff: r.rouge_l_diff,
                needle_retention: r.needle_retention,
                token_reduction: r.token_reduction,
            })
            .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidInput(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Outcome {
    rouge: [RougeScore; 3],
    retained: bool,
    reduction: f64,
}

fn outcome(result: &CompressionResult, qa: &QaPair) -> Outcome {
    Outcome { rouge: answer_scores(&result.compressed_text, qa), retained: needle_retained(result, qa), reduction: result.token_reduction() }
}

fn all_retained(chunks: &[Chunk], document: &str) -> CompressionResult {
    let n = chunks.len();
    CompressionResult {
        retained_indices: (0..n).collect(),
        chunk_scores: vec![0.0; n],
        compressed_text: document.to_string(),
        original_tokens: tokenize(document).len(),
        retained_tokens: tokenize(document).len(),
    }
}

/// Origin outcome followed by one outcome per (method, ratio), method-major.
fn sample_outcomes(model: &Model, qa: &QaPair, methods: &[Method], ratios: &[f64], opts: &SweepOptions) -> Result<Vec<Outcome>> {
    let chunks = split_chunks(&qa.document, &opts.chunking);
    if chunks.is_empty() {
        return Err(Error::InvalidInput(format!("pair {} has an empty document", qa.id)));
    }
    let mut out = Vec::with_capacity(1 + methods.len() * ratios.len());
    out.push(outcome(&all_retained(&chunks, &qa.document), qa));
    let mut cache: Vec<(Method, Vec<f64>)> = Vec::new();
    for &method in methods {
        let req = CompressionRequest {
            instruction: qa.instruction.clone(),
            document: qa.document.clone(),
            ratio: 1.0,
            method,
            chunking: opts.chunking.clone(),
            gen_steps: opts.gen_steps,
            gradcam_layer: opts.gradcam_layer,
        };
        req.validate()?;
        let scores = match (method, cache.iter().find(|c| c.0 == Method::Ranking), cache.iter().find(|c| c.0 == Method::Generation)) {
            (Method::Ensemble, Some(r), Some(g)) if chunks.len() > 1 => fuse_average_rank(&r.1, &g.1)?,
            _ => score_chunks(model, &req, &chunks)?,
        };
        cache.push((method, scores.clone()));
        for &ratio in ratios {
            let result = select_with_boundary(&chunks, &scores, ratio, opts.chunking.boundary_chars())?;
            out.push(outcome(&result, qa));
        }
    }
    Ok(out)
}

/// Runs `f` over every item on up to `jobs` threads and returns results in
/// item order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let per = items.len().div_ceil(jobs);
    thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn mean_row(method: &str, ratio: f64, outcomes: &[&Outcome], origin: Option<&SweepRow>) -> SweepRow {
    let n = outcomes.len() as f64;
    let mut rouge = [RougeScore::default(); 3];
    let (mut retained, mut reduction) = (0.0, 0.0);
    for o in outcomes {
        for (acc, s) in rouge.iter_mut().zip(&o.rouge) {
            acc.precision += s.precision;
            acc.recall += s.recall;
            acc.f1 += s.f1;
        }
        retained += if o.retained { 1.0 } else { 0.0 };
        reduction += o.reduction;
    }
    for acc in &mut rouge {
        acc.precision /= n;
        acc.recall /= n;
        acc.f1 /= n;
    }
    let diff = |i: usize| origin.map_or(0.0, |o| rouge[i].f1 - [o.rouge1.f1, o.rouge2.f1, o.rouge_l.f1][i]);
    SweepRow {
        method: method.to_string(),
        ratio,
        rouge1: rouge[0],
        rouge2: rouge[1],
        rouge_l: rouge[2],
        rouge1_diff: diff(0),
        rouge2_diff: diff(1),
        rouge_l_diff: diff(2),
        needle_retention: retained / n,
        token_reduction: reduction / n,
    }
}

/// Compresses every pair with every method at every ratio. Chunk scores are
/// computed once per (pair, method) and reused across ratios; ensemble fuses
/// the ranking and generation scores when both were already computed. The first row
/// is the uncompressed origin.
pub fn run_sweep(model: &Model, pairs: &[QaPair], methods: &[Method], ratios: &[f64], opts: &SweepOptions) -> Result<SweepReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one pair".into()));
    }
    for &r in ratios {
        crate::compress::check_ratio(r)?;
    }
    let per_sample: Vec<Vec<Outcome>> = parallel_map(pairs, opts.jobs, |qa| sample_outcomes(model, qa, methods, ratios, opts))
        .into_iter()
        .collect::<Result<_>>()?;
    let column = |c: usize| per_sample.iter().map(|o| &o[c]).collect::<Vec<_>>();
    let origin = mean_row(ORIGIN, 1.0, &column(0), None);
    let mut rows = vec![origin.clone()];
    for (m, method) in methods.iter().enumerate() {
        for (r, &ratio) in ratios.iter().enumerate() {
            rows.push(mean_row(method.name(), ratio, &column(1 + m * ratios.len() + r), Some(&origin)));
        }
    }
    Ok(SweepReport { samples: pairs.len(), gen_steps: opts.gen_steps, rows })
}

/// Needle retention of generation compression at `ratio` for each step
/// budget in `steps`. One trace of `max(steps)` tokens is taken per pair;
/// greedy decoding makes shorter budgets a prefix of it.
pub fn generation_step_curve(
    model: &Model,
    pairs: &[QaPair],
    ratio: f64,
    steps: &[usize],
    opts: &SweepOptions,
) -> Result<Vec<(usize, f64)>> {
    if pairs.is_empty() || steps.is_empty() {
        return Err(Error::InvalidInput("step curve needs pairs and step budgets".into()));
    }
    if steps.contains(&0) {
        return Err(Error::InvalidInput("step budgets must be at least 1".into()));
    }
    let layer = opts.gradcam_layer.resolve(model.config().dec_layers)?;
    let max = *steps.iter().max().expect("non-empty");
    let hits: Vec<Vec<bool>> = parallel_map(pairs, opts.jobs, |qa| -> Result<Vec<bool>> {
        let chunks = split_chunks(&qa.document, &opts.chunking);
        let enc = model.encode(&tokenize(&qa.document))?;
        let (_, trace) = model.forward_with_trace(&tokenize(&qa.instruction), &enc, max)?;
        steps
            .iter()
            .map(|&k| {
                let tokens = gradcam_from_trace(&trace[..k.min(trace.len())], layer)?;
                let scores: Vec<f64> = chunks
                    .iter()
                    .map(|c| {
                        let span = &tokens[c.token_span.0..c.token_span.1];
                        span.iter().sum::<f64>() / span.len().max(1) as f64
                    })
                    .collect();
                let result = select_with_boundary(&chunks, &scores, ratio, opts.chunking.boundary_chars())?;
                Ok(needle_retained(&result, qa))
            })
            .collect()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, hits.iter().filter(|h| h[i]).count() as f64 / pairs.len() as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub samples: usize,
    pub mean_token_reduction: f64,
    pub estimated_relative_prompt_cost: f64,
    pub note: String,
}

/// Prompt-cost estimate from token counts alone. Compressor runtime and any
/// hardware effects are not modeled.
pub fn cost_report(results: &[CompressionResult]) -> Result<CostReport> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no compression results".into()));
    }
    let n = results.len() as f64;
    let reduction = results.iter().map(CompressionResult::token_reduction).sum::<f64>() / n;
    Ok(CostReport {
        samples: results.len(),
        mean_token_reduction: reduction,
        estimated_relative_prompt_cost: 1.0 - reduction,
        note: "estimate: retained/original prompt tokens; excludes compressor runtime, wall-clock and memory".into(),
    })
}
