//! Order-preserving chunk selection driven by four scorers: the ranking head,
//! Grad-CAM over generated answers, a rank-average of the two, and
//! instruction-agnostic self-information.

mod gradcam;

pub use gradcam::{gradcam_from_trace, gradcam_token_scores};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::log_sum_exp;
use crate::tokenizer::{join_chunks_with, split_chunks, tokenize, Chunk, ChunkingStrategy, BOS};

pub const DEFAULT_GEN_STEPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ranking,
    Generation,
    Ensemble,
    Selective,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ranking, Method::Generation, Method::Ensemble, Method::Selective];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ranking => "ranking",
            Method::Generation => "generation",
            Method::Ensemble => "ensemble",
            Method::Selective => "selective",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

/// Which decoder layer's cross-attention feeds Grad-CAM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcamLayer {
    #[default]
    Last,
    Index(usize),
}

impl GradcamLayer {
    pub fn resolve(self, layers: usize) -> Result<usize> {
        match self {
            GradcamLayer::Last => Ok(layers - 1),
            GradcamLayer::Index(i) if i < layers => Ok(i),
            GradcamLayer::Index(i) => {
                Err(Error::InvalidInput(format!("Grad-CAM layer {i} out of range for {layers} decoder layers")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionRequest {
    pub instruction: String,
    pub document: String,
    pub ratio: f64,
    pub method: Method,
    pub chunking: ChunkingStrategy,
    pub gen_steps: usize,
    pub gradcam_layer: GradcamLayer,
}

impl CompressionRequest {
    pub fn new(instruction: impl Into<String>, document: impl Into<String>, ratio: f64, method: Method) -> Self {
        Self {
            instruction: instruction.into(),
            document: document.into(),
            ratio,
            method,
            chunking: ChunkingStrategy::default(),
            gen_steps: DEFAULT_GEN_STEPS,
            gradcam_layer: GradcamLayer::Last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        self.chunking.validate()?;
        if self.gen_steps < 1 {
            return Err(Error::InvalidInput("gen_steps must be at least 1".into()));
        }
        if self.instruction.is_empty() && self.method != Method::Selective {
            return Err(Error::InvalidInput("instruction must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionResult {
    pub retained_indices: Vec<usize>,
    pub chunk_scores: Vec<f64>,
    pub compressed_text: String,
    pub original_tokens: usize,
    pub retained_tokens: usize,
}

impl CompressionResult {
    pub fn token_reduction(&self) -> f64 {
        if self.original_tokens == 0 {
            0.0
        } else {
            1.0 - self.retained_tokens as f64 / self.original_tokens as f64
        }
    }
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("ratio must be in (0,1], got {ratio}")))
    }
}

/// `clamp(ceil(ratio * n), 1, n)`. Products within 1e-9 of an integer count
/// as that integer, so `0.35 * 20` keeps 7 chunks, not 8.
pub fn retained_count(n: usize, ratio: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidInput("no chunks to retain".into()));
    }
    check_ratio(ratio)?;
    let x = ratio * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    Ok((k as usize).clamp(1, n))
}

/// Indices of the `count` best scores, ties to the smaller index, returned in
/// ascending order.
pub fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(count).collect();
    keep.sort_unstable();
    keep
}

pub fn select_and_reassemble(chunks: &[Chunk], scores: &[f64], ratio: f64) -> Result<CompressionResult> {
    select_with_boundary(chunks, scores, ratio, ChunkingStrategy::default().boundary_chars())
}

pub fn select_with_boundary(chunks: &[Chunk], scores: &[f64], ratio: f64, boundary: &[char]) -> Result<CompressionResult> {
    if scores.len() != chunks.len() {
        return Err(Error::InvalidInput(format!("{} scores for {} chunks", scores.len(), chunks.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("chunk scores".into()));
    }
    let count = retained_count(chunks.len(), ratio)?;
    let retained = top_indices(scores, count);
    let compressed_text = join_chunks_with(chunks, &retained, boundary)?;
    Ok(CompressionResult {
        retained_tokens: retained.iter().map(|&i| chunks[i].token_len()).sum(),
        original_tokens: chunks.last().map_or(0, |c| c.token_span.1),
        retained_indices: retained,
        chunk_scores: scores.to_vec(),
        compressed_text,
    })
}

/// 1-based ranks by descending score, ties to the smaller index.
pub fn ranks_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Rank-average fusion: `-(rank_a + rank_b) / 2`, higher is better.
pub fn fuse_average_rank(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("cannot fuse {} and {} scores", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores to fuse".into()));
    }
    let (ra, rb) = (ranks_descending(a), ranks_descending(b));
    Ok(ra.iter().zip(&rb).map(|(&x, &y)| -((x + y) as f64) / 2.0).collect())
}

/// Each chunk encoded on its own and scored against the instruction.
pub fn ranking_chunk_scores(model: &Model, instruction: &str, chunks: &[Chunk]) -> Result<Vec<f64>> {
    let states = chunks.iter().map(|c| model.encode(&tokenize(&c.text))).collect::<Result<Vec<_>>>()?;
    model.rank_scores(&tokenize(instruction), &states)
}

/// Grad-CAM token scores over the whole document, averaged per chunk span.
pub fn generation_chunk_scores(
    model: &Model,
    instruction: &str,
    document: &str,
    chunks: &[Chunk],
    steps: usize,
    layer: GradcamLayer,
) -> Result<Vec<f64>> {
    let tokens = gradcam_token_scores(model, instruction, document, steps, layer)?;
    Ok(span_means(&tokens, chunks))
}

/// Mean self-information `-log p(token | preceding document tokens)` per
/// chunk, from the decoder with no encoder context.
pub fn selective_chunk_scores(model: &Model, document: &str, chunks: &[Chunk]) -> Result<Vec<f64>> {
    let ids = tokenize(document);
    let mut prefix = Vec::with_capacity(ids.len());
    prefix.push(BOS);
    prefix.extend_from_slice(&ids[..ids.len().saturating_sub(1)]);
    let logits = model.unconditioned_logits(&prefix)?;
    let info: Vec<f64> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let row = logits.row(t);
            log_sum_exp(row) - row[id]
        })
        .collect();
    Ok(span_means(&info, chunks))
}

fn span_means(values: &[f64], chunks: &[Chunk]) -> Vec<f64> {
    chunks
        .iter()
        .map(|c| {
            let span = &values[c.token_span.0..c.token_span.1];
            span.iter().sum::<f64>() / span.len().max(1) as f64
        })
        .collect()
}

/// Chunk scores for one method, independent of the retention ratio.
pub fn score_chunks(model: &Model, req: &CompressionRequest, chunks: &[Chunk]) -> Result<Vec<f64>> {
    if chunks.is_empty() {
        return Err(Error::InvalidInput("document is empty".into()));
    }
    if chunks.len() == 1 {
        // A single chunk is always kept; skip the model entirely.
        return Ok(vec![0.0]);
    }
    let generation =
        || generation_chunk_scores(model, &req.instruction, &req.document, chunks, req.gen_steps, req.gradcam_layer);
    match req.method {
        Method::Ranking => ranking_chunk_scores(model, &req.instruction, chunks),
        Method::Generation => generation(),
        Method::Ensemble => fuse_average_rank(&ranking_chunk_scores(model, &req.instruction, chunks)?, &generation()?),
        Method::Selective => selective_chunk_scores(model, &req.document, chunks),
    }
}

pub fn compress(model: &Model, req: &CompressionRequest) -> Result<CompressionResult> {
    req.validate()?;
    if req.method != Method::Selective && req.method != Method::Ranking {
        req.gradcam_layer.resolve(model.config().dec_layers)?;
    }
    let chunks = split_chunks(&req.document, &req.chunking);
    let scores = score_chunks(model, req, &chunks)?;
    select_with_boundary(&chunks, &scores, req.ratio, req.chunking.boundary_chars())
}
