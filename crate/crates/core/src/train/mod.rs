//! Joint ranking + language-model training.

mod losses;
pub mod synthetic;

pub use losses::{lm_loss_smoothed, pad_mask, ranking_loss};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamStore};
use crate::data::{CandidateSet, QaPair};
use crate::error::{Error, Result};
use crate::model::{with_bos, CrossKv, DecoderMode, Model};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Training items per optimizer step.
    pub batch: usize,
    pub smoothing: f64,
    /// `(w_rank, w_lm)`
    pub loss_weights: (f64, f64),
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 1,
            batch: 20,
            smoothing: 0.1,
            loss_weights: (1.0, 1.0),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        losses::check_smoothing(self.smoothing).map_err(|_| {
            Error::Config(format!("smoothing must be in [0, 1), got {}", self.smoothing))
        })?;
        let (wr, wl) = self.loss_weights;
        if !(wr >= 0.0 && wl >= 0.0 && wr.is_finite() && wl.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// One unit of training: an optional ranking task (positive first) and an
/// optional generation target over a document.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub instruction: String,
    pub candidates: Vec<String>,
    pub lm: Option<LmTarget>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmTarget {
    pub document: String,
    pub reference: String,
}

/// A [`TrainItem`] as token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenItem {
    pub instruction: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    /// `(document, reference)`.
    pub lm: Option<(Vec<usize>, Vec<usize>)>,
}

impl TokenItem {
    pub fn from_item(item: &TrainItem) -> Self {
        Self {
            instruction: tokenize(&item.instruction),
            candidates: item.candidates.iter().map(|c| tokenize(c)).collect(),
            lm: item.lm.as_ref().map(|l| (tokenize(&l.document), tokenize(&l.reference))),
        }
    }
}

/// Pairs candidate sets with QA pairs by id. A QA pair without a candidate
/// set becomes a generation-only item and vice versa. Order follows the
/// candidate sets, then the unmatched QA pairs.
pub fn build_items(sets: &[CandidateSet], pairs: &[QaPair]) -> Vec<TrainItem> {
    let by_id: HashMap<&str, &QaPair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut used = std::collections::HashSet::new();
    let mut items = Vec::with_capacity(sets.len().max(pairs.len()));
    for set in sets {
        let lm = by_id.get(set.id.as_str()).map(|p| {
            used.insert(p.id.as_str());
            LmTarget { document: p.document.clone(), reference: p.reference.clone() }
        });
        items.push(TrainItem { instruction: set.instruction.clone(), candidates: set.candidates.clone(), lm });
    }
    for p in pairs {
        if !used.contains(p.id.as_str()) {
            items.push(TrainItem {
                instruction: p.instruction.clone(),
                candidates: Vec::new(),
                lm: Some(LmTarget { document: p.document.clone(), reference: p.reference.clone() }),
            });
        }
    }
    items
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean ranking loss per step (NaN-free; steps without ranking items are skipped).
    pub rank_loss: Vec<f64>,
    pub lm_loss: Vec<f64>,
    /// `(step, held-out ranking accuracy)` at each evaluation.
    pub val_accuracy: Vec<(usize, f64)>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best_accuracy(&self) -> Option<f64> {
        self.val_accuracy.iter().map(|&(_, a)| a).reduce(f64::max)
    }
}

/// Progress events passed to [`TrainOptions::progress`].
#[derive(Clone, Debug)]
pub enum Progress {
    Step { step: usize, rank_loss: Option<f64>, lm_loss: Option<f64> },
    Eval { step: usize, accuracy: f64 },
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<&'a [TrainItem]>,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Stop once held-out accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub max_steps: Option<usize>,
    pub progress: Option<&'a mut dyn FnMut(&Progress)>,
}

struct StepLosses {
    rank: Option<f64>,
    lm: Option<f64>,
}

/// Optimizes `w_rank * L_rank + w_lm * L_lm` with Adam. Items are taken in
/// batches of `cfg.batch` consecutive items; the batch order is reshuffled each
/// epoch from `cfg.seed`. Every distinct document in a batch is encoded once
/// and serves both the ranking and generation passes that use it.
pub fn train_joint(model: &mut Model, items: &[TrainItem], cfg: &TrainConfig, mut opts: TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    for (i, item) in items.iter().enumerate() {
        validate_item(item).map_err(|e| Error::InvalidInput(format!("training item {i}: {e}")))?;
    }
    let mut report = TrainReport::default();
    let mut adam = Adam::new(model.params(), cfg.lr, cfg.beta1, cfg.beta2);
    let batches: Vec<&[TrainItem]> = items.chunks(cfg.batch).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    'outer: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        for bi in order {
            if opts.max_steps.is_some_and(|m| report.steps >= m) {
                break 'outer;
            }
            let mut grads = model.params().zeros_like();
            let tokens: Vec<TokenItem> = batches[bi].iter().map(TokenItem::from_item).collect();
            let losses = batch_gradients(model, &tokens, cfg, Some(&mut grads))?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at step {}", report.steps + 1)));
            }
            adam.step(model.params_mut(), &grads);
            report.steps += 1;
            if let Some(l) = losses.rank {
                report.rank_loss.push(l);
            }
            if let Some(l) = losses.lm {
                report.lm_loss.push(l);
            }
            if let Some(p) = opts.progress.as_mut() {
                p(&Progress::Step { step: report.steps, rank_loss: losses.rank, lm_loss: losses.lm });
            }
            if let Some(val) = opts.validation {
                if opts.eval_every > 0 && report.steps % opts.eval_every == 0 {
                    let acc = ranking_accuracy(model, val)?;
                    report.val_accuracy.push((report.steps, acc));
                    if let Some(p) = opts.progress.as_mut() {
                        p(&Progress::Eval { step: report.steps, accuracy: acc });
                    }
                    if opts.target_accuracy.is_some_and(|t| acc >= t) {
                        report.stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(report)
}

fn validate_item(item: &TrainItem) -> Result<()> {
    if item.instruction.is_empty() {
        return Err(Error::InvalidInput("empty instruction".into()));
    }
    if item.candidates.len() == 1 {
        return Err(Error::InvalidInput("a candidate set needs at least 2 documents".into()));
    }
    if item.candidates.is_empty() && item.lm.is_none() {
        return Err(Error::InvalidInput("item has neither candidates nor a reference".into()));
    }
    Ok(())
}

/// Fraction of items whose positive (index 0) scores strictly above every
/// other candidate. Documents shared between items are encoded once.
pub fn ranking_accuracy(model: &Model, items: &[TrainItem]) -> Result<f64> {
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    let mut hits = 0;
    let mut total = 0;
    for item in items.iter().filter(|i| i.candidates.len() >= 2) {
        let mut states = Vec::with_capacity(item.candidates.len());
        for doc in &item.candidates {
            if !cache.contains_key(doc.as_str()) {
                cache.insert(doc, model.encode(&tokenize(doc))?);
            }
            states.push(cache[doc.as_str()].clone());
        }
        let scores = model.rank_scores(&tokenize(&item.instruction), &states)?;
        if scores[1..].iter().all(|&s| scores[0] > s) {
            hits += 1;
        }
        total += 1;
        if cache.len() > 4096 {
            cache.clear();
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("no candidate sets to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Teacher-forced generation input and targets: the decoder reads
/// `BOS instruction reference` and must predict `reference EOS` from the last
/// instruction position on.
pub(crate) fn lm_sequence(instruction: &[usize], reference: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut input = with_bos(instruction);
    input.extend_from_slice(reference);
    let mut targets = vec![None; instruction.len()];
    targets.extend(reference.iter().map(|&t| Some(t)));
    targets.push(Some(EOS));
    (input, targets)
}

/// Adds the gradient of one batch's weighted loss into `grads` unless
/// `grads` is `None`, in which case only the losses are computed.
fn batch_gradients(model: &Model, batch: &[TokenItem], cfg: &TrainConfig, mut grads: Option<&mut [Tensor]>) -> Result<StepLosses> {
    let (w_rank, w_lm) = cfg.loss_weights;
    let vocab = model.config().vocab;
    let mut doc_index: HashMap<&[usize], usize> = HashMap::new();
    let mut docs: Vec<&[usize]> = Vec::new();
    for item in batch {
        if let Some(&bad) = item.instruction.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidInput(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let lm_doc = item.lm.as_ref().map(|l| l.0.as_slice());
        for d in item.candidates.iter().map(Vec::as_slice).chain(lm_doc) {
            doc_index.entry(d).or_insert_with(|| {
                docs.push(d);
                docs.len() - 1
            });
        }
    }

    // Encoder pass over every distinct document.
    let mut enc_graph = if grads.is_some() { Graph::with_params(model.params()) } else { Graph::frozen(model.params()) };
    let mut doc_kv: Vec<Vec<CrossKv>> = Vec::with_capacity(docs.len());
    for ids in &docs {
        if ids.is_empty() || ids.len() > model.config().max_seq {
            return Err(Error::InvalidInput(format!(
                "document of {} tokens does not fit max_seq {}",
                ids.len(),
                model.config().max_seq
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidInput(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let enc = model.encode_graph(&mut enc_graph, ids);
        doc_kv.push(model.cross_kv(&mut enc_graph, enc));
    }
    enc_graph.check_finite()?;

    let n_rank = batch.iter().filter(|i| i.candidates.len() >= 2).count();
    let n_lm = batch.iter().filter(|i| i.lm.is_some()).count();
    let mut kv_grads: Vec<Option<Vec<CrossKvGrad>>> = vec![None; docs.len()];
    let (mut rank_sum, mut lm_sum) = (0.0, 0.0);

    for item in batch {
        let mut g = if grads.is_some() { Graph::with_params(model.params()) } else { Graph::frozen(model.params()) };
        let mut leaves: HashMap<usize, Vec<CrossKv>> = HashMap::new();
        let mut leaf = |g: &mut Graph, di: usize| -> Vec<CrossKv> {
            leaves
                .entry(di)
                .or_insert_with(|| {
                    doc_kv[di]
                        .iter()
                        .map(|kv| CrossKv {
                            k: kv.k.iter().map(|&n| g.input_with_grad(enc_graph.value(n).clone())).collect(),
                            v: kv.v.iter().map(|&n| g.input_with_grad(enc_graph.value(n).clone())).collect(),
                        })
                        .collect()
                })
                .clone()
        };
        let instruction = &item.instruction;
        let mut terms: Vec<NodeId> = Vec::new();
        let mut rank_node = None;
        let mut lm_node = None;
        if item.candidates.len() >= 2 {
            let input = with_bos(instruction);
            let head = model.decoder_head(&mut g, &input, DecoderMode::Ranking);
            let mut scores = Vec::with_capacity(item.candidates.len());
            for d in &item.candidates {
                let kv = leaf(&mut g, doc_index[d.as_slice()]);
                let (out, _) = model.decoder_tail(&mut g, head, Some(&kv), DecoderMode::Ranking, false);
                scores.push(model.rank_head(&mut g, out));
            }
            let s = g.concat_cols(&scores);
            let loss = g.softmax_cross_entropy(s, &[Some(0)], 0.0);
            rank_node = Some(loss);
            terms.push(g.scale(loss, w_rank / n_rank as f64));
        }
        if let Some((document, reference)) = &item.lm {
            if let Some(&bad) = reference.iter().find(|&&t| t >= vocab) {
                return Err(Error::InvalidInput(format!("token {bad} outside vocabulary of {vocab}")));
            }
            let (input, targets) = lm_sequence(instruction, reference);
            if input.len() > model.config().max_seq {
                return Err(Error::InvalidInput("instruction plus reference exceed max_seq".into()));
            }
            let kv = leaf(&mut g, doc_index[document.as_slice()]);
            let (out, _) = model.decode(&mut g, &input, Some(&kv), DecoderMode::Generation, false);
            let logits = model.lm_head(&mut g, out);
            let loss = g.softmax_cross_entropy(logits, &targets, cfg.smoothing);
            lm_node = Some(loss);
            terms.push(g.scale(loss, w_lm / n_lm as f64));
        }
        if let Some(n) = rank_node {
            rank_sum += g.value(n).data()[0];
        }
        if let Some(n) = lm_node {
            lm_sum += g.value(n).data()[0];
        }
        let total = match terms.as_slice() {
            [] => continue,
            [one] => *one,
            [a, b] => g.add(*a, *b),
            _ => unreachable!("at most two loss terms"),
        };
        if !g.value(total).is_finite() {
            return Err(Error::NonFinite("batch loss".into()));
        }
        let Some(grads) = grads.as_deref_mut() else {
            continue;
        };
        g.backward(total)?;
        g.accumulate_param_grads(grads);
        for (di, kvs) in &leaves {
            let slot = kv_grads[*di].get_or_insert_with(|| {
                kvs.iter()
                    .map(|kv| CrossKvGrad {
                        k: kv.k.iter().map(|&n| Tensor::zeros(g.value(n).shape())).collect(),
                        v: kv.v.iter().map(|&n| Tensor::zeros(g.value(n).shape())).collect(),
                    })
                    .collect()
            });
            for (acc, kv) in slot.iter_mut().zip(kvs) {
                for (a, &n) in acc.k.iter_mut().zip(&kv.k) {
                    if let Some(gr) = g.grad(n) {
                        a.add_assign(gr);
                    }
                }
                for (a, &n) in acc.v.iter_mut().zip(&kv.v) {
                    if let Some(gr) = g.grad(n) {
                        a.add_assign(gr);
                    }
                }
            }
        }
    }

    let mut seeds = Vec::new();
    for (di, slot) in kv_grads.into_iter().enumerate() {
        let Some(layers) = slot else { continue };
        for (kv, gr) in doc_kv[di].iter().zip(layers) {
            seeds.extend(kv.k.iter().copied().zip(gr.k));
            seeds.extend(kv.v.iter().copied().zip(gr.v));
        }
    }
    if let (false, Some(grads)) = (seeds.is_empty(), grads) {
        enc_graph.backward_from(&seeds)?;
        enc_graph.accumulate_param_grads(grads);
    }
    Ok(StepLosses {
        rank: (n_rank > 0).then(|| rank_sum / n_rank as f64),
        lm: (n_lm > 0).then(|| lm_sum / n_lm as f64),
    })
}

#[derive(Clone, Debug)]
struct CrossKvGrad {
    k: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Total weighted loss of one batch, for gradient checks against finite
/// differences.
pub fn batch_loss(model: &Model, batch: &[TokenItem], cfg: &TrainConfig) -> Result<f64> {
    let l = batch_gradients(model, batch, cfg, None)?;
    let (w_rank, w_lm) = cfg.loss_weights;
    Ok(w_rank * l.rank.unwrap_or(0.0) + w_lm * l.lm.unwrap_or(0.0))
}

/// Gradient of [`batch_loss`] with respect to every parameter.
pub fn batch_gradient(model: &Model, batch: &[TokenItem], cfg: &TrainConfig) -> Result<Vec<Tensor>> {
    let mut grads = model.params().zeros_like();
    batch_gradients(model, batch, cfg, Some(&mut grads))?;
    Ok(grads)
}
