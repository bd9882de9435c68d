//! Encoder-decoder scorer with a ranking head and a language-model head.
//!
//! The decoder is shared by both modes. Ranking mode runs it without a mask
//! and mean-pools its output into the ranking head; generation mode runs it
//! with a causal mask into the LM head. Blocks are pre-norm with GELU FFNs and
//! fixed sinusoidal positions; token embeddings are shared by both stacks and
//! scaled by `sqrt(d_model)`.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore, TapPerturbation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    Ranking,
    Generation,
}

impl DecoderMode {
    fn causal(self) -> bool {
        self == DecoderMode::Generation
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    embed: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
    rank_w: ParamId,
    rank_b: ParamId,
    lm_w: ParamId,
    lm_b: ParamId,
}

/// Per-head cross-attention keys and values for one decoder layer.
#[derive(Clone, Debug)]
pub struct CrossKv {
    pub k: Vec<NodeId>,
    pub v: Vec<NodeId>,
}

/// Cross-attention map and its gradient for one decoder layer, both shaped
/// `[heads, dec_len, enc_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub map: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub token: usize,
    pub layers: Vec<LayerTrace>,
}

/// A target logit with its gradients. `maps` follows the tap order of
/// [`Model::target_logit`].
#[derive(Clone, Debug)]
pub struct TargetGradients {
    pub value: f64,
    pub params: Vec<Tensor>,
    pub maps: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
    positions: Tensor,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::matrix(fan_in, fan_out, data))
    }

    fn constant(&mut self, name: String, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::filled(&[1, cols], value))
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds { g: self.constant(format!("{prefix}.g"), d, 1.0), b: self.constant(format!("{prefix}.b"), d, 0.0) }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let lin = |b: &mut Self, n: &str| {
            (b.xavier(format!("{prefix}.w{n}"), d, d), b.constant(format!("{prefix}.b{n}"), d, 0.0))
        };
        let (wq, bq) = lin(self, "q");
        let (wk, bk) = lin(self, "k");
        let (wv, bv) = lin(self, "v");
        let (wo, bo) = lin(self, "o");
        AttnIds { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIds {
        FfnIds {
            w1: self.xavier(format!("{prefix}.w1"), d, f),
            b1: self.constant(format!("{prefix}.b1"), f, 0.0),
            w2: self.xavier(format!("{prefix}.w2"), f, d),
            b2: self.constant(format!("{prefix}.b2"), d, 0.0),
        }
    }
}

fn sinusoidal(max_seq: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_seq * d];
    for pos in 0..max_seq {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(max_seq, d, data)
}

impl Model {
    /// Xavier-uniform weights drawn from `config.seed`, unit LayerNorm gains,
    /// zero biases. Cross-attention key projections start as copies of the
    /// query projections so that matching tokens attend to each other from
    /// the first step.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn_dim);
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let embed = b.xavier("embed".into(), config.vocab, d);
        let enc = (0..config.enc_layers)
            .map(|l| EncLayer {
                ln1: b.ln(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.ln(&format!("enc.{l}.ln2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, f),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec: Vec<DecLayer> = (0..config.dec_layers)
            .map(|l| DecLayer {
                ln1: b.ln(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln2: b.ln(&format!("dec.{l}.ln2"), d),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln3: b.ln(&format!("dec.{l}.ln3"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, f),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let rank_w = b.xavier("rank.w".into(), d, 1);
        let rank_b = b.constant("rank.b".into(), 1, 0.0);
        let lm_w = b.xavier("lm.w".into(), d, config.vocab);
        let lm_b = b.constant("lm.b".into(), config.vocab, 0.0);
        for layer in &dec {
            let q = store.get(layer.cross.wq).clone();
            *store.get_mut(layer.cross.wk) = q;
        }
        let ids = ModelIds { embed, enc, enc_ln, dec, dec_ln, rank_w, rank_b, lm_w, lm_b };
        let positions = sinusoidal(config.max_seq, d);
        Ok(Self { config, params: store, ids, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_tokens(&self, ids: &[usize], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidInput(format!("{what} is empty")));
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::InvalidInput(format!(
                "{what} has {} tokens, more than max_seq {}",
                ids.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::InvalidInput(format!("{what} contains token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    fn check_states(&self, enc: &Tensor) -> Result<()> {
        if enc.shape().len() != 2 || enc.cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "encoder states must be [len, {}], got {:?}",
                self.config.d_model,
                enc.shape()
            )));
        }
        Ok(())
    }

    // ---- graph building blocks ----

    pub(crate) fn embed(&self, g: &mut Graph, ids: &[usize]) -> NodeId {
        let table = g.param(self.ids.embed);
        let e = g.embedding(table, ids);
        let scaled = g.scale(e, (self.config.d_model as f64).sqrt());
        let n = ids.len();
        let d = self.config.d_model;
        let pe = g.input(Tensor::matrix(n, d, self.positions.data()[..n * d].to_vec()));
        g.add(scaled, pe)
    }

    fn layer_norm(&self, g: &mut Graph, x: NodeId, ln: &LnIds) -> NodeId {
        let (gamma, beta) = (g.param(ln.g), g.param(ln.b));
        g.layer_norm(x, gamma, beta)
    }

    fn linear(g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }

    fn split_heads(&self, g: &mut Graph, x: NodeId) -> Vec<NodeId> {
        let dh = self.config.head_dim();
        (0..self.config.heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
    }

    fn project_kv(&self, g: &mut Graph, src: NodeId, a: &AttnIds) -> CrossKv {
        let k = Self::linear(g, src, a.wk, a.bk);
        let v = Self::linear(g, src, a.wv, a.bv);
        CrossKv { k: self.split_heads(g, k), v: self.split_heads(g, v) }
    }

    /// Multi-head attention of `x` over precomputed keys/values. Returns the
    /// output projection and the per-head attention maps.
    fn attend(&self, g: &mut Graph, x: NodeId, kv: &CrossKv, a: &AttnIds, causal: bool, tap: bool) -> (NodeId, Vec<NodeId>) {
        let q = Self::linear(g, x, a.wq, a.bq);
        let qs = self.split_heads(g, q);
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut outs = Vec::with_capacity(qs.len());
        let mut maps = Vec::with_capacity(qs.len());
        for (h, &qh) in qs.iter().enumerate() {
            let s = g.matmul_t(qh, kv.k[h], scale);
            let map = g.softmax_rows(s, causal);
            if tap {
                g.tap(map);
            }
            outs.push(g.matmul(map, kv.v[h]));
            maps.push(map);
        }
        let cat = g.concat_cols(&outs);
        (Self::linear(g, cat, a.wo, a.bo), maps)
    }

    fn ffn(&self, g: &mut Graph, x: NodeId, f: &FfnIds) -> NodeId {
        let h = Self::linear(g, x, f.w1, f.b1);
        let h = g.gelu(h);
        Self::linear(g, h, f.w2, f.b2)
    }

    /// Encoder stack over `ids`, ending in the final LayerNorm.
    pub(crate) fn encode_graph(&self, g: &mut Graph, ids: &[usize]) -> NodeId {
        let mut x = self.embed(g, ids);
        for layer in &self.ids.enc {
            let h = self.layer_norm(g, x, &layer.ln1);
            let kv = self.project_kv(g, h, &layer.attn);
            let (a, _) = self.attend(g, h, &kv, &layer.attn, false, false);
            x = g.add(x, a);
            let h = self.layer_norm(g, x, &layer.ln2);
            let f = self.ffn(g, h, &layer.ffn);
            x = g.add(x, f);
        }
        self.layer_norm(g, x, &self.ids.enc_ln)
    }

    /// Cross-attention keys and values of every decoder layer.
    pub(crate) fn cross_kv(&self, g: &mut Graph, enc: NodeId) -> Vec<CrossKv> {
        self.ids.dec.iter().map(|layer| self.project_kv(g, enc, &layer.cross)).collect()
    }

    /// Embedding plus the first self-attention sublayer. This part depends on
    /// the decoder input only, so ranking one instruction against many
    /// documents can share it.
    pub(crate) fn decoder_head(&self, g: &mut Graph, ids: &[usize], mode: DecoderMode) -> NodeId {
        let x = self.embed(g, ids);
        self.dec_self_sublayer(g, x, 0, mode)
    }

    fn dec_self_sublayer(&self, g: &mut Graph, x: NodeId, layer: usize, mode: DecoderMode) -> NodeId {
        let l = &self.ids.dec[layer];
        let h = self.layer_norm(g, x, &l.ln1);
        let kv = self.project_kv(g, h, &l.self_attn);
        let (a, _) = self.attend(g, h, &kv, &l.self_attn, mode.causal(), false);
        g.add(x, a)
    }

    /// The rest of the decoder after [`Model::decoder_head`], ending in the
    /// final LayerNorm. Without `kv` the cross-attention sublayers are skipped.
    /// Returns the output and, per layer, the cross-attention maps per head.
    pub(crate) fn decoder_tail(
        &self,
        g: &mut Graph,
        mut x: NodeId,
        kv: Option<&[CrossKv]>,
        mode: DecoderMode,
        tap: bool,
    ) -> (NodeId, Vec<Vec<NodeId>>) {
        let mut maps = Vec::new();
        for (i, l) in self.ids.dec.iter().enumerate() {
            if i > 0 {
                x = self.dec_self_sublayer(g, x, i, mode);
            }
            if let Some(kv) = kv {
                let h = self.layer_norm(g, x, &l.ln2);
                let (a, m) = self.attend(g, h, &kv[i], &l.cross, false, tap);
                x = g.add(x, a);
                maps.push(m);
            }
            let h = self.layer_norm(g, x, &l.ln3);
            let f = self.ffn(g, h, &l.ffn);
            x = g.add(x, f);
        }
        (self.layer_norm(g, x, &self.ids.dec_ln), maps)
    }

    pub(crate) fn decode(
        &self,
        g: &mut Graph,
        ids: &[usize],
        kv: Option<&[CrossKv]>,
        mode: DecoderMode,
        tap: bool,
    ) -> (NodeId, Vec<Vec<NodeId>>) {
        let x = self.decoder_head(g, ids, mode);
        self.decoder_tail(g, x, kv, mode, tap)
    }

    /// Mean-pool then linear to a `[1, 1]` score.
    pub(crate) fn rank_head(&self, g: &mut Graph, dec_out: NodeId) -> NodeId {
        let pooled = g.mean_rows(dec_out);
        Self::linear(g, pooled, self.ids.rank_w, self.ids.rank_b)
    }

    pub(crate) fn lm_head(&self, g: &mut Graph, dec_out: NodeId) -> NodeId {
        Self::linear(g, dec_out, self.ids.lm_w, self.ids.lm_b)
    }

    // ---- inference ----

    /// Encoder states, `[len, d_model]`.
    pub fn encode(&self, doc: &[usize]) -> Result<Tensor> {
        self.check_tokens(doc, "document")?;
        let mut g = Graph::frozen(&self.params);
        let out = self.encode_graph(&mut g, doc);
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    fn states_kv(&self, g: &mut Graph, enc: &Tensor) -> Result<Vec<CrossKv>> {
        self.check_states(enc)?;
        let e = g.input(enc.clone());
        Ok(self.cross_kv(g, e))
    }

    /// Instruction-document matching score. The decoder input is BOS followed
    /// by the instruction.
    pub fn rank_score(&self, instruction: &[usize], enc: &Tensor) -> Result<f64> {
        if instruction.is_empty() {
            return Err(Error::InvalidInput("instruction is empty".into()));
        }
        let input = with_bos(instruction);
        self.check_tokens(&input, "instruction")?;
        let mut g = Graph::frozen(&self.params);
        let kv = self.states_kv(&mut g, enc)?;
        let (out, _) = self.decode(&mut g, &input, Some(&kv), DecoderMode::Ranking, false);
        let s = self.rank_head(&mut g, out);
        g.check_finite()?;
        Ok(g.value(s).data()[0])
    }

    /// [`Model::rank_score`] against several documents, sharing the
    /// document-independent part of the decoder.
    pub fn rank_scores(&self, instruction: &[usize], states: &[Tensor]) -> Result<Vec<f64>> {
        if instruction.is_empty() {
            return Err(Error::InvalidInput("instruction is empty".into()));
        }
        let input = with_bos(instruction);
        self.check_tokens(&input, "instruction")?;
        let mut g = Graph::frozen(&self.params);
        let head = self.decoder_head(&mut g, &input, DecoderMode::Ranking);
        let mut scores = Vec::with_capacity(states.len());
        for enc in states {
            let kv = self.states_kv(&mut g, enc)?;
            let (out, _) = self.decoder_tail(&mut g, head, Some(&kv), DecoderMode::Ranking, false);
            let s = self.rank_head(&mut g, out);
            scores.push(s);
        }
        g.check_finite()?;
        Ok(scores.into_iter().map(|s| g.value(s).data()[0]).collect())
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::InvalidInput("generation prefix must start with BOS".into()));
        }
        self.check_tokens(prefix, "prefix")
    }

    /// Generation-mode logits for every prefix position, `[len, vocab]`.
    pub fn next_token_logits(&self, prefix: &[usize], enc: &Tensor) -> Result<Tensor> {
        self.check_prefix(prefix)?;
        let mut g = Graph::frozen(&self.params);
        let kv = self.states_kv(&mut g, enc)?;
        let (out, _) = self.decode(&mut g, prefix, Some(&kv), DecoderMode::Generation, false);
        let logits = self.lm_head(&mut g, out);
        g.check_finite()?;
        Ok(g.value(logits).clone())
    }

    /// Generation-mode logits with no encoder context at all: the
    /// cross-attention sublayers are skipped.
    pub fn unconditioned_logits(&self, prefix: &[usize]) -> Result<Tensor> {
        self.check_prefix(prefix)?;
        let mut g = Graph::frozen(&self.params);
        let (out, _) = self.decode(&mut g, prefix, None, DecoderMode::Generation, false);
        let logits = self.lm_head(&mut g, out);
        g.check_finite()?;
        Ok(g.value(logits).clone())
    }

    /// Greedy decoding from BOS + instruction. Stops after `k` tokens or at
    /// EOS (which is included in the output).
    pub fn generate_greedy(&self, instruction: &[usize], enc: &Tensor, k: usize) -> Result<Vec<usize>> {
        if k < 1 {
            return Err(Error::InvalidInput("generation steps must be at least 1".into()));
        }
        let mut prefix = with_bos(instruction);
        let mut out = Vec::new();
        for _ in 0..k {
            let logits = self.next_token_logits(&prefix, enc)?;
            let t = argmax(logits.row(logits.rows() - 1));
            out.push(t);
            if t == EOS {
                break;
            }
            prefix.push(t);
        }
        Ok(out)
    }

    fn step_graph<'a>(
        &'a self,
        prefix: &[usize],
        enc: &Tensor,
        perturbation: Option<TapPerturbation>,
    ) -> Result<(Graph<'a>, NodeId, Vec<Vec<NodeId>>)> {
        let mut g = Graph::frozen(&self.params);
        g.set_perturbation(perturbation);
        let kv = self.states_kv(&mut g, enc)?;
        let (out, maps) = self.decode(&mut g, prefix, Some(&kv), DecoderMode::Generation, true);
        let last = g.slice_rows(out, prefix.len() - 1, 1);
        let logits = self.lm_head(&mut g, last);
        g.check_finite()?;
        Ok((g, logits, maps))
    }

    /// Pre-softmax logit of `token` at the last prefix position. The optional
    /// perturbation is added to one cross-attention entry; taps are numbered
    /// layer-major, then by head, and elements index a `[dec_len, enc_len]`
    /// map row-major.
    pub fn target_logit(
        &self,
        prefix: &[usize],
        enc: &Tensor,
        token: usize,
        perturbation: Option<TapPerturbation>,
    ) -> Result<f64> {
        self.check_prefix(prefix)?;
        let (g, logits, _) = self.step_graph(prefix, enc, perturbation)?;
        Ok(g.value(logits).data()[token])
    }

    /// Like [`Model::target_logit`] but encodes `document` inside the same
    /// graph, so the value depends on every parameter.
    pub fn document_target_logit(
        &self,
        document: &[usize],
        prefix: &[usize],
        token: usize,
        perturbation: Option<TapPerturbation>,
    ) -> Result<f64> {
        Ok(self.document_target_graph(document, prefix, token, perturbation, false)?.value)
    }

    /// Gradient of [`Model::document_target_logit`] with respect to every
    /// parameter and every tapped cross-attention map.
    pub fn document_target_gradients(&self, document: &[usize], prefix: &[usize], token: usize) -> Result<TargetGradients> {
        self.document_target_graph(document, prefix, token, None, true)
    }

    fn document_target_graph(
        &self,
        document: &[usize],
        prefix: &[usize],
        token: usize,
        perturbation: Option<TapPerturbation>,
        backward: bool,
    ) -> Result<TargetGradients> {
        self.check_prefix(prefix)?;
        self.check_tokens(document, "document")?;
        if token >= self.config.vocab {
            return Err(Error::InvalidInput(format!("token {token} outside vocabulary of {}", self.config.vocab)));
        }
        let mut g = if backward { Graph::with_params(&self.params) } else { Graph::frozen(&self.params) };
        g.set_perturbation(perturbation);
        let enc = self.encode_graph(&mut g, document);
        let kv = self.cross_kv(&mut g, enc);
        let (out, maps) = self.decode(&mut g, prefix, Some(&kv), DecoderMode::Generation, true);
        let last = g.slice_rows(out, prefix.len() - 1, 1);
        let logits = self.lm_head(&mut g, last);
        let target = g.pick(logits, token);
        g.check_finite()?;
        let value = g.value(target).data()[0];
        let mut params = self.params.zeros_like();
        let mut taps = Vec::new();
        if backward {
            g.backward(target)?;
            g.accumulate_param_grads(&mut params);
            for &n in maps.iter().flatten() {
                taps.push(g.grad(n).cloned().unwrap_or_else(|| Tensor::zeros(g.value(n).shape())));
            }
        }
        Ok(TargetGradients { value, params, maps: taps })
    }

    /// Greedy generation that records, for each step, every decoder layer's
    /// cross-attention maps and the gradient of the chosen token's logit with
    /// respect to them.
    pub fn forward_with_trace(&self, instruction: &[usize], enc: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<StepTrace>)> {
        if k < 1 {
            return Err(Error::InvalidInput("generation steps must be at least 1".into()));
        }
        if instruction.is_empty() {
            return Err(Error::InvalidInput("instruction is empty".into()));
        }
        let mut prefix = with_bos(instruction);
        self.check_prefix(&prefix)?;
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        for _ in 0..k {
            if prefix.len() > self.config.max_seq {
                break;
            }
            let (mut g, logits, maps) = self.step_graph(&prefix, enc, None)?;
            let t = argmax(g.value(logits).data());
            let target = g.pick(logits, t);
            g.backward(target)?;
            let layers = maps.iter().map(|heads| collect_trace(&g, heads)).collect();
            steps.push(StepTrace { token: t, layers });
            tokens.push(t);
            if t == EOS {
                break;
            }
            prefix.push(t);
        }
        Ok((tokens, steps))
    }
}

fn collect_trace(g: &Graph, heads: &[NodeId]) -> LayerTrace {
    let first = g.value(heads[0]);
    let (rows, cols) = (first.rows(), first.cols());
    let mut map = Vec::with_capacity(heads.len() * rows * cols);
    let mut grad = Vec::with_capacity(heads.len() * rows * cols);
    for &h in heads {
        map.extend_from_slice(g.value(h).data());
        match g.grad(h) {
            Some(d) => grad.extend_from_slice(d.data()),
            None => grad.extend(std::iter::repeat(0.0).take(rows * cols)),
        }
    }
    let shape = vec![heads.len(), rows, cols];
    LayerTrace {
        map: Tensor::new(shape.clone(), map).expect("trace shape"),
        grad: Tensor::new(shape, grad).expect("trace shape"),
    }
}

pub(crate) fn with_bos(ids: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.push(BOS);
    v.extend_from_slice(ids);
    v
}

/// Index of the largest value; ties go to the smaller index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
