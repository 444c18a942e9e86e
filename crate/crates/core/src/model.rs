//! A toy decoder-only transformer that makes end-to-end decode throughput
//! measurable and lets the attention engines be compared on generated
//! tokens.
//!
//! The architecture is a stand-in for the Llama family: pre-norm residual
//! blocks with RMS normalization, rotary position embeddings on queries and
//! keys, grouped-query attention, and a SiLU-gated MLP whose gate and up
//! projections are fused into one matrix. All weights come from a seeded
//! generator; none of the constants pretend to be a trained checkpoint.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    causal_sdp_with_lse, combine_assign, sdp_with_lse, AttentionConfig, AttentionResult,
    KeyValueSegment, QueryBlock,
};
use crate::engine::{per_sequence_attention_flat, tree_attention, EngineKind};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::sharing::{
    build_tree, DecodeBatch, NodeId, SequenceId, SharingTree, SuffixCache, TreeSpec,
};

pub const RMS_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters. `model_dim` must equal
/// `num_query_heads * head_dim()`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub rope_enabled: bool,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let model_dim = 256;
        ModelConfig {
            num_layers: 2,
            model_dim,
            num_query_heads: 8,
            num_kv_heads: 1,
            mlp_hidden: 4 * model_dim,
            vocab_size: 512,
            rope_enabled: true,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_query_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::ModelConfig("num_layers must be at least 1".into()));
        }
        if self.num_query_heads == 0 || !self.model_dim.is_multiple_of(self.num_query_heads) {
            return Err(Error::ModelConfig(format!(
                "model_dim {} not divisible by {} query heads",
                self.model_dim, self.num_query_heads
            )));
        }
        if self.num_kv_heads == 0 || !self.num_query_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::ModelConfig(format!(
                "query heads {} not divisible by kv heads {}",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        if self.rope_enabled && !self.head_dim().is_multiple_of(2) {
            return Err(Error::ModelConfig(
                "rotary embedding needs an even head_dim".into(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::ModelConfig("vocab_size must be at least 2".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::ModelConfig("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn attention_config<T: Scalar>(&self) -> Result<AttentionConfig<T>> {
        AttentionConfig::new(self.head_dim(), self.num_query_heads, self.num_kv_heads)
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights<T: Scalar> {
    /// `[model_dim, num_query_heads * head_dim]`
    pub wq: Matrix<T>,
    /// `[model_dim, num_kv_heads * head_dim]`
    pub wk: Matrix<T>,
    /// `[model_dim, num_kv_heads * head_dim]`
    pub wv: Matrix<T>,
    /// `[num_query_heads * head_dim, model_dim]`
    pub wo: Matrix<T>,
    /// Fused gate and up projections: `[model_dim, 2 * mlp_hidden]`. The
    /// first half of each output row is the gate, the second half the up
    /// projection.
    pub w_gate_up: Matrix<T>,
    /// `[mlp_hidden, model_dim]`
    pub w_down: Matrix<T>,
    pub attn_norm_gain: Vec<T>,
    pub mlp_norm_gain: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights<T: Scalar> {
    pub config: ModelConfig,
    /// `[vocab_size, model_dim]`
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: Vec<T>,
    /// `[model_dim, vocab_size]`
    pub unembedding: Matrix<T>,
    /// Rotary inverse frequencies, one per head-dim pair.
    pub(crate) inv_freq: Vec<f64>,
}

fn seeded_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0) * scale))
        .collect();
    Matrix::from_rows(rows, cols, data).expect("sized by construction")
}

/// Draws all weights from a generator seeded by `cfg.seed`, each matrix
/// entry scaled by `0.02 / sqrt(model_dim)`. Identical configs yield
/// identical weights; normalization gains start at 1.
pub fn init_model<T: Scalar>(cfg: &ModelConfig) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_model = cfg.model_dim;
    let head_dim = cfg.head_dim();
    let kv_dim = cfg.num_kv_heads * head_dim;
    let scale = 0.02 / (d_model as f64).sqrt();

    let embedding = seeded_matrix(&mut rng, cfg.vocab_size, d_model, scale);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        layers.push(LayerWeights {
            wq: seeded_matrix(&mut rng, d_model, d_model, scale),
            wk: seeded_matrix(&mut rng, d_model, kv_dim, scale),
            wv: seeded_matrix(&mut rng, d_model, kv_dim, scale),
            wo: seeded_matrix(&mut rng, d_model, d_model, scale),
            w_gate_up: seeded_matrix(&mut rng, d_model, 2 * cfg.mlp_hidden, scale),
            w_down: seeded_matrix(&mut rng, cfg.mlp_hidden, d_model, scale),
            attn_norm_gain: vec![T::one(); d_model],
            mlp_norm_gain: vec![T::one(); d_model],
        });
    }
    let final_norm_gain = vec![T::one(); d_model];
    let unembedding = seeded_matrix(&mut rng, d_model, cfg.vocab_size, scale);

    let inv_freq = (0..head_dim / 2)
        .map(|j| cfg.rope_base.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();

    Ok(ModelWeights {
        config: cfg.clone(),
        embedding,
        layers,
        final_norm_gain,
        unembedding,
        inv_freq,
    })
}

/// RMS normalization with learned gain, applied row-wise.
fn rmsnorm_rows<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> Matrix<T> {
    let cols = x.cols();
    let mut out = x.clone();
    let eps = T::from_f64_lossy(RMS_NORM_EPS);
    let n = T::from_f64_lossy(cols as f64);
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut sq = T::zero();
        for &v in row.iter() {
            sq = sq + v * v;
        }
        let inv = T::one() / (sq / n + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.iter()) {
            *v = *v * inv * g;
        }
    }
    out
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Rotates every head's dim pairs in-place by the absolute-position angle.
/// `row` is one token's `[num_heads * head_dim]` projection.
fn apply_rope_row<T: Scalar>(row: &mut [T], num_heads: usize, head_dim: usize, position: usize, inv_freq: &[f64]) {
    let pos = position as f64;
    for h in 0..num_heads {
        let head = &mut row[h * head_dim..(h + 1) * head_dim];
        for (j, &freq) in inv_freq.iter().enumerate() {
            let angle = pos * freq;
            let (sin, cos) = (
                T::from_f64_lossy(angle.sin()),
                T::from_f64_lossy(angle.cos()),
            );
            let x0 = head[2 * j];
            let x1 = head[2 * j + 1];
            head[2 * j] = x0 * cos - x1 * sin;
            head[2 * j + 1] = x0 * sin + x1 * cos;
        }
    }
}

impl<T: Scalar> ModelWeights<T> {
    fn embed_rows(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let d = self.config.model_dim;
        let mut out = Matrix::zeros(tokens.len(), d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    token: tok,
                    vocab_size: self.config.vocab_size,
                });
            }
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(self.embedding.row(tok as usize));
        }
        Ok(out)
    }

    /// Projects normalized hidden rows to q/k/v and applies rotary position
    /// embeddings; `positions[r]` is the absolute position of row `r`.
    fn project_qkv(
        &self,
        layer: &LayerWeights<T>,
        normed: &Matrix<T>,
        positions: &[usize],
    ) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        let cfg = &self.config;
        let mut q = normed.matmul(&layer.wq)?;
        let mut k = normed.matmul(&layer.wk)?;
        let v = normed.matmul(&layer.wv)?;
        if cfg.rope_enabled {
            let (hq, hkv, d) = (cfg.num_query_heads, cfg.num_kv_heads, cfg.head_dim());
            for (r, &pos) in positions.iter().enumerate() {
                apply_rope_row(
                    &mut q.data_mut()[r * hq * d..(r + 1) * hq * d],
                    hq,
                    d,
                    pos,
                    &self.inv_freq,
                );
                apply_rope_row(
                    &mut k.data_mut()[r * hkv * d..(r + 1) * hkv * d],
                    hkv,
                    d,
                    pos,
                    &self.inv_freq,
                );
            }
        }
        Ok((q, k, v))
    }

    /// Gate/up projection, SiLU gating, then down projection.
    fn mlp_block(&self, x: &Matrix<T>, layer: &LayerWeights<T>) -> Result<Matrix<T>> {
        let normed = rmsnorm_rows(x, &layer.mlp_norm_gain);
        let gate_up = normed.matmul(&layer.w_gate_up)?;
        let hidden = self.config.mlp_hidden;
        let mut gated = Matrix::zeros(x.rows(), hidden);
        for r in 0..x.rows() {
            let row = gate_up.row(r);
            let dst = &mut gated.data_mut()[r * hidden..(r + 1) * hidden];
            for i in 0..hidden {
                dst[i] = silu(row[i]) * row[hidden + i];
            }
        }
        gated.matmul(&layer.w_down)
    }

    fn logits(&self, hidden: &Matrix<T>) -> Result<Matrix<T>> {
        rmsnorm_rows(hidden, &self.final_norm_gain).matmul(&self.unembedding)
    }
}

fn add_assign_rows<T: Scalar>(x: &mut Matrix<T>, delta: &Matrix<T>) {
    for (a, &b) in x.data_mut().iter_mut().zip(delta.data().iter()) {
        *a = *a + b;
    }
}

/// Prompt text laid onto a sharing structure: every node carries the token
/// span shared by all sequences below it; leaves additionally carry one
/// (possibly empty) unshared prompt tail per sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptNode {
    pub tokens: Vec<u32>,
    pub children: Vec<PromptNode>,
    pub tails: Vec<Vec<u32>>,
}

impl PromptNode {
    /// Flat layout: one shared span with per-sequence tails.
    pub fn flat(tokens: Vec<u32>, tails: Vec<Vec<u32>>) -> Self {
        PromptNode {
            tokens,
            children: Vec::new(),
            tails,
        }
    }

    pub fn leaf(tokens: Vec<u32>, tails: Vec<Vec<u32>>) -> Self {
        Self::flat(tokens, tails)
    }

    pub fn interior(tokens: Vec<u32>, children: Vec<PromptNode>) -> Self {
        PromptNode {
            tokens,
            children,
            tails: Vec::new(),
        }
    }

    pub fn num_sequences(&self) -> usize {
        if self.children.is_empty() {
            self.tails.len()
        } else {
            self.children.iter().map(PromptNode::num_sequences).sum()
        }
    }

    fn to_tree_spec(&self) -> TreeSpec {
        TreeSpec {
            len: self.tokens.len(),
            children: self.children.iter().map(PromptNode::to_tree_spec).collect(),
            num_sequences: self.tails.len(),
        }
    }

    /// Token spans in the breadth-first order [`build_tree`] assigns ids.
    fn spans_in_build_order(&self) -> Vec<&PromptNode> {
        let mut order = Vec::new();
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back(self);
        while let Some(node) = frontier.pop_front() {
            order.push(node);
            frontier.extend(node.children.iter());
        }
        order
    }

    /// Per-sequence tails in the same order sequences are numbered.
    fn tails_in_sequence_order(&self) -> Vec<&Vec<u32>> {
        self.spans_in_build_order()
            .into_iter()
            .filter(|n| n.children.is_empty())
            .flat_map(|n| n.tails.iter())
            .collect()
    }
}

/// Everything prefill produces: per-layer shared KV trees, per-layer suffix
/// caches seeded with the prompt tails, the decode positions, and the
/// final-layer hidden state at each sequence's last prompt token.
#[derive(Debug, Clone)]
pub struct PrefillOutput<T: Scalar> {
    pub trees: Vec<SharingTree<T>>,
    pub suffixes: Vec<SuffixCache<T>>,
    pub batch: DecodeBatch,
    /// `[batch, model_dim]`, rows in ascending sequence order.
    pub last_hidden: Matrix<T>,
}

/// Encodes the prompt layout in parallel, computing every shared node's KV
/// exactly once per layer and filling each sequence's suffix cache with its
/// prompt tail. Node spans attend to their ancestors' segments plus
/// themselves (causally); positions are absolute throughout.
pub fn prefill<T: Scalar>(
    weights: &ModelWeights<T>,
    layout: &PromptNode,
) -> Result<PrefillOutput<T>> {
    let cfg = &weights.config;
    let attn_cfg = cfg.attention_config::<T>()?;
    let (hkv, d) = (cfg.num_kv_heads, cfg.head_dim());
    let spec = layout.to_tree_spec();

    // Structure first (placeholder KV), content per layer afterwards.
    let mut trees: Vec<SharingTree<T>> = (0..cfg.num_layers)
        .map(|_| build_tree(&spec, |_, _, len| zero_segment(len, hkv, d)))
        .collect::<Result<Vec<_>>>()?;
    let spans = layout.spans_in_build_order();
    let tails = layout.tails_in_sequence_order();

    // Per-node final-layer hidden of the last token, for tail-less leaves.
    let mut node_last_hidden: Vec<Option<Vec<T>>> = vec![None; spans.len()];

    for (idx, span) in spans.iter().enumerate() {
        if span.tokens.is_empty() {
            continue;
        }
        let node_id = NodeId(idx as u32);
        let start = trees[0].node(node_id).start_position;
        let ancestors: Vec<NodeId> = {
            let mut path = Vec::new();
            let mut cursor = trees[0].node(node_id).parent;
            while let Some(p) = cursor {
                path.push(p);
                cursor = trees[0].node(p).parent;
            }
            path.reverse();
            path
        };
        let final_hidden = forward_span(
            weights,
            &attn_cfg,
            &span.tokens,
            start,
            &ancestors,
            &mut trees,
            SpanKvSink::Node(node_id),
        )?;
        let dm = cfg.model_dim;
        node_last_hidden[idx] =
            Some(final_hidden.data()[(span.tokens.len() - 1) * dm..].to_vec());
    }

    // Prompt tails fill the per-sequence suffix caches.
    let mut suffixes: Vec<SuffixCache<T>> = (0..cfg.num_layers)
        .map(|_| SuffixCache::new_empty())
        .collect();
    let mut last_hidden = Matrix::zeros(tails.len(), cfg.model_dim);
    let mut positions = Vec::with_capacity(tails.len());

    let leaf_order: Vec<(SequenceId, NodeId)> = trees[0]
        .sequence_ids()
        .map(|s| (s, trees[0].leaf_of(s).expect("assigned by build")))
        .collect();
    if leaf_order.len() != tails.len() {
        return Err(Error::ModelConfig(format!(
            "layout produced {} tails for {} sequences",
            tails.len(),
            leaf_order.len()
        )));
    }

    for (slot, ((sequence, leaf), tail)) in leaf_order.iter().zip(tails.iter()).enumerate() {
        let path_end = trees[0].path_end_position(*sequence)?;
        if path_end + tail.len() == 0 {
            return Err(Error::ModelConfig(format!(
                "sequence {} has an empty prompt",
                sequence
            )));
        }
        let dm = cfg.model_dim;
        if tail.is_empty() {
            for layer_suffixes in suffixes.iter_mut() {
                layer_suffixes.insert_sequence(
                    *sequence,
                    path_end,
                    KeyValueSegment::empty(hkv, d),
                );
            }
            let row = node_last_hidden[leaf.0 as usize]
                .as_ref()
                .expect("leaf with empty tail has tokens on its path");
            last_hidden.data_mut()[slot * dm..(slot + 1) * dm].copy_from_slice(row);
        } else {
            let path: Vec<NodeId> = trees[0].path_from_root(*sequence)?;
            let mut tail_segments: Vec<KeyValueSegment<T>> = Vec::new();
            let final_hidden = forward_span(
                weights,
                &attn_cfg,
                tail,
                path_end,
                &path,
                &mut trees,
                SpanKvSink::Collect(&mut tail_segments),
            )?;
            for (layer, segment) in tail_segments.into_iter().enumerate() {
                suffixes[layer].insert_sequence(*sequence, path_end, segment);
            }
            last_hidden.data_mut()[slot * dm..(slot + 1) * dm]
                .copy_from_slice(&final_hidden.data()[(tail.len() - 1) * dm..]);
        }
        positions.push((*sequence, path_end + tail.len()));
    }

    Ok(PrefillOutput {
        trees,
        suffixes,
        batch: DecodeBatch::new(positions)?,
        last_hidden,
    })
}

fn zero_segment<T: Scalar>(len: usize, kv_heads: usize, head_dim: usize) -> KeyValueSegment<T> {
    KeyValueSegment::from_data(
        len,
        kv_heads,
        head_dim,
        vec![T::zero(); len * kv_heads * head_dim],
        vec![T::zero(); len * kv_heads * head_dim],
    )
    .expect("sized by construction")
}

/// Where a span's freshly computed per-layer KV should land.
enum SpanKvSink<'a, T: Scalar> {
    /// Store into this tree node, layer by layer.
    Node(NodeId),
    /// Push one segment per layer (used for prompt tails).
    Collect(&'a mut Vec<KeyValueSegment<T>>),
}

/// Runs `tokens` (a contiguous span starting at absolute position `start`)
/// through all layers. At every layer the span attends to the given
/// ancestor nodes' stored KV followed by itself under a causal mask, and
/// its own KV is recorded via `sink`. Returns the final-layer hidden rows.
fn forward_span<T: Scalar>(
    weights: &ModelWeights<T>,
    attn_cfg: &AttentionConfig<T>,
    tokens: &[u32],
    start: usize,
    ancestors: &[NodeId],
    trees: &mut [SharingTree<T>],
    mut sink: SpanKvSink<'_, T>,
) -> Result<Matrix<T>> {
    let cfg = &weights.config;
    let (hq, hkv, d) = (cfg.num_query_heads, cfg.num_kv_heads, cfg.head_dim());
    let len = tokens.len();
    let positions: Vec<usize> = (start..start + len).collect();
    let mut x = weights.embed_rows(tokens)?;

    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        let normed = rmsnorm_rows(&x, &layer.attn_norm_gain);
        let (q, k, v) = weights.project_qkv(layer, &normed, &positions)?;
        let own_kv = KeyValueSegment::from_data(
            len,
            hkv,
            d,
            k.data().to_vec(),
            v.data().to_vec(),
        )?;
        let q_block = QueryBlock::from_data(1, len, hq, d, q.data().to_vec())?;

        let mut acc = AttentionResult::empty_sentinel(1, len, hq, d);
        for &ancestor in ancestors {
            let node_kv = &trees[layer_idx].node(ancestor).kv;
            if node_kv.is_empty() {
                continue;
            }
            let partial = sdp_with_lse(q_block.view(), node_kv.view(), attn_cfg)?;
            combine_assign(&mut acc, &partial)?;
        }
        let own = causal_sdp_with_lse(q_block.view(), own_kv.view(), start, attn_cfg)?;
        combine_assign(&mut acc, &own)?;

        let attn_rows = Matrix::from_rows(len, hq * d, acc.out().to_vec())?;
        add_assign_rows(&mut x, &attn_rows.matmul(&layer.wo)?);
        let mlp = weights.mlp_block(&x, layer)?;
        add_assign_rows(&mut x, &mlp);

        match &mut sink {
            SpanKvSink::Node(node_id) => {
                trees[layer_idx].node_mut(*node_id).kv = own_kv;
            }
            SpanKvSink::Collect(segments) => segments.push(own_kv),
        }
    }
    Ok(x)
}

/// Mutable decoding state for one engine.
///
/// The Hydragen engine keeps the shared trees plus per-sequence suffix
/// caches. The per-sequence engine materializes each sequence's full KV
/// (redundantly storing shared segments, as the baseline does) and appends
/// to those flat caches. The no-attention engine keeps no caches at all.
#[derive(Debug, Clone)]
pub struct DecodeState<T: Scalar> {
    engine: EngineKind,
    trees: Vec<SharingTree<T>>,
    suffixes: Vec<SuffixCache<T>>,
    flat: Vec<SuffixCache<T>>,
    batch: DecodeBatch,
}

impl<T: Scalar> DecodeState<T> {
    pub fn from_prefill(prefill: &PrefillOutput<T>, engine: EngineKind) -> Result<Self> {
        let batch = prefill.batch.clone();
        match engine {
            EngineKind::Hydragen => Ok(DecodeState {
                engine,
                trees: prefill.trees.clone(),
                suffixes: prefill.suffixes.clone(),
                flat: Vec::new(),
                batch,
            }),
            EngineKind::PerSequence => {
                let mut flat = Vec::with_capacity(prefill.trees.len());
                for (tree, suffix) in prefill.trees.iter().zip(prefill.suffixes.iter()) {
                    let mut cache = SuffixCache::new_empty();
                    for sequence in tree.sequence_ids() {
                        let full = crate::sharing::flatten_full_kv(tree, suffix, sequence)?;
                        cache.insert_sequence(sequence, 0, full);
                    }
                    flat.push(cache);
                }
                Ok(DecodeState {
                    engine,
                    trees: Vec::new(),
                    suffixes: Vec::new(),
                    flat,
                    batch,
                })
            }
            EngineKind::NoAttention => Ok(DecodeState {
                engine,
                trees: Vec::new(),
                suffixes: Vec::new(),
                flat: Vec::new(),
                batch,
            }),
        }
    }

    pub fn engine(&self) -> EngineKind {
        self.engine
    }

    pub fn batch(&self) -> &DecodeBatch {
        &self.batch
    }
}

/// Logits plus the time spent inside attention for the step.
pub struct StepOutput<T: Scalar> {
    /// `[batch, vocab_size]`
    pub logits: Matrix<T>,
    pub attention_time: Duration,
}

/// Runs one decoding step: each sequence's current token goes through every
/// layer, attending to its cached context plus itself, and the new K/V rows
/// are appended to the caches only after the step's attention completes.
pub fn decode_step<T: Scalar>(
    weights: &ModelWeights<T>,
    state: &mut DecodeState<T>,
    tokens: &[u32],
    engine: EngineKind,
) -> Result<StepOutput<T>> {
    if engine != state.engine {
        return Err(Error::ModelConfig(format!(
            "decode state prepared for {} but stepped with {}",
            state.engine, engine
        )));
    }
    let cfg = &weights.config;
    let batch_len = state.batch.len();
    if tokens.len() != batch_len {
        return Err(Error::ShapeMismatch {
            op: "decode_step",
            detail: format!("{} tokens for batch of {}", tokens.len(), batch_len),
        });
    }
    let attn_cfg = cfg.attention_config::<T>()?;
    let (hq, hkv, d) = (cfg.num_query_heads, cfg.num_kv_heads, cfg.head_dim());
    let group = hq / hkv;
    let positions = state.batch.positions().to_vec();

    let mut x = weights.embed_rows(tokens)?;
    let mut attention_time = Duration::ZERO;

    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        let normed = rmsnorm_rows(&x, &layer.attn_norm_gain);
        let (q, k, v) = weights.project_qkv(layer, &normed, &positions)?;

        let attn_rows: Matrix<T> = match engine {
            EngineKind::NoAttention => {
                // Attention ablated: stand in the current token's value
                // rows, mapped onto the query heads. Depends on nothing in
                // any cache.
                let mut rows = Matrix::zeros(batch_len, hq * d);
                for b in 0..batch_len {
                    for h in 0..hq {
                        let src = &v.row(b)[(h / group) * d..(h / group + 1) * d];
                        rows.data_mut()[(b * hq + h) * d..(b * hq + h + 1) * d]
                            .copy_from_slice(src);
                    }
                }
                rows
            }
            EngineKind::Hydragen | EngineKind::PerSequence => {
                let started = Instant::now();
                let q_block = QueryBlock::from_data(batch_len, 1, hq, d, q.data().to_vec())?;
                let mut result = match engine {
                    EngineKind::Hydragen => tree_attention(
                        &q_block,
                        &state.trees[layer_idx],
                        &state.suffixes[layer_idx],
                        &state.batch,
                        &attn_cfg,
                    )?,
                    _ => {
                        let cache = &state.flat[layer_idx];
                        let segments: Vec<crate::attention::KvView<'_, T>> = state
                            .batch
                            .sequence_ids()
                            .iter()
                            .map(|&s| Ok(cache.segment(s)?.view()))
                            .collect::<Result<Vec<_>>>()?;
                        per_sequence_attention_flat(&q_block, &segments, &attn_cfg)?
                    }
                };
                // The current token attends to itself through a one-key
                // attention merged in after the cached context; its KV is
                // appended to the caches below, after attention.
                let own = own_token_attention(&q_block, &k, &v, &attn_cfg)?;
                combine_assign(&mut result, &own)?;
                attention_time += started.elapsed();
                Matrix::from_rows(batch_len, hq * d, result.out().to_vec())?
            }
        };

        add_assign_rows(&mut x, &attn_rows.matmul(&layer.wo)?);
        let mlp = {
            let normed = rmsnorm_rows(&x, &layer.mlp_norm_gain);
            let gate_up = normed.matmul(&layer.w_gate_up)?;
            let hidden = cfg.mlp_hidden;
            let mut gated = Matrix::zeros(batch_len, hidden);
            for r in 0..batch_len {
                let row = gate_up.row(r);
                let dst = &mut gated.data_mut()[r * hidden..(r + 1) * hidden];
                for i in 0..hidden {
                    dst[i] = silu(row[i]) * row[hidden + i];
                }
            }
            gated.matmul(&layer.w_down)?
        };
        add_assign_rows(&mut x, &mlp);

        // Appends happen strictly after this layer's attention.
        match engine {
            EngineKind::Hydragen => {
                for (slot, &sequence) in state.batch.sequence_ids().to_vec().iter().enumerate() {
                    state.suffixes[layer_idx].append_step_kv(sequence, k.row(slot), v.row(slot))?;
                }
            }
            EngineKind::PerSequence => {
                for (slot, &sequence) in state.batch.sequence_ids().to_vec().iter().enumerate() {
                    state.flat[layer_idx].append_step_kv(sequence, k.row(slot), v.row(slot))?;
                }
            }
            EngineKind::NoAttention => {}
        }
    }

    let logits = weights.logits(&x)?;
    state.batch.advance();
    Ok(StepOutput {
        logits,
        attention_time,
    })
}

/// Single-key attention of each sequence's query against its own fresh K/V
/// row: `lse = scale * q . k` per head and the output is the value row.
fn own_token_attention<T: Scalar>(
    q: &QueryBlock<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    let (batch, hq, d) = (q.batch(), q.num_heads(), q.head_dim());
    let group = cfg.group_size();
    let mut out = vec![T::zero(); batch * hq * d];
    let mut lse = vec![T::zero(); batch * hq];
    for b in 0..batch {
        for h in 0..hq {
            let g = h / group;
            let q_row = &q.data()[(b * hq + h) * d..(b * hq + h + 1) * d];
            let k_row = &k.row(b)[g * d..(g + 1) * d];
            let mut dot = T::zero();
            for i in 0..d {
                dot = dot + q_row[i] * k_row[i];
            }
            lse[b * hq + h] = dot * cfg.scale();
            out[(b * hq + h) * d..(b * hq + h + 1) * d]
                .copy_from_slice(&v.row(b)[g * d..(g + 1) * d]);
        }
    }
    AttentionResult::from_parts(out, lse, batch, 1, hq, d)
}

/// Final-norm + unembedding projection of hidden rows to logits.
pub fn final_logits<T: Scalar>(
    weights: &ModelWeights<T>,
    hidden: &Matrix<T>,
) -> Result<Matrix<T>> {
    weights.logits(hidden)
}

/// Greedy argmax with ties broken toward the lowest token id.
pub fn argmax_row<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0usize;
    let mut best_val = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best as u32
}

/// Greedy generation output: the token matrix plus the decode timeline.
#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// `[batch][num_new_tokens]`
    pub tokens: Vec<Vec<u32>>,
    /// Wall-clock per decode step (the first token comes out of prefill and
    /// has no step entry).
    pub step_seconds: Vec<f64>,
    /// Attention-only portion of each decode step.
    pub step_attention_seconds: Vec<f64>,
    /// Time from start through the first generated token, including
    /// prefill.
    pub time_to_first_token: f64,
    /// Total minus time-to-first-token: the decode-only time the throughput
    /// figures are computed from.
    pub decode_seconds: f64,
}

/// Prefills the prompt layout and greedily decodes `num_new_tokens` tokens
/// per sequence with the chosen engine.
pub fn generate<T: Scalar>(
    weights: &ModelWeights<T>,
    layout: &PromptNode,
    num_new_tokens: usize,
    engine: EngineKind,
) -> Result<GenerateOutput> {
    if num_new_tokens == 0 {
        return Err(Error::EmptyInput {
            op: "generate",
            detail: "num_new_tokens must be at least 1".into(),
        });
    }
    let started = Instant::now();
    let prefill_out = prefill(weights, layout)?;
    let mut state = DecodeState::from_prefill(&prefill_out, engine)?;
    let batch_len = state.batch.len();

    // First token comes straight from the prefill's last hidden states.
    let first_logits = weights.logits(&prefill_out.last_hidden)?;
    let mut current: Vec<u32> = (0..batch_len)
        .map(|b| argmax_row(first_logits.row(b)))
        .collect();
    let time_to_first_token = started.elapsed().as_secs_f64();

    let mut tokens: Vec<Vec<u32>> = (0..batch_len)
        .map(|b| {
            let mut v = Vec::with_capacity(num_new_tokens);
            v.push(current[b]);
            v
        })
        .collect();
    let mut step_seconds = Vec::with_capacity(num_new_tokens.saturating_sub(1));
    let mut step_attention_seconds = Vec::with_capacity(num_new_tokens.saturating_sub(1));

    for _ in 1..num_new_tokens {
        let step_started = Instant::now();
        let step = decode_step(weights, &mut state, &current, engine)?;
        for b in 0..batch_len {
            current[b] = argmax_row(step.logits.row(b));
            tokens[b].push(current[b]);
        }
        step_seconds.push(step_started.elapsed().as_secs_f64());
        step_attention_seconds.push(step.attention_time.as_secs_f64());
    }

    let total = started.elapsed().as_secs_f64();
    Ok(GenerateOutput {
        tokens,
        step_seconds,
        step_attention_seconds,
        time_to_first_token,
        decode_seconds: total - time_to_first_token,
    })
}
