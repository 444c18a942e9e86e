//! Batched attention engines: prefix/suffix decomposition with
//! inter-sequence batching, its generalization to sharing trees, and the
//! per-sequence baseline they are compared against.

use rayon::prelude::*;

use crate::attention::{
    combine_assign, sdp_with_lse, AttentionConfig, AttentionResult, KeyValueSegment, KvView,
    QueryBlock,
};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::sharing::{flatten_full_kv, node_query_groups, DecodeBatch, SharingTree, SuffixCache};

/// Which attention strategy a run uses.
///
/// `Hydragen` decomposes across shared segments and batches prefix queries
/// across sequences. `PerSequence` computes every sequence independently
/// over its full KV, re-reading shared keys and values once per sequence.
/// `NoAttention` skips attention entirely (functionally incorrect) to give
/// a throughput ceiling; the q/k/v/output projections still run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Hydragen,
    PerSequence,
    NoAttention,
}

impl EngineKind {
    pub fn name(&self) -> &'static str {
        match self {
            EngineKind::Hydragen => "hydragen",
            EngineKind::PerSequence => "per-sequence",
            EngineKind::NoAttention => "no-attention",
        }
    }

    pub const ALL: [EngineKind; 3] = [
        EngineKind::Hydragen,
        EngineKind::PerSequence,
        EngineKind::NoAttention,
    ];
}

impl std::str::FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hydragen" => Ok(EngineKind::Hydragen),
            "per-sequence" => Ok(EngineKind::PerSequence),
            "no-attention" => Ok(EngineKind::NoAttention),
            other => Err(Error::BenchConfig(format!(
                "unknown engine '{}' (expected hydragen | per-sequence | no-attention)",
                other
            ))),
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stacks per-sequence results (each `batch == 1`) into one batched result.
fn assemble_batch<T: Scalar>(parts: Vec<AttentionResult<T>>) -> Result<AttentionResult<T>> {
    let first = parts.first().ok_or(Error::EmptyInput {
        op: "assemble_batch",
        detail: "no per-sequence results".into(),
    })?;
    let (nq, hq, d) = (first.num_queries(), first.num_heads(), first.head_dim());
    let batch = parts.len();
    let mut out = Vec::with_capacity(batch * nq * hq * d);
    let mut lse = Vec::with_capacity(batch * nq * hq);
    for part in &parts {
        if part.batch() != 1
            || part.num_queries() != nq
            || part.num_heads() != hq
            || part.head_dim() != d
        {
            return Err(Error::ShapeMismatch {
                op: "assemble_batch",
                detail: "per-sequence results disagree on shape".into(),
            });
        }
        out.extend_from_slice(part.out());
        lse.extend_from_slice(part.lse());
    }
    AttentionResult::from_parts(out, lse, batch, nq, hq, d)
}

/// Copies query rows `[start, start + count)` of a merged result back out as
/// an independent single-sequence result.
fn extract_queries<T: Scalar>(
    merged: &AttentionResult<T>,
    start: usize,
    count: usize,
) -> AttentionResult<T> {
    let (hq, d) = (merged.num_heads(), merged.head_dim());
    let out = merged.out()[start * hq * d..(start + count) * hq * d].to_vec();
    let lse = merged.lse()[start * hq..(start + count) * hq].to_vec();
    AttentionResult::from_parts(out, lse, 1, count, hq, d).expect("sliced shapes are consistent")
}

/// Decomposed attention for a flat prefix/suffix sharing pattern.
///
/// The batch's queries are merged into one logical sequence for a single
/// attention call over the shared prefix (reading the prefix once for the
/// whole batch), while each suffix is attended with its own sequence's
/// queries. The two partial results are then merged by LSE rescaling, which
/// reproduces monolithic attention over `prefix || suffix` per sequence.
pub fn hydragen_attention<T: Scalar>(
    q: &QueryBlock<T>,
    prefix: &KeyValueSegment<T>,
    suffixes: &[KeyValueSegment<T>],
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    let batch = q.batch();
    if suffixes.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "hydragen_attention",
            detail: format!("{} suffixes for batch of {}", suffixes.len(), batch),
        });
    }

    // One inter-sequence-batched attention over the shared prefix; the
    // merge is a pure reshape of the query block.
    let prefix_result =
        sdp_with_lse(q.merged_view(), prefix.view(), cfg)?.reshaped(batch, q.num_queries())?;

    // Suffix keys differ per sequence, so suffix attention stays
    // per-sequence with the unmerged queries.
    let suffix_parts: Vec<Result<AttentionResult<T>>> = (0..batch)
        .into_par_iter()
        .map(|b| sdp_with_lse(q.sequence_view(b), suffixes[b].view(), cfg))
        .collect();
    let suffix_result = assemble_batch(suffix_parts.into_iter().collect::<Result<Vec<_>>>()?)?;

    let mut combined = prefix_result;
    combine_assign(&mut combined, &suffix_result)?;
    Ok(combined)
}

/// Attention decomposition at every vertex of a sharing tree.
///
/// For each tree node the queries of all sequences passing through it are
/// gathered and batched into one attention call over the node's KV; the
/// partial results are then folded per sequence in root-to-leaf order and
/// finally merged with that sequence's suffix attention. Matches monolithic
/// attention over [`flatten_full_kv`] up to rounding.
pub fn tree_attention<T: Scalar>(
    q: &QueryBlock<T>,
    tree: &SharingTree<T>,
    cache: &SuffixCache<T>,
    batch: &DecodeBatch,
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    tree.validate()?;
    if q.batch() != batch.len() {
        return Err(Error::ShapeMismatch {
            op: "tree_attention",
            detail: format!("query batch {} != decode batch {}", q.batch(), batch.len()),
        });
    }
    let (nq, hq, d) = (q.num_queries(), q.num_heads(), q.head_dim());
    let seq_slot: std::collections::BTreeMap<_, _> = batch
        .sequence_ids()
        .iter()
        .enumerate()
        .map(|(slot, &s)| (s, slot))
        .collect();

    // Per-sequence accumulators, folded root -> leaf -> suffix. Ascending
    // node ids are topologically ordered, so processing groups in id order
    // visits every path root-first.
    let mut acc: Vec<AttentionResult<T>> = (0..batch.len())
        .map(|_| AttentionResult::empty_sentinel(1, nq, hq, d))
        .collect();

    for (node_id, members) in node_query_groups(tree, batch)? {
        let node = tree.node(node_id);
        if node.kv.is_empty() {
            // An empty segment contributes the combine identity.
            continue;
        }
        // Gather the group's queries (ascending sequence id) into one
        // merged block.
        let mut gathered = Vec::with_capacity(members.len() * nq * hq * d);
        for &seq in &members {
            let slot = seq_slot[&seq];
            gathered.extend_from_slice(q.sequence_view(slot).data());
        }
        let group_q = QueryBlock::from_data(1, members.len() * nq, hq, d, gathered)?;
        let group_result = sdp_with_lse(group_q.view(), node.kv.view(), cfg)?;
        // Scatter each sequence's rows back into its fold.
        for (i, &seq) in members.iter().enumerate() {
            let partial = extract_queries(&group_result, i * nq, nq);
            combine_assign(&mut acc[seq_slot[&seq]], &partial)?;
        }
    }

    let suffix_parts: Vec<Result<AttentionResult<T>>> = batch
        .sequence_ids()
        .par_iter()
        .enumerate()
        .map(|(slot, &seq)| {
            let segment = cache.segment(seq)?;
            sdp_with_lse(q.sequence_view(slot), segment.view(), cfg)
        })
        .collect();
    for (slot, part) in suffix_parts.into_iter().enumerate() {
        combine_assign(&mut acc[slot], &part?)?;
    }

    assemble_batch(acc)
}

/// Independent attention per sequence over prebuilt full KV blocks - the
/// baseline computation shape, with shared keys and values re-read once per
/// sequence.
pub fn per_sequence_attention_flat<T: Scalar>(
    q: &QueryBlock<T>,
    full_kv: &[KvView<'_, T>],
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    if full_kv.len() != q.batch() {
        return Err(Error::ShapeMismatch {
            op: "per_sequence_attention",
            detail: format!("{} kv blocks for batch of {}", full_kv.len(), q.batch()),
        });
    }
    let parts: Vec<Result<AttentionResult<T>>> = (0..q.batch())
        .into_par_iter()
        .map(|b| sdp_with_lse(q.sequence_view(b), full_kv[b], cfg))
        .collect();
    assemble_batch(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Baseline: every sequence attends independently over its flattened full
/// KV sequence, as if the batch had no sharing at all.
pub fn per_sequence_attention<T: Scalar>(
    q: &QueryBlock<T>,
    tree: &SharingTree<T>,
    cache: &SuffixCache<T>,
    batch: &DecodeBatch,
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    tree.validate()?;
    if q.batch() != batch.len() {
        return Err(Error::ShapeMismatch {
            op: "per_sequence_attention",
            detail: format!("query batch {} != decode batch {}", q.batch(), batch.len()),
        });
    }
    let full: Vec<KeyValueSegment<T>> = batch
        .sequence_ids()
        .iter()
        .map(|&seq| flatten_full_kv(tree, cache, seq))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<KvView<'_, T>> = full.iter().map(|kv| kv.view()).collect();
    per_sequence_attention_flat(q, &views, cfg)
}
