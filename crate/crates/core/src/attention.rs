//! Scaled-dot-product attention with log-sum-exp output, causal prefill
//! attention, and the exact recombination of partial attention results.
//!
//! Every operation returns, alongside the attention output, the log of each
//! query's softmax denominator (LSE). Carrying the LSE is what makes results
//! computed over a partition of the keys exactly mergeable: for K = K1 || K2,
//!
//! ```text
//! sdp(Q,K,V) = (sdp(Q,K1,V1) e^lse1 + sdp(Q,K2,V2) e^lse2) / (e^lse1 + e^lse2)
//! ```
//!
//! [`combine_attention`] evaluates that identity in a max-shifted form that
//! cannot overflow for long contexts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows_in_place, Scalar};

/// Head geometry and score scaling for one attention computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig<T: Scalar> {
    head_dim: usize,
    scale: T,
    num_query_heads: usize,
    num_kv_heads: usize,
}

impl<T: Scalar> AttentionConfig<T> {
    /// Scale defaults to `1/sqrt(head_dim)`.
    pub fn new(head_dim: usize, num_query_heads: usize, num_kv_heads: usize) -> Result<Self> {
        if head_dim == 0 || num_query_heads == 0 || num_kv_heads == 0 {
            return Err(Error::ShapeMismatch {
                op: "AttentionConfig",
                detail: "head_dim and head counts must be positive".into(),
            });
        }
        if !num_query_heads.is_multiple_of(num_kv_heads) {
            return Err(Error::ShapeMismatch {
                op: "AttentionConfig",
                detail: format!(
                    "query heads {} not divisible by kv heads {}",
                    num_query_heads, num_kv_heads
                ),
            });
        }
        let scale = T::one() / T::from_f64_lossy((head_dim as f64).sqrt());
        Ok(AttentionConfig {
            head_dim,
            scale,
            num_query_heads,
            num_kv_heads,
        })
    }

    pub fn with_scale(mut self, scale: T) -> Result<Self> {
        if scale <= T::zero() {
            return Err(Error::ShapeMismatch {
                op: "AttentionConfig",
                detail: "scale must be positive".into(),
            });
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn num_query_heads(&self) -> usize {
        self.num_query_heads
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    /// Query heads per kv head. Query head `h` reads kv head
    /// `h / group_size()`.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }
}

/// Owned query activations with logical layout `[batch, num_queries,
/// num_query_heads, head_dim]`, stored row-major and contiguous.
#[derive(Debug, Clone)]
pub struct QueryBlock<T: Scalar> {
    data: Vec<T>,
    batch: usize,
    num_queries: usize,
    num_heads: usize,
    head_dim: usize,
}

impl<T: Scalar> QueryBlock<T> {
    pub fn from_data(
        batch: usize,
        num_queries: usize,
        num_heads: usize,
        head_dim: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if batch == 0 || num_queries == 0 {
            return Err(Error::EmptyInput {
                op: "QueryBlock",
                detail: "batch and num_queries must be at least 1".into(),
            });
        }
        if data.len() != batch * num_queries * num_heads * head_dim {
            return Err(Error::ShapeMismatch {
                op: "QueryBlock",
                detail: format!(
                    "data length {} != {}x{}x{}x{}",
                    data.len(),
                    batch,
                    num_queries,
                    num_heads,
                    head_dim
                ),
            });
        }
        Ok(QueryBlock {
            data,
            batch,
            num_queries,
            num_heads,
            head_dim,
        })
    }

    pub fn zeros(batch: usize, num_queries: usize, num_heads: usize, head_dim: usize) -> Self {
        QueryBlock {
            data: vec![T::zero(); batch * num_queries * num_heads * head_dim],
            batch,
            num_queries,
            num_heads,
            head_dim,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn view(&self) -> QueryView<'_, T> {
        QueryView {
            data: &self.data,
            batch: self.batch,
            num_queries: self.num_queries,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
        }
    }

    /// Reinterprets the batch as one logical sequence of `batch *
    /// num_queries` queries. Pure reshape: the row-major layouts coincide,
    /// so no data moves.
    pub fn merged_view(&self) -> QueryView<'_, T> {
        QueryView {
            data: &self.data,
            batch: 1,
            num_queries: self.batch * self.num_queries,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
        }
    }

    /// View of a single sequence's queries as a batch of one.
    pub fn sequence_view(&self, b: usize) -> QueryView<'_, T> {
        let stride = self.num_queries * self.num_heads * self.head_dim;
        QueryView {
            data: &self.data[b * stride..(b + 1) * stride],
            batch: 1,
            num_queries: self.num_queries,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
        }
    }
}

/// Borrowed view over query data; shares [`QueryBlock`]'s layout.
#[derive(Debug, Clone, Copy)]
pub struct QueryView<'a, T: Scalar> {
    pub(crate) data: &'a [T],
    pub(crate) batch: usize,
    pub(crate) num_queries: usize,
    pub(crate) num_heads: usize,
    pub(crate) head_dim: usize,
}

impl<'a, T: Scalar> QueryView<'a, T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn data(&self) -> &'a [T] {
        self.data
    }
}

/// A contiguous block of keys and values, each with logical layout
/// `[len, kv_heads, head_dim]`. A segment belongs to one sharing-tree node
/// or one suffix cache; `len == 0` is legal and denotes an empty key set.
#[derive(Debug, Clone)]
pub struct KeyValueSegment<T: Scalar> {
    keys: Vec<T>,
    values: Vec<T>,
    len: usize,
    kv_heads: usize,
    head_dim: usize,
}

impl<T: Scalar> KeyValueSegment<T> {
    pub fn empty(kv_heads: usize, head_dim: usize) -> Self {
        KeyValueSegment {
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
            kv_heads,
            head_dim,
        }
    }

    pub fn from_data(
        len: usize,
        kv_heads: usize,
        head_dim: usize,
        keys: Vec<T>,
        values: Vec<T>,
    ) -> Result<Self> {
        let expect = len * kv_heads * head_dim;
        if keys.len() != expect || values.len() != expect {
            return Err(Error::ShapeMismatch {
                op: "KeyValueSegment",
                detail: format!(
                    "keys/values lengths {}/{} != {}x{}x{}",
                    keys.len(),
                    values.len(),
                    len,
                    kv_heads,
                    head_dim
                ),
            });
        }
        Ok(KeyValueSegment {
            keys,
            values,
            len,
            kv_heads,
            head_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Appends one position: `k_row` and `v_row` have shape
    /// `[kv_heads, head_dim]`.
    pub fn push_position(&mut self, k_row: &[T], v_row: &[T]) -> Result<()> {
        let expect = self.kv_heads * self.head_dim;
        if k_row.len() != expect || v_row.len() != expect {
            return Err(Error::ShapeMismatch {
                op: "KeyValueSegment::push_position",
                detail: format!("row length {} != {}", k_row.len(), expect),
            });
        }
        self.keys.extend_from_slice(k_row);
        self.values.extend_from_slice(v_row);
        self.len += 1;
        Ok(())
    }

    /// Concatenates segments in order. All segments must share head geometry.
    pub fn concat(segments: &[&KeyValueSegment<T>]) -> Result<Self> {
        let (kv_heads, head_dim) = match segments.first() {
            Some(s) => (s.kv_heads, s.head_dim),
            None => {
                return Err(Error::EmptyInput {
                    op: "KeyValueSegment::concat",
                    detail: "no segments".into(),
                })
            }
        };
        let mut out = KeyValueSegment::empty(kv_heads, head_dim);
        for s in segments {
            if s.kv_heads != kv_heads || s.head_dim != head_dim {
                return Err(Error::ShapeMismatch {
                    op: "KeyValueSegment::concat",
                    detail: "segments disagree on head geometry".into(),
                });
            }
            out.keys.extend_from_slice(&s.keys);
            out.values.extend_from_slice(&s.values);
            out.len += s.len;
        }
        Ok(out)
    }

    pub fn view(&self) -> KvView<'_, T> {
        KvView {
            keys: &self.keys,
            values: &self.values,
            len: self.len,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
        }
    }
}

/// Borrowed view over key/value data with [`KeyValueSegment`]'s layout.
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a, T: Scalar> {
    pub(crate) keys: &'a [T],
    pub(crate) values: &'a [T],
    pub(crate) len: usize,
    pub(crate) kv_heads: usize,
    pub(crate) head_dim: usize,
}

impl<'a, T: Scalar> KvView<'a, T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Attention output `[batch, num_queries, num_query_heads, head_dim]` paired
/// with per-query-per-head log-sum-exp values `[batch, num_queries,
/// num_query_heads]`; the unit of recombination.
///
/// When the key set was empty, `lse` is `-inf` and the output rows are zero.
/// That sentinel acts as the identity under [`combine_attention`] and is
/// never exposed as a final result.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<T: Scalar> {
    out: Vec<T>,
    lse: Vec<T>,
    batch: usize,
    num_queries: usize,
    num_heads: usize,
    head_dim: usize,
}

impl<T: Scalar> AttentionResult<T> {
    fn zeros(batch: usize, num_queries: usize, num_heads: usize, head_dim: usize) -> Self {
        AttentionResult {
            out: vec![T::zero(); batch * num_queries * num_heads * head_dim],
            lse: vec![T::zero(); batch * num_queries * num_heads],
            batch,
            num_queries,
            num_heads,
            head_dim,
        }
    }

    /// Rebuilds a result from raw output and LSE buffers.
    pub fn from_parts(
        out: Vec<T>,
        lse: Vec<T>,
        batch: usize,
        num_queries: usize,
        num_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if out.len() != batch * num_queries * num_heads * head_dim
            || lse.len() != batch * num_queries * num_heads
        {
            return Err(Error::ShapeMismatch {
                op: "AttentionResult::from_parts",
                detail: format!(
                    "buffer lengths {}/{} inconsistent with [{},{},{},{}]",
                    out.len(),
                    lse.len(),
                    batch,
                    num_queries,
                    num_heads,
                    head_dim
                ),
            });
        }
        Ok(AttentionResult {
            out,
            lse,
            batch,
            num_queries,
            num_heads,
            head_dim,
        })
    }

    /// The defined result of attending over zero keys: all-zero output with
    /// `-inf` LSE.
    pub fn empty_sentinel(
        batch: usize,
        num_queries: usize,
        num_heads: usize,
        head_dim: usize,
    ) -> Self {
        let mut r = Self::zeros(batch, num_queries, num_heads, head_dim);
        for l in r.lse.iter_mut() {
            *l = T::neg_infinity();
        }
        r
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn out(&self) -> &[T] {
        &self.out
    }

    pub fn lse(&self) -> &[T] {
        &self.lse
    }

    /// Reinterprets `[1, b*nq]` results as `[b, nq]` (or any compatible
    /// factorization); inverse of [`QueryBlock::merged_view`]. Layout is
    /// unchanged, so this is exact.
    pub fn reshaped(mut self, batch: usize, num_queries: usize) -> Result<Self> {
        if batch * num_queries != self.batch * self.num_queries {
            return Err(Error::ShapeMismatch {
                op: "AttentionResult::reshaped",
                detail: format!(
                    "{}x{} incompatible with {}x{}",
                    batch, num_queries, self.batch, self.num_queries
                ),
            });
        }
        self.batch = batch;
        self.num_queries = num_queries;
        Ok(self)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch
            && self.num_queries == other.num_queries
            && self.num_heads == other.num_heads
            && self.head_dim == other.head_dim
    }
}

/// Test-only sabotage switch used to prove the verification suites can
/// detect a broken combine. Never enable outside `verify --inject-combine-bug`.
pub mod fault {
    use std::sync::atomic::{AtomicBool, Ordering};

    static INJECT_COMBINE_BUG: AtomicBool = AtomicBool::new(false);

    /// When set, [`super::combine_attention`] drops the LSE rescaling
    /// factors on the outputs, silently averaging the operands instead.
    pub fn set_inject_combine_bug(enabled: bool) {
        INJECT_COMBINE_BUG.store(enabled, Ordering::Relaxed);
    }

    pub(crate) fn combine_bug_enabled() -> bool {
        INJECT_COMBINE_BUG.load(Ordering::Relaxed)
    }
}

enum Masking {
    None,
    /// Query at local index `i` attends only to keys at local indices
    /// `<= i`; both spans start at the same absolute position.
    Causal { position_offset: usize },
}

/// Attention over one key/value segment, returning output and LSE.
///
/// Query head `h` reads kv head `h / (Hq/Hkv)`. A zero-length segment yields
/// the empty sentinel. Scores are scaled by `cfg.scale()` during the
/// query-key product.
pub fn sdp_with_lse<T: Scalar>(
    q: QueryView<'_, T>,
    kv: KvView<'_, T>,
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    attention_kernel(q, kv, cfg, Masking::None)
}

/// Causal attention over a span attending to itself, used during prefill.
///
/// Queries and keys must describe the same token span (`num_queries ==
/// kv.len()`); `position_offset` is the absolute position of the span's
/// first token. Keys from earlier in the sequence are attended via a
/// separate [`sdp_with_lse`] call and merged with [`combine_attention`].
pub fn causal_sdp_with_lse<T: Scalar>(
    q: QueryView<'_, T>,
    kv: KvView<'_, T>,
    position_offset: usize,
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    if q.num_queries != kv.len {
        return Err(Error::ShapeMismatch {
            op: "causal_sdp_with_lse",
            detail: format!(
                "span mismatch: {} queries vs {} keys",
                q.num_queries, kv.len
            ),
        });
    }
    attention_kernel(q, kv, cfg, Masking::Causal { position_offset })
}

/// One unit of kernel work: a contiguous range of query positions for one
/// (batch, kv-head) pair. Each task owns disjoint output rows, so tasks can
/// run on any number of threads without changing results.
#[derive(Clone, Copy)]
struct GroupTask {
    b: usize,
    kv_head: usize,
    q_start: usize,
    q_end: usize,
}

/// Rows per task; sized so the per-task query-key product stays a
/// reasonably fat matrix product.
const TASK_TARGET_ROWS: usize = 256;

fn attention_kernel<T: Scalar>(
    q: QueryView<'_, T>,
    kv: KvView<'_, T>,
    cfg: &AttentionConfig<T>,
    masking: Masking,
) -> Result<AttentionResult<T>> {
    if q.head_dim != cfg.head_dim() || kv.head_dim != cfg.head_dim() {
        return Err(Error::ShapeMismatch {
            op: "sdp_with_lse",
            detail: format!(
                "head_dim mismatch: q={} kv={} cfg={}",
                q.head_dim,
                kv.head_dim,
                cfg.head_dim()
            ),
        });
    }
    if q.num_heads != cfg.num_query_heads() || kv.kv_heads != cfg.num_kv_heads() {
        return Err(Error::ShapeMismatch {
            op: "sdp_with_lse",
            detail: format!(
                "head count mismatch: q={} kv={} cfg={}q/{}kv",
                q.num_heads,
                kv.kv_heads,
                cfg.num_query_heads(),
                cfg.num_kv_heads()
            ),
        });
    }
    if kv.len == 0 {
        return Ok(AttentionResult::empty_sentinel(
            q.batch,
            q.num_queries,
            q.num_heads,
            q.head_dim,
        ));
    }

    let (batch, nq, hq, d) = (q.batch, q.num_queries, q.num_heads, q.head_dim);
    let hkv = kv.kv_heads;
    let group = hq / hkv;
    let chunk = (TASK_TARGET_ROWS / group).max(1);

    let mut tasks = Vec::new();
    for b in 0..batch {
        for kv_head in 0..hkv {
            let mut q_start = 0;
            while q_start < nq {
                let q_end = (q_start + chunk).min(nq);
                tasks.push(GroupTask {
                    b,
                    kv_head,
                    q_start,
                    q_end,
                });
                q_start = q_end;
            }
        }
    }

    let causal_offset = match masking {
        Masking::None => None,
        Masking::Causal { position_offset } => Some(position_offset),
    };
    let scale = cfg.scale();

    let blocks: Vec<(Vec<T>, Vec<T>)> = tasks
        .par_iter()
        .map(|t| run_task(t, q, kv, scale, causal_offset, group))
        .collect();

    let mut result = AttentionResult::zeros(batch, nq, hq, d);
    for (t, (out_block, lse_block)) in tasks.iter().zip(blocks.iter()) {
        for (ni, n) in (t.q_start..t.q_end).enumerate() {
            let dst_row = (t.b * nq + n) * hq + t.kv_head * group;
            result.out[dst_row * d..(dst_row + group) * d]
                .copy_from_slice(&out_block[ni * group * d..(ni + 1) * group * d]);
            result.lse[dst_row..dst_row + group]
                .copy_from_slice(&lse_block[ni * group..(ni + 1) * group]);
        }
    }
    Ok(result)
}

fn run_task<T: Scalar>(
    t: &GroupTask,
    q: QueryView<'_, T>,
    kv: KvView<'_, T>,
    scale: T,
    causal_offset: Option<usize>,
    group: usize,
) -> (Vec<T>, Vec<T>) {
    let (nq, hq, d) = (q.num_queries, q.num_heads, q.head_dim);
    let (nkv, hkv) = (kv.len, kv.kv_heads);
    let rows = (t.q_end - t.q_start) * group;

    // Gather this group's query rows into a contiguous block. For a fixed
    // query position the group's head rows are already contiguous.
    let mut packed_q = vec![T::zero(); rows * d];
    for (ni, n) in (t.q_start..t.q_end).enumerate() {
        let src = ((t.b * nq + n) * hq + t.kv_head * group) * d;
        packed_q[ni * group * d..(ni + 1) * group * d].copy_from_slice(&q.data[src..src + group * d]);
    }

    // scores = scale * Qp K_g^T, reading K at stride hkv*d (no gather).
    let mut scores = vec![T::zero(); rows * nkv];
    unsafe {
        T::gemm(
            rows,
            d,
            nkv,
            scale,
            packed_q.as_ptr(),
            d as isize,
            1,
            kv.keys.as_ptr().add(t.kv_head * d),
            1,
            (hkv * d) as isize,
            scores.as_mut_ptr(),
            nkv as isize,
            1,
        );
    }

    if let Some(offset) = causal_offset {
        for (ni, n) in (t.q_start..t.q_end).enumerate() {
            let query_pos = offset + n;
            for h in 0..group {
                let row = &mut scores[(ni * group + h) * nkv..(ni * group + h + 1) * nkv];
                for (j, s) in row.iter_mut().enumerate() {
                    if offset + j > query_pos {
                        *s = T::neg_infinity();
                    }
                }
            }
        }
    }

    let mut lse = vec![T::zero(); rows];
    softmax_rows_in_place(&mut scores, rows, nkv, &mut lse);

    // out = P V_g, reading V at stride hkv*d.
    let mut out = vec![T::zero(); rows * d];
    unsafe {
        T::gemm(
            rows,
            nkv,
            d,
            T::one(),
            scores.as_ptr(),
            nkv as isize,
            1,
            kv.values.as_ptr().add(t.kv_head * d),
            (hkv * d) as isize,
            1,
            out.as_mut_ptr(),
            d as isize,
            1,
        );
    }

    (out, lse)
}

/// Merges `other` into `acc` using the max-shifted denominator rescaling.
///
/// For each (batch, query, head) entry with LSEs `l1, l2` and `m = max`:
/// `out = (out1 e^{l1-m} + out2 e^{l2-m}) / (e^{l1-m} + e^{l2-m})` and
/// `lse = m + ln(e^{l1-m} + e^{l2-m})`, which equals the unshifted rescaling
/// identity whenever that one is finite, and never overflows. Combining with
/// an empty-sentinel operand returns the other operand bit-for-bit.
pub fn combine_assign<T: Scalar>(
    acc: &mut AttentionResult<T>,
    other: &AttentionResult<T>,
) -> Result<()> {
    if !acc.same_shape(other) {
        return Err(Error::ShapeMismatch {
            op: "combine_attention",
            detail: format!(
                "[{},{},{},{}] vs [{},{},{},{}]",
                acc.batch,
                acc.num_queries,
                acc.num_heads,
                acc.head_dim,
                other.batch,
                other.num_queries,
                other.num_heads,
                other.head_dim
            ),
        });
    }
    let d = acc.head_dim;
    let buggy = fault::combine_bug_enabled();
    for idx in 0..acc.lse.len() {
        let l1 = acc.lse[idx];
        let l2 = other.lse[idx];
        let m = if l1 > l2 { l1 } else { l2 };
        if m == T::neg_infinity() {
            // Both operands empty: result stays the sentinel.
            continue;
        }
        let adjust1 = (l1 - m).exp();
        let adjust2 = (l2 - m).exp();
        let denominator = adjust1 + adjust2;
        let (w1, w2) = if buggy {
            (T::one(), T::one())
        } else {
            (adjust1, adjust2)
        };
        let o1 = &mut acc.out[idx * d..(idx + 1) * d];
        let o2 = &other.out[idx * d..(idx + 1) * d];
        for (x, &y) in o1.iter_mut().zip(o2.iter()) {
            *x = (*x * w1 + y * w2) / denominator;
        }
        acc.lse[idx] = m + denominator.ln();
    }
    Ok(())
}

/// Combines two partial attention results over a key partition into the
/// result over the concatenated keys. See [`combine_assign`].
pub fn combine_attention<T: Scalar>(
    r1: &AttentionResult<T>,
    r2: &AttentionResult<T>,
) -> Result<AttentionResult<T>> {
    let mut acc = r1.clone();
    combine_assign(&mut acc, r2)?;
    Ok(acc)
}

/// Attention over an ordered partition of a KV sequence: one [`sdp_with_lse`]
/// per segment, left-folded with [`combine_attention`]. Equals attention over
/// the concatenated segments up to floating-point rounding. An empty segment
/// list yields the empty sentinel.
pub fn chunked_sdp_with_lse<T: Scalar>(
    q: QueryView<'_, T>,
    segments: &[KvView<'_, T>],
    cfg: &AttentionConfig<T>,
) -> Result<AttentionResult<T>> {
    let mut acc =
        AttentionResult::empty_sentinel(q.batch, q.num_queries, q.num_heads, q.head_dim);
    for seg in segments {
        let partial = sdp_with_lse(q, *seg, cfg)?;
        combine_assign(&mut acc, &partial)?;
    }
    Ok(acc)
}

/// Verbatim denominator-rescaling identity without the max shift. Overflows
/// once `|lse|` exceeds the exponent range, so it exists only as the second
/// algebraic route for stability checks; production code uses
/// [`combine_attention`].
pub fn combine_attention_unshifted<T: Scalar>(
    r1: &AttentionResult<T>,
    r2: &AttentionResult<T>,
) -> Result<AttentionResult<T>> {
    if !r1.same_shape(r2) {
        return Err(Error::ShapeMismatch {
            op: "combine_attention_unshifted",
            detail: "operand shapes differ".into(),
        });
    }
    let mut acc = r1.clone();
    let d = acc.head_dim;
    for idx in 0..acc.lse.len() {
        let e1 = r1.lse[idx].exp();
        let e2 = r2.lse[idx].exp();
        let denominator = e1 + e2;
        let o2 = &r2.out[idx * d..(idx + 1) * d];
        let o1 = &mut acc.out[idx * d..(idx + 1) * d];
        for (x, &y) in o1.iter_mut().zip(o2.iter()) {
            *x = (*x * e1 + y * e2) / denominator;
        }
        acc.lse[idx] = denominator.ln();
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{max_abs_diff, sdp_oracle, widen};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded_query<T: Scalar>(
        rng: &mut ChaCha8Rng,
        batch: usize,
        nq: usize,
        hq: usize,
        d: usize,
    ) -> QueryBlock<T> {
        let data = (0..batch * nq * hq * d)
            .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
            .collect();
        QueryBlock::from_data(batch, nq, hq, d, data).unwrap()
    }

    fn seeded_kv<T: Scalar>(
        rng: &mut ChaCha8Rng,
        len: usize,
        hkv: usize,
        d: usize,
    ) -> KeyValueSegment<T> {
        crate::sharing::seeded_segment_with(rng, len, hkv, d)
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        // Zero query scores every key at 0, so the output is the mean of
        // the value rows and the lse is ln(n_keys).
        let cfg = AttentionConfig::<f64>::new(2, 1, 1).unwrap();
        let q = QueryBlock::from_data(1, 1, 1, 2, vec![0.0, 0.0]).unwrap();
        let kv = KeyValueSegment::from_data(
            2,
            1,
            2,
            vec![0.3, -0.7, 0.9, 0.1],
            vec![1.0, 0.0, 3.0, 4.0],
        )
        .unwrap();
        let r = sdp_with_lse(q.view(), kv.view(), &cfg).unwrap();
        assert_abs_diff_eq!(r.out()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.out()[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lse()[0], 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let cfg = AttentionConfig::<f64>::new(2, 1, 1).unwrap();
        let q = QueryBlock::from_data(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let kv =
            KeyValueSegment::from_data(1, 1, 2, vec![2.0, 0.0], vec![0.25, -0.5]).unwrap();
        let r = sdp_with_lse(q.view(), kv.view(), &cfg).unwrap();
        assert_abs_diff_eq!(r.out()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(r.out()[1], -0.5, epsilon = 1e-12);
        // lse of a single key is its scaled score: 2 / sqrt(2).
        assert_abs_diff_eq!(r.lse()[0], 2.0 / 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn sdp_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, nq, nkv, hq, hkv, d) = (2, 3, 5, 2, 1, 4);
        let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
        let q = seeded_query::<f32>(&mut rng, b, nq, hq, d);
        let kv = seeded_kv::<f32>(&mut rng, nkv, hkv, d);
        let r = sdp_with_lse(q.view(), kv.view(), &cfg).unwrap();
        let want = sdp_oracle(
            &widen(q.data()),
            b,
            nq,
            hq,
            d,
            &widen(kv.keys()),
            &widen(kv.values()),
            nkv,
            hkv,
            1.0 / (d as f64).sqrt(),
            None,
        );
        assert!(max_abs_diff(r.out(), &want.out) < 1e-5);
        assert!(max_abs_diff(r.lse(), &want.lse) < 1e-5);
    }

    #[test]
    fn empty_segment_yields_sentinel() {
        let cfg = AttentionConfig::<f64>::new(4, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = seeded_query::<f64>(&mut rng, 1, 2, 2, 4);
        let kv = KeyValueSegment::empty(1, 4);
        let r = sdp_with_lse(q.view(), kv.view(), &cfg).unwrap();
        assert!(r.lse().iter().all(|&l| l == f64::NEG_INFINITY));
        assert!(r.out().iter().all(|&o| o == 0.0));
    }

    #[test]
    fn sdp_rejects_head_dim_mismatch() {
        let cfg = AttentionConfig::<f64>::new(4, 2, 1).unwrap();
        let q = QueryBlock::<f64>::zeros(1, 1, 2, 4);
        let kv = KeyValueSegment::<f64>::empty(1, 8);
        assert!(sdp_with_lse(q.view(), kv.view(), &cfg).is_err());
    }

    #[test]
    fn causal_first_token_sees_only_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::<f64>::new(4, 1, 1).unwrap();
        let q = seeded_query::<f64>(&mut rng, 1, 2, 1, 4);
        let kv = seeded_kv::<f64>(&mut rng, 2, 1, 4);
        let r = causal_sdp_with_lse(q.view(), kv.view(), 0, &cfg).unwrap();
        // Row 0 output equals value row 0 exactly.
        for i in 0..4 {
            assert_eq!(r.out()[i], kv.values()[i]);
        }
    }

    #[test]
    fn causal_zero_queries_average_visible_rows() {
        let n = 4;
        let cfg = AttentionConfig::<f64>::new(2, 1, 1).unwrap();
        let q = QueryBlock::zeros(1, n, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kv = seeded_kv::<f64>(&mut rng, n, 1, 2);
        let r = causal_sdp_with_lse(q.view(), kv.view(), 7, &cfg).unwrap();
        for i in 0..n {
            let mean0: f64 = (0..=i).map(|j| kv.values()[j * 2]).sum::<f64>() / (i + 1) as f64;
            assert_abs_diff_eq!(r.out()[i * 2], mean0, epsilon = 1e-12);
            assert_abs_diff_eq!(r.lse()[i], ((i + 1) as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn causal_matches_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, hq, hkv, d) = (6, 4, 2, 8);
        let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
        let q = seeded_query::<f32>(&mut rng, 1, n, hq, d);
        let kv = seeded_kv::<f32>(&mut rng, n, hkv, d);
        let r = causal_sdp_with_lse(q.view(), kv.view(), 3, &cfg).unwrap();
        let want = sdp_oracle(
            &widen(q.data()),
            1,
            n,
            hq,
            d,
            &widen(kv.keys()),
            &widen(kv.values()),
            n,
            hkv,
            1.0 / (d as f64).sqrt(),
            Some(3),
        );
        assert!(max_abs_diff(r.out(), &want.out) < 1e-5);
        assert!(max_abs_diff(r.lse(), &want.lse) < 1e-5);
    }

    #[test]
    fn causal_requires_matching_span() {
        let cfg = AttentionConfig::<f64>::new(2, 1, 1).unwrap();
        let q = QueryBlock::<f64>::zeros(1, 3, 1, 2);
        let kv = KeyValueSegment::<f64>::empty(1, 2);
        assert!(causal_sdp_with_lse(q.view(), kv.view(), 0, &cfg).is_err());
    }

    #[test]
    fn causal_row_equals_unmasked_prefix_of_keys() {
        // Row i of the causal result must equal unmasked attention over the
        // first i+1 keys.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, hq, hkv, d) = (5, 2, 1, 4);
        let cfg = AttentionConfig::<f64>::new(d, hq, hkv).unwrap();
        let q = seeded_query::<f64>(&mut rng, 1, n, hq, d);
        let kv = seeded_kv::<f64>(&mut rng, n, hkv, d);
        let causal = causal_sdp_with_lse(q.view(), kv.view(), 0, &cfg).unwrap();
        for i in 0..n {
            let qi = QueryBlock::from_data(1, 1, hq, d, q.data()[i * hq * d..(i + 1) * hq * d].to_vec())
                .unwrap();
            let prefix = KeyValueSegment::from_data(
                i + 1,
                hkv,
                d,
                kv.keys()[..(i + 1) * hkv * d].to_vec(),
                kv.values()[..(i + 1) * hkv * d].to_vec(),
            )
            .unwrap();
            let direct = sdp_with_lse(qi.view(), prefix.view(), &cfg).unwrap();
            for h in 0..hq {
                assert_abs_diff_eq!(
                    causal.lse()[i * hq + h],
                    direct.lse()[h],
                    epsilon = 1e-12
                );
                for dd in 0..d {
                    assert_abs_diff_eq!(
                        causal.out()[(i * hq + h) * d + dd],
                        direct.out()[h * d + dd],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn combine_matches_direct_rescaling_example() {
        // out1=[1], lse1=0 and out2=[3], lse2=ln 3 combine to
        // (1*1 + 3*3)/(1+3) = 2.5 with lse = ln 4.
        let r1 = AttentionResult::from_parts(vec![1.0f64], vec![0.0], 1, 1, 1, 1).unwrap();
        let r2 =
            AttentionResult::from_parts(vec![3.0f64], vec![3.0f64.ln()], 1, 1, 1, 1).unwrap();
        let c = combine_attention(&r1, &r2).unwrap();
        assert_abs_diff_eq!(c.out()[0], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.lse()[0], 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn combine_equal_lse_is_elementwise_mean() {
        let r1 = AttentionResult::from_parts(vec![1.0f64, 5.0], vec![2.0], 1, 1, 1, 2).unwrap();
        let r2 = AttentionResult::from_parts(vec![3.0f64, 1.0], vec![2.0], 1, 1, 1, 2).unwrap();
        let c = combine_attention(&r1, &r2).unwrap();
        assert_abs_diff_eq!(c.out()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.out()[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn combine_with_empty_sentinel_is_identity() {
        let r1 = AttentionResult::from_parts(
            vec![0.125f64, -2.75],
            vec![1.4375],
            1,
            1,
            1,
            2,
        )
        .unwrap();
        let sentinel = AttentionResult::empty_sentinel(1, 1, 1, 2);
        let c = combine_attention(&r1, &sentinel).unwrap();
        // Bit-for-bit equality, not just approximate.
        assert_eq!(c, r1);
        let c2 = combine_attention(&sentinel, &r1).unwrap();
        assert_eq!(c2.out(), r1.out());
        assert_eq!(c2.lse(), r1.lse());
        let both = combine_attention(&sentinel, &sentinel).unwrap();
        assert_eq!(both, sentinel);
    }

    #[test]
    fn combine_shape_mismatch_is_rejected() {
        let r1 = AttentionResult::<f64>::empty_sentinel(1, 1, 1, 2);
        let r2 = AttentionResult::<f64>::empty_sentinel(1, 1, 1, 4);
        assert!(combine_attention(&r1, &r2).is_err());
    }

    #[test]
    fn chunked_single_segment_equals_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = AttentionConfig::<f32>::new(4, 2, 2).unwrap();
        let q = seeded_query::<f32>(&mut rng, 2, 1, 2, 4);
        let kv = seeded_kv::<f32>(&mut rng, 6, 2, 4);
        let direct = sdp_with_lse(q.view(), kv.view(), &cfg).unwrap();
        let chunked = chunked_sdp_with_lse(q.view(), &[kv.view()], &cfg).unwrap();
        assert_eq!(chunked, direct);
    }

    #[test]
    fn chunked_empty_list_is_sentinel() {
        let q = QueryBlock::<f64>::zeros(1, 1, 2, 4);
        let cfg = AttentionConfig::<f64>::new(4, 2, 1).unwrap();
        let r = chunked_sdp_with_lse(q.view(), &[], &cfg).unwrap();
        assert!(r.lse().iter().all(|&l| l == f64::NEG_INFINITY));
    }

    #[test]
    fn chunked_length_one_segments_match_monolith() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, hq, hkv, d) = (7, 2, 1, 8);
        let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
        let q = seeded_query::<f32>(&mut rng, 1, 1, hq, d);
        let kv = seeded_kv::<f32>(&mut rng, n, hkv, d);
        let singles: Vec<KeyValueSegment<f32>> = (0..n)
            .map(|j| {
                KeyValueSegment::from_data(
                    1,
                    hkv,
                    d,
                    kv.keys()[j * hkv * d..(j + 1) * hkv * d].to_vec(),
                    kv.values()[j * hkv * d..(j + 1) * hkv * d].to_vec(),
                )
                .unwrap()
            })
            .collect();
        let views: Vec<KvView<'_, f32>> = singles.iter().map(|s| s.view()).collect();
        let chunked = chunked_sdp_with_lse(q.view(), &views, &cfg).unwrap();
        let monolith = sdp_with_lse(q.view(), kv.view(), &cfg).unwrap();
        for (a, b) in chunked.out().iter().zip(monolith.out().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn injected_combine_bug_breaks_recombination() {
        let r1 = AttentionResult::from_parts(vec![1.0f64], vec![0.0], 1, 1, 1, 1).unwrap();
        let r2 =
            AttentionResult::from_parts(vec![3.0f64], vec![3.0f64.ln()], 1, 1, 1, 1).unwrap();
        fault::set_inject_combine_bug(true);
        let broken = combine_attention(&r1, &r2).unwrap();
        fault::set_inject_combine_bug(false);
        assert!((broken.out()[0] - 2.5).abs() > 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Decomposition exactness: attention over any split K1||K2 combined
        /// by LSE rescaling equals attention over the concatenation.
        #[test]
        fn split_and_combine_equals_monolith(
            seed in 0u64..500,
            split in 1usize..7,
            nkv in 8usize..20,
            hq_pow in 0u32..3,
            gq in 1usize..3,
        ) {
            let hkv = 1usize << hq_pow;
            let hq = hkv * gq;
            let d = 8;
            let split = split.min(nkv - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = AttentionConfig::<f64>::new(d, hq, hkv).unwrap();
            let q = seeded_query::<f64>(&mut rng, 2, 1, hq, d);
            let kv = seeded_kv::<f64>(&mut rng, nkv, hkv, d);
            let first = KeyValueSegment::from_data(
                split, hkv, d,
                kv.keys()[..split * hkv * d].to_vec(),
                kv.values()[..split * hkv * d].to_vec(),
            ).unwrap();
            let second = KeyValueSegment::from_data(
                nkv - split, hkv, d,
                kv.keys()[split * hkv * d..].to_vec(),
                kv.values()[split * hkv * d..].to_vec(),
            ).unwrap();
            let r1 = sdp_with_lse(q.view(), first.view(), &cfg).unwrap();
            let r2 = sdp_with_lse(q.view(), second.view(), &cfg).unwrap();
            let combined = combine_attention(&r1, &r2).unwrap();
            let monolith = sdp_with_lse(q.view(), kv.view(), &cfg).unwrap();
            for (a, b) in combined.out().iter().zip(monolith.out().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in combined.lse().iter().zip(monolith.lse().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        /// Combine is commutative and associative up to rounding, so any
        /// tree-reduction order gives the same result.
        #[test]
        fn combine_commutes_and_associates(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                let out: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let lse: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
                AttentionResult::from_parts(out, lse, 1, 1, 3, 2).unwrap()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let ab = combine_attention(&a, &b).unwrap();
            let ba = combine_attention(&b, &a).unwrap();
            for (x, y) in ab.out().iter().zip(ba.out().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let ab_c = combine_attention(&ab, &c).unwrap();
            let bc = combine_attention(&b, &c).unwrap();
            let a_bc = combine_attention(&a, &bc).unwrap();
            for (x, y) in ab_c.out().iter().zip(a_bc.out().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in ab_c.lse().iter().zip(a_bc.lse().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        /// The max-shifted combine equals the raw rescaling identity
        /// wherever the raw exponentials stay finite.
        #[test]
        fn stabilized_combine_equals_raw_formula(seed in 0u64..500, lse_scale in 1.0f64..30.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng, scale: f64| {
                let out: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let lse: Vec<f64> = (0..2).map(|_| rng.gen_range(-scale..scale)).collect();
                AttentionResult::from_parts(out, lse, 1, 1, 2, 2).unwrap()
            };
            let a = mk(&mut rng, lse_scale);
            let b = mk(&mut rng, lse_scale);
            let stabilized = combine_attention(&a, &b).unwrap();
            let raw = combine_attention_unshifted(&a, &b).unwrap();
            for (x, y) in stabilized.out().iter().zip(raw.out().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in stabilized.lse().iter().zip(raw.lse().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stabilized_combine_survives_huge_lse() {
        // Raw rescaling overflows at lse ~ 1e4; the shifted form stays
        // finite.
        let a = AttentionResult::from_parts(vec![1.0f64], vec![1.0e4], 1, 1, 1, 1).unwrap();
        let b = AttentionResult::from_parts(vec![3.0f64], vec![9.9e3], 1, 1, 1, 1).unwrap();
        let stabilized = combine_attention(&a, &b).unwrap();
        assert!(stabilized.out()[0].is_finite());
        assert!(stabilized.lse()[0].is_finite());
        let raw = combine_attention_unshifted(&a, &b).unwrap();
        assert!(!raw.out()[0].is_finite() || !raw.lse()[0].is_finite());
    }
}
