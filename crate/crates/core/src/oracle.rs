//! Independent double-precision reference implementations.
//!
//! Everything in this module is deliberately written as plain loops over
//! `f64` slices, sharing no code with the production kernels it is used to
//! check. The verification suites and the test batteries compare the fast
//! paths against these.

use crate::attention::{KeyValueSegment, QueryBlock};
use crate::numerics::Scalar;

/// Brute-force attention output and log-sum-exp values in `f64`.
#[derive(Debug, Clone)]
pub struct OracleAttention {
    /// `[batch, num_queries, num_query_heads, head_dim]`
    pub out: Vec<f64>,
    /// `[batch, num_queries, num_query_heads]`
    pub lse: Vec<f64>,
}

pub fn widen<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.to_f64().unwrap()).collect()
}

/// Direct evaluation of scaled-dot-product attention with per-query LSE.
///
/// `q` is `[batch, nq, hq, d]`, `keys`/`values` are `[nkv, hkv, d]`; query
/// head `h` reads kv head `h / (hq/hkv)`. When `causal_offset` is set, the
/// query at local index `i` sees only keys at local indices `<= i`.
#[allow(clippy::too_many_arguments)]
pub fn sdp_oracle(
    q: &[f64],
    batch: usize,
    nq: usize,
    hq: usize,
    d: usize,
    keys: &[f64],
    values: &[f64],
    nkv: usize,
    hkv: usize,
    scale: f64,
    causal_offset: Option<usize>,
) -> OracleAttention {
    assert_eq!(q.len(), batch * nq * hq * d);
    assert_eq!(keys.len(), nkv * hkv * d);
    assert_eq!(values.len(), nkv * hkv * d);
    let group = hq / hkv;
    let mut out = vec![0.0; batch * nq * hq * d];
    let mut lse = vec![0.0; batch * nq * hq];
    for b in 0..batch {
        for n in 0..nq {
            for h in 0..hq {
                let g = h / group;
                let q_row = &q[((b * nq + n) * hq + h) * d..][..d];
                let visible = match causal_offset {
                    Some(_) => n + 1,
                    None => nkv,
                };
                let mut scores = vec![f64::NEG_INFINITY; nkv];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(visible) {
                    let k_row = &keys[(j * hkv + g) * d..][..d];
                    let mut dot = 0.0;
                    for dd in 0..d {
                        dot += q_row[dd] * k_row[dd];
                    }
                    *s = dot * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let row_idx = (b * nq + n) * hq + h;
                if max == f64::NEG_INFINITY {
                    lse[row_idx] = f64::NEG_INFINITY;
                    continue;
                }
                let mut denom = 0.0;
                for s in scores.iter().take(visible) {
                    denom += (s - max).exp();
                }
                lse[row_idx] = max + denom.ln();
                let out_row = &mut out[row_idx * d..(row_idx + 1) * d];
                for (j, s) in scores.iter().enumerate().take(visible) {
                    let weight = (s - max).exp() / denom;
                    let v_row = &values[(j * hkv + g) * d..][..d];
                    for dd in 0..d {
                        out_row[dd] += weight * v_row[dd];
                    }
                }
            }
        }
    }
    OracleAttention { out, lse }
}

/// Monolithic attention for one batch over per-sequence key/value blocks:
/// the direct evaluation the decomposed engines must reproduce.
///
/// `full_kv[b]` holds the complete (prefix-through-suffix) KV sequence seen
/// by batch entry `b`.
pub fn monolithic_attention_oracle<T: Scalar>(
    q: &QueryBlock<T>,
    full_kv: &[KeyValueSegment<T>],
    scale: f64,
) -> OracleAttention {
    assert_eq!(q.batch(), full_kv.len());
    let (nq, hq, d) = (q.num_queries(), q.num_heads(), q.head_dim());
    let q64 = widen(q.data());
    let mut out = vec![0.0; q.batch() * nq * hq * d];
    let mut lse = vec![0.0; q.batch() * nq * hq];
    let per_seq_q = nq * hq * d;
    let per_seq_lse = nq * hq;
    for (b, kv) in full_kv.iter().enumerate() {
        let partial = sdp_oracle(
            &q64[b * per_seq_q..(b + 1) * per_seq_q],
            1,
            nq,
            hq,
            d,
            &widen(kv.keys()),
            &widen(kv.values()),
            kv.len(),
            kv.kv_heads(),
            scale,
            None,
        );
        out[b * per_seq_q..(b + 1) * per_seq_q].copy_from_slice(&partial.out);
        lse[b * per_seq_lse..(b + 1) * per_seq_lse].copy_from_slice(&partial.lse);
    }
    OracleAttention { out, lse }
}

/// From-scratch full forward pass over one token sequence in `f64`,
/// re-deriving every step (normalization, rotary angles, causal attention,
/// gated MLP) with plain loops. Returns the final-layer hidden states
/// `[len, model_dim]` and the logits `[len, vocab]` at every position.
pub fn monolithic_forward_oracle<T: Scalar>(
    weights: &crate::model::ModelWeights<T>,
    tokens: &[u32],
) -> (Vec<f64>, Vec<f64>) {
    let cfg = &weights.config;
    let (dm, hq, hkv) = (cfg.model_dim, cfg.num_query_heads, cfg.num_kv_heads);
    let d = cfg.head_dim();
    let group = hq / hkv;
    let len = tokens.len();
    let scale = 1.0 / (d as f64).sqrt();
    let embedding = widen(weights.embedding.data());
    let unembedding = widen(weights.unembedding.data());

    let rmsnorm = |row: &[f64], gain: &[f64]| -> Vec<f64> {
        let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + crate::model::RMS_NORM_EPS).sqrt();
        row.iter().zip(gain).map(|(x, g)| x * inv * g).collect()
    };
    let matvec = |row: &[f64], m: &[f64], rows: usize, cols: usize| -> Vec<f64> {
        assert_eq!(row.len(), rows);
        let mut out = vec![0.0; cols];
        for (i, &x) in row.iter().enumerate() {
            for j in 0..cols {
                out[j] += x * m[i * cols + j];
            }
        }
        out
    };
    let rope = |row: &mut [f64], heads: usize, pos: usize| {
        if !cfg.rope_enabled {
            return;
        }
        for h in 0..heads {
            for j in 0..d / 2 {
                let freq = cfg.rope_base.powf(-2.0 * j as f64 / d as f64);
                let angle = pos as f64 * freq;
                let (sin, cos) = (angle.sin(), angle.cos());
                let x0 = row[h * d + 2 * j];
                let x1 = row[h * d + 2 * j + 1];
                row[h * d + 2 * j] = x0 * cos - x1 * sin;
                row[h * d + 2 * j + 1] = x0 * sin + x1 * cos;
            }
        }
    };

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| embedding[t as usize * dm..(t as usize + 1) * dm].to_vec())
        .collect();

    for layer in &weights.layers {
        let wq = widen(layer.wq.data());
        let wk = widen(layer.wk.data());
        let wv = widen(layer.wv.data());
        let wo = widen(layer.wo.data());
        let w_gate_up = widen(layer.w_gate_up.data());
        let w_down = widen(layer.w_down.data());
        let attn_gain = widen(&layer.attn_norm_gain);
        let mlp_gain = widen(&layer.mlp_norm_gain);

        let mut qs = Vec::with_capacity(len);
        let mut ks = Vec::with_capacity(len);
        let mut vs = Vec::with_capacity(len);
        for (pos, row) in x.iter().enumerate() {
            let normed = rmsnorm(row, &attn_gain);
            let mut q = matvec(&normed, &wq, dm, hq * d);
            let mut k = matvec(&normed, &wk, dm, hkv * d);
            let v = matvec(&normed, &wv, dm, hkv * d);
            rope(&mut q, hq, pos);
            rope(&mut k, hkv, pos);
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }

        for (pos, row) in x.iter_mut().enumerate() {
            // Full causal attention over positions 0..=pos.
            let mut attn = vec![0.0; hq * d];
            for h in 0..hq {
                let g = h / group;
                let q_head = &qs[pos][h * d..(h + 1) * d];
                let scores: Vec<f64> = (0..=pos)
                    .map(|j| {
                        let k_head = &ks[j][g * d..(g + 1) * d];
                        q_head
                            .iter()
                            .zip(k_head)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - max).exp() / denom;
                    let v_head = &vs[j][g * d..(g + 1) * d];
                    for dd in 0..d {
                        attn[h * d + dd] += w * v_head[dd];
                    }
                }
            }
            let proj = matvec(&attn, &wo, hq * d, dm);
            for (a, b) in row.iter_mut().zip(proj) {
                *a += b;
            }
            let normed = rmsnorm(row, &mlp_gain);
            let gate_up = matvec(&normed, &w_gate_up, dm, 2 * cfg.mlp_hidden);
            let gated: Vec<f64> = (0..cfg.mlp_hidden)
                .map(|i| {
                    let g = gate_up[i];
                    g / (1.0 + (-g).exp()) * gate_up[cfg.mlp_hidden + i]
                })
                .collect();
            let down = matvec(&gated, &w_down, cfg.mlp_hidden, dm);
            for (a, b) in row.iter_mut().zip(down) {
                *a += b;
            }
        }
    }

    let final_gain = widen(&weights.final_norm_gain);
    let mut hidden = Vec::with_capacity(len * dm);
    let mut logits = Vec::with_capacity(len * cfg.vocab_size);
    for row in &x {
        hidden.extend_from_slice(row);
        let normed = rmsnorm(row, &final_gain);
        logits.extend(matvec(&normed, &unembedding, dm, cfg.vocab_size));
    }
    (hidden, logits)
}

/// Largest absolute difference between a production result and an oracle
/// result, both flattened.
pub fn max_abs_diff<T: Scalar>(got: &[T], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want.iter())
        .map(|(g, w)| (g.to_f64().unwrap() - w).abs())
        .fold(0.0, f64::max)
}

/// Largest relative difference, with an absolute floor to tolerate values
/// near zero.
pub fn max_rel_diff<T: Scalar>(got: &[T], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want.iter())
        .map(|(g, w)| {
            let g = g.to_f64().unwrap();
            if g == f64::NEG_INFINITY && *w == f64::NEG_INFINITY {
                0.0
            } else {
                (g - w).abs() / w.abs().max(1.0)
            }
        })
        .fold(0.0, f64::max)
}
