//! Timing harness, configuration sweeps, cost-model estimator, and result
//! emission.
//!
//! Each benchmark cell builds fresh seeded inputs, runs `warmup_iters`
//! untimed iterations followed by `timed_iters` timed ones, and reports the
//! median as the primary statistic. One cell runs at a time; the measured
//! operation is free to use internal parallelism. Cells whose inputs exceed
//! the memory budget are pre-checked by the cost estimator and marked
//! infeasible ("x") instead of attempted. No cache flushing happens between
//! iterations; at the batch and prefix sizes the performance criteria
//! grade, the per-sequence working set exceeds any last-level cache.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{KeyValueSegment, KvView, QueryBlock};
use crate::engine::{hydragen_attention, per_sequence_attention_flat, EngineKind};
use crate::error::{Error, Result};
use crate::model::{generate, init_model, ModelConfig, PromptNode};
use crate::numerics::Scalar;
use crate::sharing::{seeded_segment_with, TreeSpec};

/// Axes and protocol for one sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub batch_sizes: Vec<usize>,
    pub prefix_lengths: Vec<usize>,
    pub suffix_lengths: Vec<usize>,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub engines: Vec<EngineKind>,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
    /// Completion length for end-to-end and tree runs.
    pub num_new_tokens: usize,
    /// Cells estimated to need more than this are marked "x" instead of run.
    pub memory_budget_bytes: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            batch_sizes: vec![16, 64, 256],
            prefix_lengths: vec![2048],
            suffix_lengths: vec![64],
            num_query_heads: 8,
            num_kv_heads: 1,
            head_dim: 64,
            engines: vec![EngineKind::Hydragen, EngineKind::PerSequence],
            warmup_iters: 3,
            timed_iters: 10,
            seed: 0,
            num_new_tokens: 32,
            memory_budget_bytes: 4 << 30,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty()
            || self.prefix_lengths.is_empty()
            || self.suffix_lengths.is_empty()
            || self.engines.is_empty()
        {
            return Err(Error::BenchConfig(
                "batch_sizes, prefix_lengths, suffix_lengths and engines must be non-empty"
                    .into(),
            ));
        }
        if self.timed_iters == 0 || self.warmup_iters == 0 {
            return Err(Error::BenchConfig("iteration counts must be >= 1".into()));
        }
        if self.num_new_tokens == 0 {
            return Err(Error::BenchConfig("num_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Median/mean/std over the timed iterations of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub median_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty());
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let median_s = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean_s = sorted.iter().sum::<f64>() / n as f64;
        let var = sorted.iter().map(|x| (x - mean_s).powi(2)).sum::<f64>() / n as f64;
        TimingStats {
            median_s,
            mean_s,
            std_s: var.sqrt(),
        }
    }
}

/// One timed measurement with its full configuration. `stats == None`
/// marks a cell that failed the memory pre-check.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub benchmark: String,
    pub engine: String,
    pub batch: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub hq: usize,
    pub hkv: usize,
    pub head_dim: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    pub stats: Option<TimingStats>,
    pub tokens_per_s: Option<f64>,
    pub speedup: Option<f64>,
}

impl BenchRecord {
    fn sort_key(&self) -> (String, String, usize, usize, usize, usize, usize, usize) {
        (
            self.benchmark.clone(),
            self.engine.clone(),
            self.batch,
            self.prefix_len,
            self.suffix_len,
            self.hq,
            self.hkv,
            self.head_dim,
        )
    }

    fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{}", v)).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.benchmark,
            self.engine,
            self.batch,
            self.prefix_len,
            self.suffix_len,
            self.hq,
            self.hkv,
            self.head_dim,
            self.warmup,
            self.iters,
            self.seed,
            opt(self.stats.map(|s| s.median_s)),
            opt(self.stats.map(|s| s.mean_s)),
            opt(self.stats.map(|s| s.std_s)),
            opt(self.tokens_per_s),
            opt(self.speedup),
        )
    }
}

pub const CSV_HEADER: &str = "benchmark,engine,batch,prefix_len,suffix_len,hq,hkv,head_dim,warmup,iters,seed,median_s,mean_s,std_s,tokens_per_s,speedup";

/// Renders records as CSV: the exact header, then one row per record in
/// lexicographic configuration order. Non-applicable fields stay empty.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for record in sorted {
        out.push_str(&record.csv_row());
        out.push('\n');
    }
    out
}

/// Writes [`records_to_csv`] output to `path`.
pub fn emit_results(records: &[BenchRecord], path: &Path) -> Result<()> {
    let body = records_to_csv(records);
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(body.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Arithmetic cost of one decode-shaped attention call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub flops: u64,
    pub bytes_read: u64,
    pub arithmetic_intensity: f64,
    /// Portion of `bytes_read` spent on shared-prefix keys and values.
    pub prefix_read_bytes: u64,
}

/// Attention FLOPs and memory traffic for one step.
///
/// FLOPs count the score products and the weighted value sums
/// (`4 * B * Nq * Hq * d * (prefix + suffix)`) and are identical for both
/// engines - the decomposition is exact, not an approximation. The engines
/// differ only in prefix traffic: per-sequence attention reads the prefix KV
/// once per sequence, the decomposed engine once per batch.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost(
    batch: usize,
    num_queries: usize,
    prefix: usize,
    suffix: usize,
    hq: usize,
    hkv: usize,
    head_dim: usize,
    bytes_per_element: usize,
    engine: EngineKind,
) -> CostEstimate {
    let (b, nq, p, s) = (batch as u64, num_queries as u64, prefix as u64, suffix as u64);
    let (hq, hkv, d, bpe) = (
        hq as u64,
        hkv as u64,
        head_dim as u64,
        bytes_per_element as u64,
    );
    if engine == EngineKind::NoAttention {
        return CostEstimate {
            flops: 0,
            bytes_read: 0,
            arithmetic_intensity: 0.0,
            prefix_read_bytes: 0,
        };
    }
    let flops = 4 * b * nq * hq * d * (p + s);
    let prefix_reads = match engine {
        EngineKind::PerSequence => b,
        _ => 1,
    };
    let prefix_read_bytes = 2 * p * hkv * d * bpe * prefix_reads;
    let suffix_read_bytes = 2 * s * hkv * d * bpe * b;
    let query_output_bytes = 2 * b * nq * hq * d * bpe;
    let bytes_read = prefix_read_bytes + suffix_read_bytes + query_output_bytes;
    CostEstimate {
        flops,
        bytes_read,
        arithmetic_intensity: flops as f64 / bytes_read as f64,
        prefix_read_bytes,
    }
}

/// Runs `op` for `warmup` untimed then `iters` timed iterations.
pub fn time_iterations(warmup: usize, iters: usize, mut op: impl FnMut()) -> TimingStats {
    for _ in 0..warmup {
        op();
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let started = Instant::now();
        op();
        samples.push(started.elapsed().as_secs_f64());
    }
    TimingStats::from_samples(&samples)
}

fn cell_stream(tag: &str, batch: usize, prefix: usize, suffix: usize) -> u64 {
    let mut hasher = DefaultHasher::new();
    (tag, batch, prefix, suffix).hash(&mut hasher);
    hasher.finish()
}

fn log_cell(benchmark: &str, batch: usize, prefix: usize, suffix: usize, engine: &str, median: Option<f64>) {
    match median {
        Some(m) => eprintln!(
            "cell {} B={} P={} S={} engine={} median={}",
            benchmark, batch, prefix, suffix, engine, m
        ),
        None => eprintln!(
            "cell {} B={} P={} S={} engine={} median=x",
            benchmark, batch, prefix, suffix, engine
        ),
    }
}

/// Working-set estimate used by the "x" pre-check for attention cells:
/// dominated by the per-sequence KV copies plus the merged score matrix.
fn attention_cell_bytes<T: Scalar>(batch: usize, prefix: usize, suffix: usize, hkv: usize, hq: usize, d: usize) -> u64 {
    let bpe = T::BYTES as u64;
    let (b, p, s) = (batch as u64, prefix as u64, suffix as u64);
    let per_seq_copies = 2 * b * (p + s) * hkv as u64 * d as u64 * bpe;
    let shared = 2 * (p + b * s) * hkv as u64 * d as u64 * bpe;
    let merged_scores = b * hq as u64 * p * bpe;
    per_seq_copies + shared + merged_scores
}

/// Decode-shaped attention microbenchmark over the configured grid.
///
/// Per cell the inputs are built once from the seed, then each engine's
/// attention op alone is timed. The decomposed engine's record carries its
/// speedup over the per-sequence baseline at the identical configuration.
pub fn run_attention_sweep<T: Scalar>(cfg: &SweepConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    for engine in &cfg.engines {
        if *engine == EngineKind::NoAttention {
            return Err(Error::BenchConfig(
                "the attention sweep times the attention op; no-attention has nothing to time"
                    .into(),
            ));
        }
    }
    let (hq, hkv, d) = (cfg.num_query_heads, cfg.num_kv_heads, cfg.head_dim);
    let attn_cfg = crate::attention::AttentionConfig::<T>::new(d, hq, hkv)?;
    let mut records = Vec::new();

    for &batch in &cfg.batch_sizes {
        for &prefix_len in &cfg.prefix_lengths {
            for &suffix_len in &cfg.suffix_lengths {
                let make_record = |engine: &str, stats: Option<TimingStats>, speedup| BenchRecord {
                    benchmark: "attn".into(),
                    engine: engine.into(),
                    batch,
                    prefix_len,
                    suffix_len,
                    hq,
                    hkv,
                    head_dim: d,
                    warmup: cfg.warmup_iters,
                    iters: cfg.timed_iters,
                    seed: cfg.seed,
                    stats,
                    tokens_per_s: None,
                    speedup,
                };

                let needed = attention_cell_bytes::<T>(batch, prefix_len, suffix_len, hkv, hq, d);
                if needed > cfg.memory_budget_bytes {
                    for engine in &cfg.engines {
                        log_cell("attn", batch, prefix_len, suffix_len, engine.name(), None);
                        records.push(make_record(engine.name(), None, None));
                    }
                    continue;
                }

                // Fresh seeded inputs for this cell.
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(cell_stream("attn", batch, prefix_len, suffix_len));
                let q_data: Vec<T> = (0..batch * hq * d)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
                    .collect();
                let q = QueryBlock::from_data(batch, 1, hq, d, q_data)?;
                let prefix = seeded_segment_with::<T>(&mut rng, prefix_len, hkv, d);
                let suffixes: Vec<KeyValueSegment<T>> = (0..batch)
                    .map(|_| seeded_segment_with::<T>(&mut rng, suffix_len, hkv, d))
                    .collect();
                // The baseline owns one redundant full copy per sequence,
                // mirroring storage without sharing.
                let flats: Vec<KeyValueSegment<T>> = suffixes
                    .iter()
                    .map(|suffix| {
                        KeyValueSegment::concat(&[&prefix, suffix]).expect("same geometry")
                    })
                    .collect();
                let flat_views: Vec<KvView<'_, T>> = flats.iter().map(|f| f.view()).collect();

                // Warm every engine first, then interleave the timed
                // iterations round-robin so ambient load (cache pressure,
                // bandwidth contention from neighbours) hits all engines
                // alike instead of skewing whichever ran last.
                let run_engine = |engine: EngineKind| match engine {
                    EngineKind::Hydragen => {
                        black_box(
                            hydragen_attention(&q, &prefix, &suffixes, &attn_cfg)
                                .expect("shapes fixed by builder"),
                        );
                    }
                    EngineKind::PerSequence => {
                        black_box(
                            per_sequence_attention_flat(&q, &flat_views, &attn_cfg)
                                .expect("shapes fixed by builder"),
                        );
                    }
                    EngineKind::NoAttention => unreachable!("rejected above"),
                };
                for _ in 0..cfg.warmup_iters {
                    for &engine in &cfg.engines {
                        run_engine(engine);
                    }
                }
                let mut samples: Vec<Vec<f64>> =
                    vec![Vec::with_capacity(cfg.timed_iters); cfg.engines.len()];
                for _ in 0..cfg.timed_iters {
                    for (slot, &engine) in cfg.engines.iter().enumerate() {
                        let started = Instant::now();
                        run_engine(engine);
                        samples[slot].push(started.elapsed().as_secs_f64());
                    }
                }
                let mut cell_stats: Vec<(EngineKind, TimingStats)> = Vec::new();
                for (slot, &engine) in cfg.engines.iter().enumerate() {
                    let stats = TimingStats::from_samples(&samples[slot]);
                    log_cell(
                        "attn",
                        batch,
                        prefix_len,
                        suffix_len,
                        engine.name(),
                        Some(stats.median_s),
                    );
                    cell_stats.push((engine, stats));
                }

                let baseline = cell_stats
                    .iter()
                    .find(|(e, _)| *e == EngineKind::PerSequence)
                    .map(|(_, s)| s.median_s);
                for (engine, stats) in cell_stats {
                    let speedup = match engine {
                        EngineKind::Hydragen => baseline.map(|b| b / stats.median_s),
                        EngineKind::PerSequence => Some(1.0),
                        EngineKind::NoAttention => None,
                    };
                    records.push(make_record(engine.name(), Some(stats), speedup));
                }
            }
        }
    }
    Ok(records)
}

fn seeded_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Flat-prefix prompt workload for the end-to-end sweep: one shared span of
/// `prefix_len` tokens and `batch` unshared tails of `suffix_len` tokens.
pub fn flat_prompt_workload(
    seed: u64,
    batch: usize,
    prefix_len: usize,
    suffix_len: usize,
    vocab: usize,
) -> PromptNode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell_stream("e2e-prompt", batch, prefix_len, suffix_len));
    let shared = seeded_tokens(&mut rng, prefix_len, vocab);
    let tails = (0..batch)
        .map(|_| seeded_tokens(&mut rng, suffix_len, vocab))
        .collect();
    PromptNode::flat(shared, tails)
}

fn flat_kv_bytes(model: &ModelConfig, batch: usize, total_len: usize, bpe: usize) -> u64 {
    2 * batch as u64
        * total_len as u64
        * model.num_kv_heads as u64
        * model.head_dim() as u64
        * bpe as u64
        * model.num_layers as u64
}

/// End-to-end decoding throughput over the configured grid.
///
/// Each iteration runs a full greedy generation; throughput uses
/// decode-only time (time to the first token, which includes prefill, is
/// subtracted from the total). Speedups are relative to the per-sequence
/// baseline; the no-attention engine's records give the ceiling fraction.
pub fn run_e2e_sweep<T: Scalar>(cfg: &SweepConfig, model_cfg: &ModelConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let weights = init_model::<T>(model_cfg)?;
    let mut records = Vec::new();

    for &batch in &cfg.batch_sizes {
        for &prefix_len in &cfg.prefix_lengths {
            for &suffix_len in &cfg.suffix_lengths {
                let make_record = |engine: &str,
                                   stats: Option<TimingStats>,
                                   tokens_per_s,
                                   speedup| BenchRecord {
                    benchmark: "e2e".into(),
                    engine: engine.into(),
                    batch,
                    prefix_len,
                    suffix_len,
                    hq: model_cfg.num_query_heads,
                    hkv: model_cfg.num_kv_heads,
                    head_dim: model_cfg.head_dim(),
                    warmup: cfg.warmup_iters,
                    iters: cfg.timed_iters,
                    seed: cfg.seed,
                    stats,
                    tokens_per_s,
                    speedup,
                };

                let total_len = prefix_len + suffix_len + cfg.num_new_tokens;
                let needed = flat_kv_bytes(model_cfg, batch, total_len, T::BYTES);
                if needed > cfg.memory_budget_bytes {
                    for engine in &cfg.engines {
                        log_cell("e2e", batch, prefix_len, suffix_len, engine.name(), None);
                        records.push(make_record(engine.name(), None, None, None));
                    }
                    continue;
                }

                let layout = flat_prompt_workload(
                    cfg.seed,
                    batch,
                    prefix_len,
                    suffix_len,
                    model_cfg.vocab_size,
                );

                let runs: Vec<(&PromptNode, EngineKind)> =
                    cfg.engines.iter().map(|&e| (&layout, e)).collect();
                let stats_per_engine = time_decode_interleaved(
                    &weights,
                    &runs,
                    cfg.num_new_tokens,
                    cfg.warmup_iters,
                    cfg.timed_iters,
                )?;
                let mut cell: Vec<(EngineKind, TimingStats)> = Vec::new();
                for (&engine, stats) in cfg.engines.iter().zip(stats_per_engine) {
                    log_cell(
                        "e2e",
                        batch,
                        prefix_len,
                        suffix_len,
                        engine.name(),
                        Some(stats.median_s),
                    );
                    cell.push((engine, stats));
                }

                let tps = |stats: &TimingStats| {
                    (batch * cfg.num_new_tokens) as f64 / stats.median_s
                };
                let baseline_tps = cell
                    .iter()
                    .find(|(e, _)| *e == EngineKind::PerSequence)
                    .map(|(_, s)| tps(s));
                for (engine, stats) in cell {
                    let throughput = tps(&stats);
                    let speedup = baseline_tps.map(|b| throughput / b);
                    records.push(make_record(
                        engine.name(),
                        Some(stats),
                        Some(throughput),
                        speedup,
                    ));
                }
            }
        }
    }
    Ok(records)
}

/// Runs full generations for several (layout, engine) variants, timing the
/// decode-only portion of each. Timed rounds alternate across the variants
/// so ambient load lands on all of them alike.
fn time_decode_interleaved<T: Scalar>(
    weights: &crate::model::ModelWeights<T>,
    runs: &[(&PromptNode, EngineKind)],
    num_new_tokens: usize,
    warmup: usize,
    iters: usize,
) -> Result<Vec<TimingStats>> {
    for _ in 0..warmup {
        for &(layout, engine) in runs {
            black_box(generate(weights, layout, num_new_tokens, engine)?);
        }
    }
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(iters); runs.len()];
    for _ in 0..iters {
        for (slot, &(layout, engine)) in runs.iter().enumerate() {
            let output = generate(weights, layout, num_new_tokens, engine)?;
            samples[slot].push(output.decode_seconds);
        }
    }
    Ok(samples
        .iter()
        .map(|s| TimingStats::from_samples(s))
        .collect())
}

/// Prompt-sharing workload for the tree benchmark: a nested spec of
/// segment lengths (the same `(len, children | num_sequences)` records the
/// sharing tree is built from) plus an unshared prompt tail per sequence.
///
/// The default is the two-level shape: a globally shared span over
/// per-problem spans, each carrying its candidate sequences.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeWorkload {
    pub spec: TreeSpec,
    pub tail_len: usize,
}

impl Default for TreeWorkload {
    fn default() -> Self {
        TreeWorkload::two_level(512, 8, 128, 16, 2)
    }
}

impl TreeWorkload {
    /// Root span over `num_problems` problem spans with
    /// `candidates_per_problem` sequences each.
    pub fn two_level(
        root_len: usize,
        num_problems: usize,
        problem_len: usize,
        candidates_per_problem: usize,
        tail_len: usize,
    ) -> Self {
        TreeWorkload {
            spec: TreeSpec {
                len: root_len,
                num_sequences: 0,
                children: (0..num_problems)
                    .map(|_| TreeSpec::flat(problem_len, candidates_per_problem))
                    .collect(),
            },
            tail_len,
        }
    }

    pub fn batch(&self) -> usize {
        self.spec.total_sequences()
    }

    pub fn root_len(&self) -> usize {
        self.spec.len
    }

    /// With fewer than two subtrees there is nothing below the root to
    /// share, so the two variants coincide structurally.
    pub fn is_degenerate(&self) -> bool {
        self.spec.children.len() < 2
    }

    /// Deterministic token content: one stream per spec node (breadth-first
    /// order, matching tree construction) and one per sequence tail, so
    /// both layout variants carry bit-identical prompts.
    fn assign_tokens(&self, seed: u64, vocab: usize) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
        let mut node_tokens = Vec::new();
        let mut num_leaf_sequences = 0usize;
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back(&self.spec);
        while let Some(node) = frontier.pop_front() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(cell_stream("tree-node-tokens", node_tokens.len(), 0, 0));
            node_tokens.push(seeded_tokens(&mut rng, node.len, vocab));
            num_leaf_sequences += node.num_sequences;
            frontier.extend(node.children.iter());
        }
        let tails = (0..num_leaf_sequences)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(cell_stream("tree-tail-tokens", i, 0, 0));
                seeded_tokens(&mut rng, self.tail_len, vocab)
            })
            .collect();
        (node_tokens, tails)
    }

    /// Sharing at every level: the full spec becomes prompt tree nodes.
    pub fn full_tree_layout(&self, seed: u64, vocab: usize) -> PromptNode {
        let (node_tokens, tails) = self.assign_tokens(seed, vocab);
        // Breadth-first reconstruction mirroring the node numbering.
        #[derive(Default)]
        struct Slot {
            tokens: Vec<u32>,
            children: Vec<usize>,
            num_sequences: usize,
            first_sequence: usize,
        }
        let mut slots: Vec<Slot> = Vec::new();
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back((&self.spec, usize::MAX));
        let mut next_sequence = 0usize;
        while let Some((spec, parent)) = frontier.pop_front() {
            let idx = slots.len();
            slots.push(Slot {
                tokens: node_tokens[idx].clone(),
                children: Vec::new(),
                num_sequences: spec.num_sequences,
                first_sequence: next_sequence,
            });
            next_sequence += spec.num_sequences;
            if parent != usize::MAX {
                slots[parent].children.push(idx);
            }
            frontier.extend(spec.children.iter().map(|c| (c, idx)));
        }
        fn realize(slots: &[Slot], tails: &[Vec<u32>], idx: usize) -> PromptNode {
            let slot = &slots[idx];
            if slot.children.is_empty() {
                PromptNode::leaf(
                    slot.tokens.clone(),
                    (0..slot.num_sequences)
                        .map(|i| tails[slot.first_sequence + i].clone())
                        .collect(),
                )
            } else {
                PromptNode::interior(
                    slot.tokens.clone(),
                    slot.children
                        .iter()
                        .map(|&c| realize(slots, tails, c))
                        .collect(),
                )
            }
        }
        realize(&slots, &tails, 0)
    }

    /// Sharing at the root only: every sequence's below-root path segments
    /// are duplicated into its prompt tail, token for token.
    pub fn single_level_layout(&self, seed: u64, vocab: usize) -> PromptNode {
        let (node_tokens, tails) = self.assign_tokens(seed, vocab);
        // Walk leaves in the same breadth-first order and splice each
        // sequence's below-root path in front of its tail.
        let mut flat_tails: Vec<Vec<u32>> = vec![Vec::new(); tails.len()];
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back((&self.spec, Vec::<usize>::new()));
        let mut node_index = 0usize;
        let mut sequence = 0usize;
        while let Some((spec, path_below_root)) = frontier.pop_front() {
            let idx = node_index;
            node_index += 1;
            if spec.children.is_empty() {
                for _ in 0..spec.num_sequences {
                    let mut tail = Vec::new();
                    for &p in &path_below_root {
                        tail.extend_from_slice(&node_tokens[p]);
                    }
                    if idx != 0 {
                        tail.extend_from_slice(&node_tokens[idx]);
                    }
                    tail.extend_from_slice(&tails[sequence]);
                    flat_tails[sequence] = tail;
                    sequence += 1;
                }
            } else {
                for child in &spec.children {
                    let mut child_path = path_below_root.clone();
                    if idx != 0 {
                        child_path.push(idx);
                    }
                    frontier.push_back((child, child_path));
                }
            }
        }
        PromptNode::flat(node_tokens[0].clone(), flat_tails)
    }

    /// Longest per-sequence unshared prompt under root-only sharing.
    pub fn max_unshared_prompt_len(&self) -> usize {
        fn walk(spec: &TreeSpec, below_root: usize, is_root: bool) -> usize {
            let here = if is_root { 0 } else { spec.len };
            if spec.children.is_empty() {
                below_root + here
            } else {
                spec.children
                    .iter()
                    .map(|c| walk(c, below_root + here, false))
                    .max()
                    .unwrap_or(below_root + here)
            }
        }
        walk(&self.spec, 0, true) + self.tail_len
    }
}

/// Times single-level sharing (below-root spans duplicated into prompt
/// tails) against tree attention over the full sharing spec, at equal
/// batch size. The two-level record's speedup column is the
/// single-level/two-level time ratio.
pub fn run_tree_bench<T: Scalar>(
    workload: &TreeWorkload,
    cfg: &SweepConfig,
    model_cfg: &ModelConfig,
) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let weights = init_model::<T>(model_cfg)?;
    let batch = workload.batch();
    let variants: [(&str, PromptNode, usize); 2] = [
        (
            "single-level",
            workload.single_level_layout(cfg.seed, model_cfg.vocab_size),
            workload.max_unshared_prompt_len(),
        ),
        (
            "two-level",
            workload.full_tree_layout(cfg.seed, model_cfg.vocab_size),
            workload.tail_len,
        ),
    ];

    let runs: Vec<(&PromptNode, EngineKind)> = variants
        .iter()
        .map(|(_, layout, _)| (layout, EngineKind::Hydragen))
        .collect();
    let stats_per_variant = time_decode_interleaved(
        &weights,
        &runs,
        cfg.num_new_tokens,
        cfg.warmup_iters,
        cfg.timed_iters,
    )?;

    let mut records = Vec::new();
    let mut single_median = None;
    for ((name, _, unshared_prompt_len), stats) in variants.iter().zip(stats_per_variant) {
        log_cell(
            "tree",
            batch,
            workload.root_len(),
            *unshared_prompt_len,
            name,
            Some(stats.median_s),
        );
        if *name == "single-level" {
            single_median = Some(stats.median_s);
        }
        let speedup = match *name {
            "two-level" => single_median.map(|s| s / stats.median_s),
            _ => Some(1.0),
        };
        records.push(BenchRecord {
            benchmark: "tree".into(),
            engine: (*name).into(),
            batch,
            prefix_len: workload.root_len(),
            suffix_len: *unshared_prompt_len,
            hq: model_cfg.num_query_heads,
            hkv: model_cfg.num_kv_heads,
            head_dim: model_cfg.head_dim(),
            warmup: cfg.warmup_iters,
            iters: cfg.timed_iters,
            seed: cfg.seed,
            stats: Some(stats),
            tokens_per_s: Some((batch * cfg.num_new_tokens) as f64 / stats.median_s),
            speedup,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_hand_example() {
        // B=2, prefix=4, Hq=Hkv=1, d=2, 4-byte elements, Nq=1.
        let per_seq = estimate_cost(2, 1, 4, 0, 1, 1, 2, 4, EngineKind::PerSequence);
        let hydragen = estimate_cost(2, 1, 4, 0, 1, 1, 2, 4, EngineKind::Hydragen);
        assert_eq!(per_seq.prefix_read_bytes, 128);
        assert_eq!(hydragen.prefix_read_bytes, 64);
        assert_eq!(per_seq.flops, hydragen.flops);
        // Prefix-term intensity is exactly 2x for the shared read.
        assert_eq!(
            per_seq.flops as f64 / per_seq.prefix_read_bytes as f64 * 2.0,
            hydragen.flops as f64 / hydragen.prefix_read_bytes as f64
        );
    }

    #[test]
    fn cost_model_no_prefix_is_engine_invariant() {
        let a = estimate_cost(8, 1, 0, 32, 8, 2, 16, 4, EngineKind::PerSequence);
        let b = estimate_cost(8, 1, 0, 32, 8, 2, 16, 4, EngineKind::Hydragen);
        assert_eq!(a, b);
    }

    #[test]
    fn cost_model_prefix_ratio_is_batch() {
        for &(b, p, s, hq, hkv, d) in &[
            (1usize, 1usize, 1usize, 1usize, 1usize, 1usize),
            (7, 193, 11, 8, 2, 64),
            (256, 2048, 64, 8, 1, 128),
        ] {
            let per_seq = estimate_cost(b, 1, p, s, hq, hkv, d, 4, EngineKind::PerSequence);
            let hydragen = estimate_cost(b, 1, p, s, hq, hkv, d, 4, EngineKind::Hydragen);
            assert_eq!(per_seq.prefix_read_bytes, hydragen.prefix_read_bytes * b as u64);
            assert_eq!(per_seq.flops, hydragen.flops);
            let want = per_seq.flops as f64 / per_seq.bytes_read as f64;
            assert_eq!(per_seq.arithmetic_intensity, want);
        }
    }

    #[test]
    fn timing_stats_median_mean_std() {
        let stats = TimingStats::from_samples(&[3.0, 1.0, 2.0]);
        assert_eq!(stats.median_s, 2.0);
        assert_eq!(stats.mean_s, 2.0);
        assert!((stats.std_s - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let even = TimingStats::from_samples(&[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(even.median_s, 2.5);
    }

    #[test]
    fn csv_header_and_empty_fields() {
        let record = BenchRecord {
            benchmark: "attn".into(),
            engine: "hydragen".into(),
            batch: 4,
            prefix_len: 16,
            suffix_len: 8,
            hq: 8,
            hkv: 1,
            head_dim: 64,
            warmup: 3,
            iters: 10,
            seed: 42,
            stats: None,
            tokens_per_s: None,
            speedup: None,
        };
        let csv = records_to_csv(&[record]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "attn,hydragen,4,16,8,8,1,64,3,10,42,,,,,");
        // Zero records produce a header-only file.
        assert_eq!(records_to_csv(&[]), format!("{}\n", CSV_HEADER));
    }

    #[test]
    fn csv_rows_sort_by_configuration() {
        let mk = |engine: &str, batch| BenchRecord {
            benchmark: "attn".into(),
            engine: engine.into(),
            batch,
            prefix_len: 1,
            suffix_len: 1,
            hq: 1,
            hkv: 1,
            head_dim: 1,
            warmup: 1,
            iters: 1,
            seed: 0,
            stats: None,
            tokens_per_s: None,
            speedup: None,
        };
        let csv = records_to_csv(&[mk("per-sequence", 8), mk("hydragen", 8), mk("hydragen", 2)]);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert!(rows[0].starts_with("attn,hydragen,2"));
        assert!(rows[1].starts_with("attn,hydragen,8"));
        assert!(rows[2].starts_with("attn,per-sequence,8"));
    }

    #[test]
    fn round_trip_parse_recovers_numeric_fields() {
        let record = BenchRecord {
            benchmark: "e2e".into(),
            engine: "hydragen".into(),
            batch: 64,
            prefix_len: 1024,
            suffix_len: 8,
            hq: 8,
            hkv: 2,
            head_dim: 32,
            warmup: 1,
            iters: 3,
            seed: 7,
            stats: Some(TimingStats {
                median_s: 0.125,
                mean_s: 0.25,
                std_s: 0.0625,
            }),
            tokens_per_s: Some(16384.0),
            speedup: Some(2.5),
        };
        let csv = records_to_csv(std::slice::from_ref(&record));
        let row = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 16);
        assert_eq!(fields[2].parse::<usize>().unwrap(), 64);
        assert_eq!(fields[11].parse::<f64>().unwrap(), 0.125);
        assert_eq!(fields[12].parse::<f64>().unwrap(), 0.25);
        assert_eq!(fields[13].parse::<f64>().unwrap(), 0.0625);
        assert_eq!(fields[14].parse::<f64>().unwrap(), 16384.0);
        assert_eq!(fields[15].parse::<f64>().unwrap(), 2.5);
    }

    #[test]
    fn attention_sweep_emits_one_record_per_engine_config() {
        let cfg = SweepConfig {
            batch_sizes: vec![1, 2],
            prefix_lengths: vec![0, 8],
            suffix_lengths: vec![4],
            num_query_heads: 2,
            num_kv_heads: 1,
            head_dim: 8,
            warmup_iters: 1,
            timed_iters: 2,
            ..SweepConfig::default()
        };
        let records = run_attention_sweep::<f32>(&cfg).unwrap();
        // 2 batches x 2 prefixes x 1 suffix x 2 engines
        assert_eq!(records.len(), 8);
        for r in &records {
            assert!(r.stats.is_some());
            if r.engine == "per-sequence" {
                assert_eq!(r.speedup, Some(1.0));
            } else {
                assert!(r.speedup.is_some());
            }
        }
    }

    #[test]
    fn attention_sweep_rejects_no_attention_engine() {
        let cfg = SweepConfig {
            engines: vec![EngineKind::NoAttention],
            ..SweepConfig::default()
        };
        assert!(run_attention_sweep::<f32>(&cfg).is_err());
    }

    #[test]
    fn degenerate_single_sequence_cell_has_speedup_near_one() {
        // With B=1 there is no sharing to exploit; the decomposition only
        // adds the combine, so the speedup hovers around 1.
        let cfg = SweepConfig {
            batch_sizes: vec![1],
            prefix_lengths: vec![512],
            suffix_lengths: vec![32],
            num_query_heads: 4,
            num_kv_heads: 1,
            head_dim: 32,
            warmup_iters: 2,
            timed_iters: 6,
            ..SweepConfig::default()
        };
        let records = run_attention_sweep::<f32>(&cfg).unwrap();
        let hydragen = records.iter().find(|r| r.engine == "hydragen").unwrap();
        let speedup = hydragen.speedup.unwrap();
        assert!(
            (0.2..5.0).contains(&speedup),
            "B=1 speedup should be near 1, got {}",
            speedup
        );
    }

    #[test]
    fn memory_precheck_marks_cells_infeasible() {
        let cfg = SweepConfig {
            batch_sizes: vec![4],
            prefix_lengths: vec![1024],
            suffix_lengths: vec![16],
            memory_budget_bytes: 1024,
            warmup_iters: 1,
            timed_iters: 1,
            ..SweepConfig::default()
        };
        let records = run_attention_sweep::<f32>(&cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.stats.is_none()));
    }

    #[test]
    fn sweep_records_reproducible_modulo_timing() {
        let cfg = SweepConfig {
            batch_sizes: vec![2],
            prefix_lengths: vec![16],
            suffix_lengths: vec![4],
            num_query_heads: 2,
            num_kv_heads: 2,
            head_dim: 4,
            warmup_iters: 1,
            timed_iters: 2,
            seed: 99,
            ..SweepConfig::default()
        };
        let mask = |records: &[BenchRecord]| {
            let mut masked = records.to_vec();
            for r in &mut masked {
                r.stats = None;
                r.tokens_per_s = None;
                r.speedup = None;
            }
            records_to_csv(&masked)
        };
        let a = run_attention_sweep::<f32>(&cfg).unwrap();
        let b = run_attention_sweep::<f32>(&cfg).unwrap();
        assert_eq!(mask(&a), mask(&b));
    }
}
