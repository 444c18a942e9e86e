//! Runtime verification suites: the decomposition identity, LSE
//! additivity, tree-fold invariance, prefill equivalence, and combine
//! stability, executed as a battery over seeded configuration grids.
//!
//! These are the same checks the test suite runs, packaged so `verify` can
//! execute them at either precision from the command line and report a
//! per-suite table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    combine_attention, combine_attention_unshifted, sdp_with_lse, AttentionConfig,
    AttentionResult, KeyValueSegment, KvView, QueryBlock,
};
use crate::engine::{
    hydragen_attention, per_sequence_attention_flat, tree_attention, EngineKind,
};
use crate::error::Result;
use crate::model::{decode_step, generate, init_model, prefill, DecodeState, ModelConfig, PromptNode};
use crate::numerics::Scalar;
use crate::oracle::{
    max_abs_diff, max_rel_diff, monolithic_attention_oracle, monolithic_forward_oracle,
};
use crate::sharing::{
    build_tree, flatten_full_kv, seeded_kv_filler, seeded_segment_with, DecodeBatch, SuffixCache,
    TreeSpec,
};

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Human description of the configuration with the largest deviation.
    pub worst_case: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub precision: &'static str,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    /// Renders the per-suite pass/fail table.
    pub fn render(&self) -> String {
        let mut out = format!("verification suites ({} precision)\n", self.precision);
        for suite in &self.suites {
            out.push_str(&format!(
                "  {:<22} {:>5} cases  max dev {:>12.3e}  tol {:>8.0e}  {}\n",
                suite.name,
                suite.cases,
                suite.max_deviation,
                suite.tolerance,
                if suite.passed() { "pass" } else { "FAIL" },
            ));
            if !suite.passed() {
                out.push_str(&format!("      worst: {}\n", suite.worst_case));
            }
        }
        out
    }
}

/// Per-config grid from the exactness criteria: batch, prefix and suffix
/// lengths crossed with head layouts (multi-head, multi-query, grouped) and
/// two head dims.
pub const GRID_BATCHES: [usize; 3] = [1, 4, 16];
pub const GRID_PREFIXES: [usize; 4] = [0, 1, 16, 256];
pub const GRID_SUFFIXES: [usize; 3] = [1, 8, 64];
pub const GRID_HEADS: [(usize, usize); 3] = [(8, 8), (8, 1), (4, 2)];
pub const GRID_HEAD_DIMS: [usize; 2] = [16, 64];

fn abs_tolerance<T: Scalar>() -> f64 {
    match T::PRECISION {
        "double" => 1e-12,
        _ => 1e-5,
    }
}

struct Worst {
    deviation: f64,
    description: String,
    cases: usize,
}

impl Worst {
    fn new() -> Self {
        Worst {
            deviation: 0.0,
            description: String::from("-"),
            cases: 0,
        }
    }

    fn update(&mut self, deviation: f64, describe: impl Fn() -> String) {
        self.cases += 1;
        if deviation > self.deviation {
            self.deviation = deviation;
            self.description = describe();
        }
    }

    fn into_report(self, name: &'static str, tolerance: f64) -> SuiteReport {
        SuiteReport {
            name,
            cases: self.cases,
            max_deviation: self.deviation,
            tolerance,
            worst_case: self.description,
        }
    }
}

struct GridCase<T: Scalar> {
    batch: usize,
    prefix_len: usize,
    suffix_len: usize,
    hq: usize,
    hkv: usize,
    head_dim: usize,
    cfg: AttentionConfig<T>,
    q: QueryBlock<T>,
    prefix: KeyValueSegment<T>,
    suffixes: Vec<KeyValueSegment<T>>,
    full: Vec<KeyValueSegment<T>>,
}

impl<T: Scalar> GridCase<T> {
    fn describe(&self) -> String {
        format!(
            "B={} prefix={} suffix={} Hq={} Hkv={} d={}",
            self.batch, self.prefix_len, self.suffix_len, self.hq, self.hkv, self.head_dim
        )
    }
}

fn grid_cases<T: Scalar>(seed: u64) -> Vec<GridCase<T>> {
    let mut cases = Vec::new();
    let mut stream = 0u64;
    for &batch in &GRID_BATCHES {
        for &prefix_len in &GRID_PREFIXES {
            for &suffix_len in &GRID_SUFFIXES {
                for &(hq, hkv) in &GRID_HEADS {
                    for &head_dim in &GRID_HEAD_DIMS {
                        stream += 1;
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(stream);
                        let cfg = AttentionConfig::<T>::new(head_dim, hq, hkv)
                            .expect("grid heads divide");
                        let q_data: Vec<T> = (0..batch * hq * head_dim)
                            .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
                            .collect();
                        let q = QueryBlock::from_data(batch, 1, hq, head_dim, q_data)
                            .expect("sized");
                        let prefix =
                            seeded_segment_with::<T>(&mut rng, prefix_len, hkv, head_dim);
                        let suffixes: Vec<KeyValueSegment<T>> = (0..batch)
                            .map(|_| seeded_segment_with::<T>(&mut rng, suffix_len, hkv, head_dim))
                            .collect();
                        let full: Vec<KeyValueSegment<T>> = suffixes
                            .iter()
                            .map(|s| KeyValueSegment::concat(&[&prefix, s]).expect("geometry"))
                            .collect();
                        cases.push(GridCase {
                            batch,
                            prefix_len,
                            suffix_len,
                            hq,
                            hkv,
                            head_dim,
                            cfg,
                            q,
                            prefix,
                            suffixes,
                            full,
                        });
                    }
                }
            }
        }
    }
    cases
}

/// Decomposed attention vs. the per-sequence engine vs. the direct
/// double-precision evaluation, over the whole grid.
pub fn suite_engine_equivalence<T: Scalar>(seed: u64) -> Result<SuiteReport> {
    let mut worst = Worst::new();
    for case in grid_cases::<T>(seed) {
        let hydra = hydragen_attention(&case.q, &case.prefix, &case.suffixes, &case.cfg)?;
        let views: Vec<KvView<'_, T>> = case.full.iter().map(|f| f.view()).collect();
        let per_seq = per_sequence_attention_flat(&case.q, &views, &case.cfg)?;
        let oracle = monolithic_attention_oracle(
            &case.q,
            &case.full,
            case.cfg.scale().to_f64().unwrap(),
        );
        let dev = max_abs_diff(hydra.out(), &oracle.out)
            .max(max_abs_diff(per_seq.out(), &oracle.out))
            .max(
                hydra
                    .out()
                    .iter()
                    .zip(per_seq.out())
                    .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
                    .fold(0.0, f64::max),
            );
        worst.update(dev, || case.describe());
    }
    Ok(worst.into_report("engine-equivalence", abs_tolerance::<T>()))
}

/// Combined LSE vs. the LSE of attention over the concatenated keys,
/// relative tolerance.
pub fn suite_lse_additivity<T: Scalar>(seed: u64) -> Result<SuiteReport> {
    let mut worst = Worst::new();
    for case in grid_cases::<T>(seed) {
        let hydra = hydragen_attention(&case.q, &case.prefix, &case.suffixes, &case.cfg)?;
        let oracle = monolithic_attention_oracle(
            &case.q,
            &case.full,
            case.cfg.scale().to_f64().unwrap(),
        );
        let dev = max_rel_diff(hydra.lse(), &oracle.lse);
        worst.update(dev, || case.describe());
    }
    Ok(worst.into_report("lse-additivity", 1e-6))
}

fn random_tree_spec(rng: &mut ChaCha8Rng, max_sequences: usize) -> TreeSpec {
    fn gen(rng: &mut ChaCha8Rng, depth_left: usize, budget: &mut usize, is_root: bool) -> TreeSpec {
        let len = if is_root {
            rng.gen_range(0..6)
        } else {
            rng.gen_range(1..6)
        };
        let make_leaf = depth_left == 0 || rng.gen_bool(0.35) || *budget <= 1;
        if make_leaf {
            let seqs = rng.gen_range(1..=(*budget).clamp(1, 4));
            *budget -= seqs.min(*budget);
            TreeSpec::flat(len.max(if is_root { 0 } else { 1 }), seqs)
        } else {
            let n_children = rng.gen_range(1..=3usize);
            TreeSpec {
                len,
                num_sequences: 0,
                children: (0..n_children)
                    .map(|_| gen(rng, depth_left - 1, budget, false))
                    .collect(),
            }
        }
    }
    let mut budget = max_sequences;
    gen(rng, 2, &mut budget, true)
}

/// Tree attention vs. the flattened-KV oracle on random trees up to depth
/// three, plus invariance of the per-sequence fold to re-bracketing and to
/// inter-sequence batching.
pub fn suite_tree_exactness<T: Scalar>(seed: u64, num_trees: usize) -> Result<SuiteReport> {
    let mut worst = Worst::new();
    for tree_idx in 0..num_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x7000 + tree_idx as u64);
        let spec = random_tree_spec(&mut rng, 32);
        let (hq, hkv, d) = (4usize, 2usize, 8usize);
        let cfg = AttentionConfig::<T>::new(d, hq, hkv)?;
        let tree = build_tree(&spec, seeded_kv_filler(seed ^ tree_idx as u64, hkv, d))?;
        let mut cache = SuffixCache::for_tree(&tree, hkv, d)?;
        let sequences: Vec<_> = tree.sequence_ids().collect();
        for &s in &sequences {
            let suffix_len = rng.gen_range(1..5);
            for _ in 0..suffix_len {
                let row: Vec<T> = (0..hkv * d)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
                    .collect();
                let vrow: Vec<T> = (0..hkv * d)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
                    .collect();
                cache.append_step_kv(s, &row, &vrow)?;
            }
        }
        let batch = DecodeBatch::new(sequences.iter().map(|&s| (s, 0)).collect())?;
        let q_data: Vec<T> = (0..batch.len() * hq * d)
            .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
            .collect();
        let q = QueryBlock::from_data(batch.len(), 1, hq, d, q_data)?;

        let result = tree_attention(&q, &tree, &cache, &batch, &cfg)?;
        let full: Vec<KeyValueSegment<T>> = sequences
            .iter()
            .map(|&s| flatten_full_kv(&tree, &cache, s))
            .collect::<Result<Vec<_>>>()?;
        let oracle = monolithic_attention_oracle(&q, &full, cfg.scale().to_f64().unwrap());
        let mut dev = max_abs_diff(result.out(), &oracle.out);

        // Re-bracketing invariance: fold each sequence's partials
        // left-to-right and right-to-left; both must match the batched
        // fold.
        for (slot, &s) in sequences.iter().enumerate() {
            let mut partials: Vec<AttentionResult<T>> = Vec::new();
            for node_id in tree.path_from_root(s)? {
                let node = tree.node(node_id);
                if node.kv.is_empty() {
                    continue;
                }
                partials.push(sdp_with_lse(q.sequence_view(slot), node.kv.view(), &cfg)?);
            }
            partials.push(sdp_with_lse(
                q.sequence_view(slot),
                cache.segment(s)?.view(),
                &cfg,
            )?);
            let left = partials
                .iter()
                .skip(1)
                .fold(partials[0].clone(), |acc, p| {
                    combine_attention(&acc, p).expect("shapes agree")
                });
            let right = partials
                .iter()
                .rev()
                .skip(1)
                .fold(partials.last().unwrap().clone(), |acc, p| {
                    combine_attention(p, &acc).expect("shapes agree")
                });
            let hq_d = hq * d;
            let batched_rows = &result.out()[slot * hq_d..(slot + 1) * hq_d];
            for ((l, r), b) in left.out().iter().zip(right.out()).zip(batched_rows) {
                let l = l.to_f64().unwrap();
                let r = r.to_f64().unwrap();
                let b = b.to_f64().unwrap();
                dev = dev.max((l - r).abs()).max((l - b).abs());
            }
        }
        worst.update(dev, || {
            format!("tree #{} ({} sequences)", tree_idx, sequences.len())
        });
    }
    Ok(worst.into_report("tree-exactness", abs_tolerance::<T>()))
}

/// Stabilized combine vs. the raw rescaling identity for bounded LSEs, and
/// finiteness where the raw form overflows.
pub fn suite_combine_stability<T: Scalar>(seed: u64) -> Result<SuiteReport> {
    let mut worst = Worst::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5000);
    // The 1e-12 agreement claim is a double-precision statement. In single
    // precision the raw route alone carries ~|lse| * eps of rounding
    // (about 4e-6 at |lse| = 30), so the bound sits above that noise.
    let tolerance = match T::PRECISION {
        "double" => 1e-12,
        _ => 1e-4,
    };
    for case_idx in 0..500 {
        let mk = |rng: &mut ChaCha8Rng| {
            let out: Vec<T> = (0..8)
                .map(|_| T::from_f64_lossy(rng.gen_range(-2.0..2.0)))
                .collect();
            let lse: Vec<T> = (0..4)
                .map(|_| T::from_f64_lossy(rng.gen_range(-30.0..30.0)))
                .collect();
            AttentionResult::from_parts(out, lse, 1, 1, 4, 2).expect("sized")
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let stabilized = combine_attention(&a, &b)?;
        let raw = combine_attention_unshifted(&a, &b)?;
        let dev = stabilized
            .out()
            .iter()
            .zip(raw.out())
            .chain(stabilized.lse().iter().zip(raw.lse()))
            .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
            .fold(0.0, f64::max);
        worst.update(dev, || format!("case {}", case_idx));
    }

    // Where the raw exponentials overflow, the shifted form must stay
    // finite; count a failure as an infinite deviation.
    let huge = AttentionResult::from_parts(
        vec![T::one(); 2],
        vec![T::from_f64_lossy(1.0e4)],
        1,
        1,
        1,
        2,
    )
    .expect("sized");
    let other = AttentionResult::from_parts(
        vec![T::from_f64_lossy(3.0); 2],
        vec![T::from_f64_lossy(9.9e3)],
        1,
        1,
        1,
        2,
    )
    .expect("sized");
    let stabilized = combine_attention(&huge, &other)?;
    let finite = stabilized.out().iter().all(|x| x.is_finite())
        && stabilized.lse().iter().all(|x| x.is_finite());
    worst.update(if finite { 0.0 } else { f64::INFINITY }, || {
        "lse=1e4 overflow case".into()
    });
    Ok(worst.into_report("combine-stability", tolerance))
}

fn verify_model_configs(seed: u64) -> Vec<ModelConfig> {
    vec![
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            num_query_heads: 4,
            num_kv_heads: 4,
            mlp_hidden: 128,
            vocab_size: 96,
            seed,
            ..ModelConfig::default()
        },
        // Grouped-query heads, rotary positions disabled: engine agreement
        // must hold with rotation on or off.
        ModelConfig {
            num_layers: 2,
            model_dim: 128,
            num_query_heads: 8,
            num_kv_heads: 2,
            mlp_hidden: 256,
            vocab_size: 96,
            rope_enabled: false,
            seed: seed ^ 1,
            ..ModelConfig::default()
        },
    ]
}

/// Prefill + decode vs. the from-scratch monolithic forward oracle, for a
/// single unshared sequence and for a shared two-problem layout.
pub fn suite_prefill_equivalence<T: Scalar>(seed: u64) -> Result<SuiteReport> {
    let mut worst = Worst::new();
    for (cfg_idx, model_cfg) in verify_model_configs(seed).into_iter().enumerate() {
        let weights = init_model::<T>(&model_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        rng.set_stream(cfg_idx as u64);
        let vocab = model_cfg.vocab_size as u32;

        // Single sequence, no sharing: last-position logits must match the
        // full forward.
        let tokens: Vec<u32> = (0..12).map(|_| rng.gen_range(0..vocab)).collect();
        let layout = PromptNode::flat(tokens.clone(), vec![vec![]]);
        let out = prefill(&weights, &layout)?;
        let logits = crate::model::final_logits(&weights, &out.last_hidden)?;
        let (_, oracle_logits) = monolithic_forward_oracle(&weights, &tokens);
        let last = &oracle_logits[(tokens.len() - 1) * model_cfg.vocab_size..];
        let dev = max_abs_diff(logits.row(0), last);
        worst.update(dev, || format!("model {} single-sequence prefill", cfg_idx));

        // Two problems sharing a prompt: every sequence's last hidden state
        // must match the monolithic forward on its own flattened prompt.
        let shared: Vec<u32> = (0..6).map(|_| rng.gen_range(0..vocab)).collect();
        let p1: Vec<u32> = (0..4).map(|_| rng.gen_range(0..vocab)).collect();
        let p2: Vec<u32> = (0..5).map(|_| rng.gen_range(0..vocab)).collect();
        let t: Vec<Vec<u32>> = (0..4)
            .map(|_| (0..2).map(|_| rng.gen_range(0..vocab)).collect())
            .collect();
        let layout = PromptNode::interior(
            shared.clone(),
            vec![
                PromptNode::leaf(p1.clone(), vec![t[0].clone(), t[1].clone()]),
                PromptNode::leaf(p2.clone(), vec![t[2].clone(), t[3].clone()]),
            ],
        );
        let out = prefill(&weights, &layout)?;
        let full_prompts = [
            [shared.clone(), p1.clone(), t[0].clone()].concat(),
            [shared.clone(), p1.clone(), t[1].clone()].concat(),
            [shared.clone(), p2.clone(), t[2].clone()].concat(),
            [shared.clone(), p2.clone(), t[3].clone()].concat(),
        ];
        for (slot, prompt) in full_prompts.iter().enumerate() {
            let (oracle_hidden, _) = monolithic_forward_oracle(&weights, prompt);
            let want = &oracle_hidden[(prompt.len() - 1) * model_cfg.model_dim..];
            let dev = max_abs_diff(out.last_hidden.row(slot), want);
            worst.update(dev, || {
                format!("model {} shared-layout sequence {}", cfg_idx, slot)
            });
        }
    }
    Ok(worst.into_report("prefill-equivalence", abs_tolerance::<T>().max(1e-5)))
}

/// Hydragen and per-sequence engines must agree on decode logits at every
/// step.
pub fn suite_cross_engine_decode<T: Scalar>(seed: u64) -> Result<SuiteReport> {
    let tolerance = match T::PRECISION {
        "double" => 1e-10,
        _ => 1e-4,
    };
    let mut worst = Worst::new();
    for (cfg_idx, model_cfg) in verify_model_configs(seed).into_iter().enumerate() {
        let weights = init_model::<T>(&model_cfg)?;
        let layout = crate::bench::flat_prompt_workload(
            seed ^ 0xabc,
            3,
            8,
            2,
            model_cfg.vocab_size,
        );
        let pre = prefill(&weights, &layout)?;
        let mut hydra = DecodeState::from_prefill(&pre, EngineKind::Hydragen)?;
        let mut per_seq = DecodeState::from_prefill(&pre, EngineKind::PerSequence)?;
        let mut tokens: Vec<u32> = (0..3).map(|b| (b % 7) as u32).collect();
        for step in 0..8 {
            let a = decode_step(&weights, &mut hydra, &tokens, EngineKind::Hydragen)?;
            let b = decode_step(&weights, &mut per_seq, &tokens, EngineKind::PerSequence)?;
            let dev = a
                .logits
                .data()
                .iter()
                .zip(b.logits.data())
                .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
                .fold(0.0, f64::max);
            worst.update(dev, || format!("model {} decode step {}", cfg_idx, step));
            tokens = (0..3)
                .map(|bi| crate::model::argmax_row(a.logits.row(bi)))
                .collect();
        }
    }
    Ok(worst.into_report("cross-engine-decode", tolerance))
}

/// Runs every suite at the given precision.
pub fn run_all<T: Scalar>(seed: u64) -> Result<VerifyReport> {
    Ok(VerifyReport {
        precision: T::PRECISION,
        suites: vec![
            suite_engine_equivalence::<T>(seed)?,
            suite_lse_additivity::<T>(seed)?,
            suite_tree_exactness::<T>(seed, 50)?,
            suite_combine_stability::<T>(seed)?,
            suite_prefill_equivalence::<T>(seed)?,
            suite_cross_engine_decode::<T>(seed)?,
        ],
    })
}

// Quick greedy-generation agreement used by tests and the CLI's verbose
// mode; returns true when both engines emit identical token matrices.
pub fn engines_agree_on_tokens<T: Scalar>(
    model_cfg: &ModelConfig,
    layout: &PromptNode,
    num_new_tokens: usize,
) -> Result<bool> {
    let weights = init_model::<T>(model_cfg)?;
    let a = generate(&weights, layout, num_new_tokens, EngineKind::Hydragen)?;
    let b = generate(&weights, layout, num_new_tokens, EngineKind::PerSequence)?;
    Ok(a.tokens == b.tokens)
}
