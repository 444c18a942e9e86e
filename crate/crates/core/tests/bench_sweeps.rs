//! Harness-level behavior: sweep reproducibility, the end-to-end engine
//! ordering, tree workload layout equivalence, and independence of results
//! from the degree of internal parallelism.

use hydragen_core::attention::{AttentionConfig, QueryBlock};
use hydragen_core::bench::{run_e2e_sweep, SweepConfig, TreeWorkload};
use hydragen_core::engine::{hydragen_attention, EngineKind};
use hydragen_core::model::ModelConfig;
use hydragen_core::sharing::seeded_segment_with;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (b, hq, hkv, d) = (4, 8, 1, 16);
    let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
    let q_data: Vec<f32> = (0..b * hq * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let q = QueryBlock::from_data(b, 1, hq, d, q_data).unwrap();
    let prefix = seeded_segment_with::<f32>(&mut rng, 96, hkv, d);
    let suffixes: Vec<_> = (0..b)
        .map(|_| seeded_segment_with::<f32>(&mut rng, 7, hkv, d))
        .collect();

    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| hydragen_attention(&q, &prefix, &suffixes, &cfg).unwrap())
    };
    let one = run_with(1);
    let four = run_with(4);
    // Every output row is owned by exactly one task with a fixed
    // accumulation order, so the results must be bit-identical.
    assert_eq!(one.out(), four.out());
    assert_eq!(one.lse(), four.lse());
}

#[test]
fn e2e_throughput_ordering_matches_engine_work() {
    // The no-attention ceiling does strictly less work than the decomposed
    // engine, which reads strictly less memory than the per-sequence
    // baseline.
    let model = ModelConfig {
        num_layers: 2,
        model_dim: 128,
        num_query_heads: 8,
        num_kv_heads: 1,
        mlp_hidden: 256,
        vocab_size: 256,
        seed: 2,
        ..ModelConfig::default()
    };
    let cfg = SweepConfig {
        batch_sizes: vec![64],
        prefix_lengths: vec![1024],
        suffix_lengths: vec![2],
        engines: vec![
            EngineKind::Hydragen,
            EngineKind::PerSequence,
            EngineKind::NoAttention,
        ],
        warmup_iters: 1,
        timed_iters: 2,
        num_new_tokens: 8,
        seed: 1,
        ..SweepConfig::default()
    };
    let records = run_e2e_sweep::<f32>(&cfg, &model).unwrap();
    let tps = |engine: &str| {
        records
            .iter()
            .find(|r| r.engine == engine)
            .and_then(|r| r.tokens_per_s)
            .unwrap()
    };
    assert!(tps("no-attention") >= tps("hydragen"));
    assert!(tps("hydragen") >= tps("per-sequence"));
    // Speedup columns are baseline-relative.
    let ceiling = records.iter().find(|r| r.engine == "no-attention").unwrap();
    assert!(ceiling.speedup.unwrap() >= 1.0);
}

#[test]
fn tree_layout_variants_carry_identical_prompts() {
    let workload = TreeWorkload::two_level(6, 3, 4, 2, 2);
    let full = workload.full_tree_layout(9, 64);
    let flat = workload.single_level_layout(9, 64);

    // Walk the full tree and rebuild each sequence's complete prompt; it
    // must equal the flat layout's root + tail for the same sequence.
    assert_eq!(flat.num_sequences(), workload.batch());
    assert_eq!(full.num_sequences(), workload.batch());
    let mut full_prompts = Vec::new();
    for child in &full.children {
        for tail in &child.tails {
            let mut prompt = full.tokens.clone();
            prompt.extend_from_slice(&child.tokens);
            prompt.extend_from_slice(tail);
            full_prompts.push(prompt);
        }
    }
    for (seq, want) in full_prompts.iter().enumerate() {
        let mut got = flat.tokens.clone();
        got.extend_from_slice(&flat.tails[seq]);
        assert_eq!(&got, want, "sequence {} prompts differ across layouts", seq);
    }
}

#[test]
fn deeper_tree_specs_flatten_per_path() {
    use hydragen_core::sharing::TreeSpec;
    let workload = TreeWorkload {
        spec: TreeSpec {
            len: 3,
            num_sequences: 0,
            children: vec![
                TreeSpec {
                    len: 2,
                    num_sequences: 0,
                    children: vec![TreeSpec::flat(4, 1), TreeSpec::flat(5, 2)],
                },
                TreeSpec::flat(7, 1),
            ],
        },
        tail_len: 1,
    };
    assert_eq!(workload.batch(), 4);
    // Longest unshared prompt under root-only sharing: 2 + 5 + tail.
    assert_eq!(workload.max_unshared_prompt_len(), 8);
    // Sequences are numbered breadth-first, so the depth-1 leaf comes
    // first, then the two deeper leaves.
    let flat = workload.single_level_layout(4, 32);
    assert_eq!(flat.tails[0].len(), 7 + 1);
    assert_eq!(flat.tails[1].len(), 2 + 4 + 1);
    assert_eq!(flat.tails[2].len(), 2 + 5 + 1);
    assert_eq!(flat.tails[3].len(), 2 + 5 + 1);
}
