//! Engine-level equivalence: the decomposed paths must reproduce
//! monolithic attention, bit-for-bit where the contracts say so and within
//! floating tolerance elsewhere.

use hydragen_core::attention::{AttentionConfig, KeyValueSegment, KvView, QueryBlock};
use hydragen_core::engine::{
    hydragen_attention, per_sequence_attention, per_sequence_attention_flat, tree_attention,
};
use hydragen_core::oracle::{max_abs_diff, monolithic_attention_oracle};
use hydragen_core::sharing::{
    build_tree, flatten_full_kv, seeded_kv_filler, seeded_segment_with, DecodeBatch, SequenceId,
    SuffixCache, TreeSpec,
};
use hydragen_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded_query<T: Scalar>(rng: &mut ChaCha8Rng, b: usize, hq: usize, d: usize) -> QueryBlock<T> {
    let data = (0..b * hq * d)
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    QueryBlock::from_data(b, 1, hq, d, data).unwrap()
}

#[test]
fn empty_prefix_reduces_to_suffix_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, hq, hkv, d) = (3, 4, 2, 8);
    let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
    let q = seeded_query::<f32>(&mut rng, b, hq, d);
    let prefix = KeyValueSegment::empty(hkv, d);
    let suffixes: Vec<_> = (0..b)
        .map(|_| seeded_segment_with::<f32>(&mut rng, 5, hkv, d))
        .collect();
    let views: Vec<KvView<'_, f32>> = suffixes.iter().map(|s| s.view()).collect();
    let hydra = hydragen_attention(&q, &prefix, &suffixes, &cfg).unwrap();
    let direct = per_sequence_attention_flat(&q, &views, &cfg).unwrap();
    // Empty-segment identity: equality is exact.
    assert_eq!(hydra.out(), direct.out());
    assert_eq!(hydra.lse(), direct.lse());
}

#[test]
fn zero_length_suffixes_reduce_to_prefix_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, hq, hkv, d) = (4, 2, 1, 16);
    let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
    let q = seeded_query::<f32>(&mut rng, b, hq, d);
    let prefix = seeded_segment_with::<f32>(&mut rng, 24, hkv, d);
    let suffixes: Vec<_> = (0..b).map(|_| KeyValueSegment::empty(hkv, d)).collect();
    let hydra = hydragen_attention(&q, &prefix, &suffixes, &cfg).unwrap();
    let full: Vec<_> = (0..b).map(|_| prefix.clone()).collect();
    let views: Vec<KvView<'_, f32>> = full.iter().map(|s| s.view()).collect();
    let direct = per_sequence_attention_flat(&q, &views, &cfg).unwrap();
    for (a, b) in hydra.out().iter().zip(direct.out().iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn hydragen_matches_monolithic_oracle_on_ragged_suffixes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, hq, hkv, d) = (4, 8, 1, 16);
    let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
    let q = seeded_query::<f32>(&mut rng, b, hq, d);
    let prefix = seeded_segment_with::<f32>(&mut rng, 32, hkv, d);
    let suffix_lens = [3usize, 5, 8, 13];
    let suffixes: Vec<_> = suffix_lens
        .iter()
        .map(|&len| seeded_segment_with::<f32>(&mut rng, len, hkv, d))
        .collect();
    let hydra = hydragen_attention(&q, &prefix, &suffixes, &cfg).unwrap();
    let full: Vec<_> = suffixes
        .iter()
        .map(|s| KeyValueSegment::concat(&[&prefix, s]).unwrap())
        .collect();
    let oracle = monolithic_attention_oracle(&q, &full, (1.0f64 / (d as f64).sqrt()) as f64);
    assert!(max_abs_diff(hydra.out(), &oracle.out) < 1e-5);
    assert!(max_abs_diff(hydra.lse(), &oracle.lse) < 1e-5);
}

#[test]
fn hydragen_rejects_suffix_count_mismatch() {
    let cfg = AttentionConfig::<f32>::new(4, 2, 1).unwrap();
    let q = QueryBlock::<f32>::zeros(2, 1, 2, 4);
    let prefix = KeyValueSegment::empty(1, 4);
    assert!(hydragen_attention(&q, &prefix, &[], &cfg).is_err());
}

#[test]
fn merged_prefix_rows_equal_independent_prefix_attention() {
    // Inter-sequence batching is a pure reshape: the batched prefix rows,
    // unmerged, must equal per-sequence prefix attention row for row.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, hq, hkv, d) = (6, 4, 2, 16);
    let cfg = AttentionConfig::<f64>::new(d, hq, hkv).unwrap();
    let q = seeded_query::<f64>(&mut rng, b, hq, d);
    let prefix = seeded_segment_with::<f64>(&mut rng, 40, hkv, d);
    let empty: Vec<_> = (0..b).map(|_| KeyValueSegment::empty(hkv, d)).collect();
    let merged = hydragen_attention(&q, &prefix, &empty, &cfg).unwrap();
    let per_seq: Vec<_> = (0..b).map(|_| prefix.clone()).collect();
    let views: Vec<KvView<'_, f64>> = per_seq.iter().map(|s| s.view()).collect();
    let independent = per_sequence_attention_flat(&q, &views, &cfg).unwrap();
    for (a, b) in merged.out().iter().zip(independent.out().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in merged.lse().iter().zip(independent.lse().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn tree_fixture<T: Scalar>(
    spec: &TreeSpec,
    seed: u64,
    hkv: usize,
    d: usize,
    suffix_lens: &[usize],
) -> (
    hydragen_core::sharing::SharingTree<T>,
    SuffixCache<T>,
    DecodeBatch,
) {
    let tree = build_tree::<T, _>(spec, seeded_kv_filler(seed, hkv, d)).unwrap();
    let mut cache = SuffixCache::for_tree(&tree, hkv, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let sequences: Vec<SequenceId> = tree.sequence_ids().collect();
    for (i, &s) in sequences.iter().enumerate() {
        for _ in 0..suffix_lens[i % suffix_lens.len()] {
            let k: Vec<T> = (0..hkv * d)
                .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
                .collect();
            let v: Vec<T> = (0..hkv * d)
                .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
                .collect();
            cache.append_step_kv(s, &k, &v).unwrap();
        }
    }
    let batch = DecodeBatch::new(sequences.iter().map(|&s| (s, 0)).collect()).unwrap();
    (tree, cache, batch)
}

#[test]
fn one_level_tree_is_bit_identical_to_hydragen() {
    let spec = TreeSpec::flat(12, 5);
    let (tree, cache, batch) = tree_fixture::<f32>(&spec, 7, 2, 8, &[2, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = AttentionConfig::<f32>::new(8, 4, 2).unwrap();
    let q = seeded_query::<f32>(&mut rng, 5, 4, 8);

    let via_tree = tree_attention(&q, &tree, &cache, &batch, &cfg).unwrap();
    let prefix = tree.node(hydragen_core::sharing::NodeId(0)).kv.clone();
    let suffixes: Vec<_> = batch
        .sequence_ids()
        .iter()
        .map(|&s| cache.segment(s).unwrap().clone())
        .collect();
    let via_flat = hydragen_attention(&q, &prefix, &suffixes, &cfg).unwrap();
    assert_eq!(via_tree.out(), via_flat.out());
    assert_eq!(via_tree.lse(), via_flat.lse());
}

#[test]
fn fig2_tree_matches_flatten_oracle() {
    // Shared root of 16, two 8-token problem spans, four sequences each,
    // two-token suffixes.
    let spec = TreeSpec {
        len: 16,
        num_sequences: 0,
        children: vec![TreeSpec::flat(8, 4), TreeSpec::flat(8, 4)],
    };
    let (tree, cache, batch) = tree_fixture::<f32>(&spec, 11, 1, 16, &[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = AttentionConfig::<f32>::new(16, 8, 1).unwrap();
    let q = seeded_query::<f32>(&mut rng, 8, 8, 16);

    let result = tree_attention(&q, &tree, &cache, &batch, &cfg).unwrap();
    let full: Vec<_> = batch
        .sequence_ids()
        .iter()
        .map(|&s| flatten_full_kv(&tree, &cache, s).unwrap())
        .collect();
    let oracle = monolithic_attention_oracle(&q, &full, 1.0 / 4.0);
    assert!(max_abs_diff(result.out(), &oracle.out) < 1e-5);
    assert!(max_abs_diff(result.lse(), &oracle.lse) < 1e-5);
}

#[test]
fn depth_three_tree_matches_oracle_in_both_precisions() {
    let spec = TreeSpec {
        len: 4,
        num_sequences: 0,
        children: vec![
            TreeSpec {
                len: 3,
                num_sequences: 0,
                children: vec![TreeSpec::flat(2, 3), TreeSpec::flat(6, 2)],
            },
            TreeSpec::flat(5, 3),
        ],
    };

    fn run<T: Scalar>(spec: &TreeSpec, tol: f64) {
        let (tree, cache, batch) = tree_fixture::<T>(spec, 13, 2, 8, &[1, 3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = AttentionConfig::<T>::new(8, 4, 2).unwrap();
        let q = seeded_query::<T>(&mut rng, batch.len(), 4, 8);
        let result = tree_attention(&q, &tree, &cache, &batch, &cfg).unwrap();
        let full: Vec<_> = batch
            .sequence_ids()
            .iter()
            .map(|&s| flatten_full_kv(&tree, &cache, s).unwrap())
            .collect();
        let oracle = monolithic_attention_oracle(&q, &full, 1.0 / 8.0f64.sqrt());
        assert!(max_abs_diff(result.out(), &oracle.out) < tol);
    }
    run::<f32>(&spec, 1e-5);
    run::<f64>(&spec, 1e-12);
}

#[test]
fn per_sequence_equals_tree_attention() {
    let spec = TreeSpec {
        len: 9,
        num_sequences: 0,
        children: vec![TreeSpec::flat(4, 2), TreeSpec::flat(7, 5)],
    };
    let (tree, cache, batch) = tree_fixture::<f32>(&spec, 19, 1, 8, &[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = AttentionConfig::<f32>::new(8, 8, 1).unwrap();
    let q = seeded_query::<f32>(&mut rng, batch.len(), 8, 8);
    let a = tree_attention(&q, &tree, &cache, &batch, &cfg).unwrap();
    let b = per_sequence_attention(&q, &tree, &cache, &batch, &cfg).unwrap();
    for (x, y) in a.out().iter().zip(b.out().iter()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn single_sequence_baseline_equals_empty_suffix_split() {
    // With B=1 the baseline is just attention over the full KV, which the
    // decomposed path reproduces exactly when the whole KV plays the role
    // of the shared segment.
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (hq, hkv, d) = (4, 2, 8);
    let cfg = AttentionConfig::<f32>::new(d, hq, hkv).unwrap();
    let q = seeded_query::<f32>(&mut rng, 1, hq, d);
    let full = seeded_segment_with::<f32>(&mut rng, 20, hkv, d);
    let baseline = per_sequence_attention_flat(&q, &[full.view()], &cfg).unwrap();
    let split = hydragen_attention(&q, &full, &[KeyValueSegment::empty(hkv, d)], &cfg).unwrap();
    assert_eq!(baseline.out(), split.out());
    assert_eq!(baseline.lse(), split.lse());
}

#[test]
fn zero_query_batches_are_rejected() {
    assert!(QueryBlock::<f32>::from_data(0, 1, 2, 4, vec![]).is_err());
    assert!(QueryBlock::<f32>::from_data(2, 0, 2, 4, vec![]).is_err());
}

#[test]
fn tree_attention_propagates_validation_failures() {
    let spec = TreeSpec::flat(4, 2);
    let (tree, cache, batch) = tree_fixture::<f32>(&spec, 23, 1, 4, &[1]);
    let cfg = AttentionConfig::<f32>::new(4, 2, 1).unwrap();
    let q = QueryBlock::<f32>::zeros(2, 1, 2, 4);
    // Sabotage the tree: break the root's start position.
    let mut nodes: Vec<_> = tree.node_ids().map(|id| tree.node(id).clone()).collect();
    nodes[0].start_position = 3;
    let broken = hydragen_core::sharing::SharingTree::from_parts(
        nodes,
        batch
            .sequence_ids()
            .iter()
            .map(|&s| (s, hydragen_core::sharing::NodeId(0)))
            .collect(),
    );
    assert!(tree_attention(&q, &broken, &cache, &batch, &cfg).is_err());
}
