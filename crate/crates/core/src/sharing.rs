//! The sharing tree (prefix hierarchy), per-sequence suffix caches, and the
//! grouping logic that maps batch queries to tree nodes.
//!
//! A [`SharingTree`] is a rooted tree of token segments: every node owns a
//! contiguous KV block that is shared by all sequences assigned to leaves
//! below it. Each sequence additionally owns a growable [`SuffixCache`]
//! entry that starts where its root-to-leaf path ends.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::KeyValueSegment;
use crate::error::{Error, Result, TreeError};
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceId(pub u32);

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Declarative description of a sharing tree: nested segment lengths with
/// per-leaf sequence counts. Interior nodes carry children; leaves carry
/// `num_sequences`. The root alone may have length zero, which represents
/// "no globally shared prefix".
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub len: usize,
    #[serde(default)]
    pub children: Vec<TreeSpec>,
    #[serde(default)]
    pub num_sequences: usize,
}

impl TreeSpec {
    /// One shared segment of `len` tokens with `num_sequences` sequences
    /// hanging off it: the flat prefix/suffix setting.
    pub fn flat(len: usize, num_sequences: usize) -> Self {
        TreeSpec {
            len,
            children: Vec::new(),
            num_sequences,
        }
    }

    pub fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(TreeSpec::depth)
            .max()
            .unwrap_or(0)
    }

    pub fn total_sequences(&self) -> usize {
        if self.children.is_empty() {
            self.num_sequences
        } else {
            self.children.iter().map(TreeSpec::total_sequences).sum()
        }
    }

    fn check(&self, is_root: bool) -> Result<(), TreeError> {
        if self.len == 0 && !is_root {
            return Err(TreeError::MalformedSpec(
                "non-root spec node has length 0".into(),
            ));
        }
        if self.children.is_empty() {
            if self.num_sequences == 0 {
                return Err(TreeError::MalformedSpec(
                    "leaf spec node must carry at least one sequence".into(),
                ));
            }
        } else {
            if self.num_sequences != 0 {
                return Err(TreeError::MalformedSpec(
                    "interior spec node cannot carry sequences".into(),
                ));
            }
            for child in &self.children {
                child.check(false)?;
            }
        }
        Ok(())
    }
}

/// One vertex of the sharing structure: a token segment shared by every
/// sequence whose leaf lies below it.
#[derive(Debug, Clone)]
pub struct PrefixNode<T: Scalar> {
    pub id: NodeId,
    pub kv: KeyValueSegment<T>,
    /// Absolute token index of this node's first token. Equals the parent's
    /// start position plus the parent's segment length; the root starts at 0.
    pub start_position: usize,
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
}

/// Rooted tree of shared token segments plus the sequence-to-leaf map.
/// Immutable after construction; safe for concurrent reads.
#[derive(Debug, Clone)]
pub struct SharingTree<T: Scalar> {
    nodes: Vec<PrefixNode<T>>,
    leaf_assignment: BTreeMap<SequenceId, NodeId>,
}

impl<T: Scalar> SharingTree<T> {
    /// Assembles a tree from raw parts without validating; callers that
    /// hand-build trees should run [`SharingTree::validate`]. Node ids must
    /// equal their index in `nodes`.
    pub fn from_parts(
        nodes: Vec<PrefixNode<T>>,
        leaf_assignment: BTreeMap<SequenceId, NodeId>,
    ) -> Self {
        SharingTree {
            nodes,
            leaf_assignment,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &PrefixNode<T> {
        &self.nodes[id.0 as usize]
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut PrefixNode<T> {
        &mut self.nodes[id.0 as usize]
    }

    /// Node ids in increasing order; parents always precede children for
    /// trees built by [`build_tree`].
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(|i| NodeId(i as u32))
    }

    pub fn num_sequences(&self) -> usize {
        self.leaf_assignment.len()
    }

    /// Sequence ids in ascending order.
    pub fn sequence_ids(&self) -> impl Iterator<Item = SequenceId> + '_ {
        self.leaf_assignment.keys().copied()
    }

    pub fn leaf_of(&self, sequence: SequenceId) -> Result<NodeId> {
        self.leaf_assignment
            .get(&sequence)
            .copied()
            .ok_or(Error::UnknownSequence(sequence))
    }

    /// Nodes from the root down to (and including) the sequence's leaf.
    pub fn path_from_root(&self, sequence: SequenceId) -> Result<Vec<NodeId>> {
        let mut path = Vec::new();
        let mut cursor = Some(self.leaf_of(sequence)?);
        while let Some(id) = cursor {
            path.push(id);
            cursor = self.node(id).parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Absolute position where the sequence's unshared region begins: the
    /// total length of its root-to-leaf path.
    pub fn path_end_position(&self, sequence: SequenceId) -> Result<usize> {
        let leaf = self.leaf_of(sequence)?;
        let node = self.node(leaf);
        Ok(node.start_position + node.kv.len())
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.nodes.is_empty() {
            return Err(TreeError::Empty);
        }
        let n = self.nodes.len();
        let mut root = None;
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.id.0 as usize != idx {
                return Err(TreeError::MalformedSpec(format!(
                    "node at index {} carries id {}",
                    idx, node.id
                )));
            }
            match node.parent {
                None => match root {
                    None => root = Some(node.id),
                    Some(first) => {
                        return Err(TreeError::MultipleRoots {
                            first,
                            second: node.id,
                        })
                    }
                },
                Some(parent) => {
                    if parent.0 as usize >= n {
                        return Err(TreeError::UnknownNode {
                            node: node.id,
                            missing: parent,
                        });
                    }
                }
            }
            for &child in &node.children {
                if child.0 as usize >= n {
                    return Err(TreeError::UnknownNode {
                        node: node.id,
                        missing: child,
                    });
                }
                if self.node(child).parent != Some(node.id) {
                    return Err(TreeError::LinkMismatch {
                        parent: node.id,
                        child,
                    });
                }
            }
        }
        let root = root.ok_or(TreeError::Cycle {
            node: self.nodes[0].id,
        })?;

        // Walk from the root: every node must be reached exactly once.
        let mut seen = vec![false; n];
        let mut queue = vec![root];
        let mut visited = 0usize;
        while let Some(id) = queue.pop() {
            let slot = &mut seen[id.0 as usize];
            if *slot {
                return Err(TreeError::Cycle { node: id });
            }
            *slot = true;
            visited += 1;
            queue.extend(self.node(id).children.iter().copied());
        }
        if visited != n {
            let orphan = seen.iter().position(|&v| !v).unwrap();
            return Err(TreeError::Orphan {
                node: NodeId(orphan as u32),
            });
        }

        // Positions telescope along every edge; the root starts at 0.
        let root_node = self.node(root);
        if root_node.start_position != 0 {
            return Err(TreeError::PositionMismatch {
                node: root,
                expected: 0,
                found: root_node.start_position,
            });
        }
        let geometry = (root_node.kv.kv_heads(), root_node.kv.head_dim());
        for node in &self.nodes {
            if (node.kv.kv_heads(), node.kv.head_dim()) != geometry {
                return Err(TreeError::SegmentShape { node: node.id });
            }
            if node.parent.is_some() && node.kv.is_empty() {
                return Err(TreeError::EmptyNonRootSegment { node: node.id });
            }
            if let Some(parent) = node.parent {
                let p = self.node(parent);
                let expected = p.start_position + p.kv.len();
                if node.start_position != expected {
                    return Err(TreeError::PositionMismatch {
                        node: node.id,
                        expected,
                        found: node.start_position,
                    });
                }
            }
        }

        // Sequences sit on leaves; every leaf carries at least one sequence.
        let mut assigned = vec![false; n];
        for (&sequence, &leaf) in &self.leaf_assignment {
            if leaf.0 as usize >= n || !self.node(leaf).children.is_empty() {
                return Err(TreeError::NonLeafAssignment {
                    sequence,
                    node: leaf,
                });
            }
            assigned[leaf.0 as usize] = true;
        }
        for node in &self.nodes {
            if node.children.is_empty() && !assigned[node.id.0 as usize] {
                return Err(TreeError::UnassignedLeaf { node: node.id });
            }
        }
        Ok(())
    }
}

/// Builds a validated tree from a declarative spec, producing each node's KV
/// content through `kv_filler(node_id, start_position, len)`.
///
/// Nodes are numbered in breadth-first order (the root is `n0` and parents
/// always precede children); sequence ids run `s0..` in the same order, with
/// consecutive ids per leaf. Content generation receives the node id, so a
/// seeded filler yields the same tree regardless of traversal details.
pub fn build_tree<T, F>(spec: &TreeSpec, mut kv_filler: F) -> Result<SharingTree<T>>
where
    T: Scalar,
    F: FnMut(NodeId, usize, usize) -> KeyValueSegment<T>,
{
    spec.check(true)?;
    let mut nodes: Vec<PrefixNode<T>> = Vec::new();
    let mut leaf_assignment = BTreeMap::new();
    let mut next_sequence = 0u32;

    // Breadth-first expansion keeps node ids topologically ordered.
    let mut frontier: std::collections::VecDeque<(&TreeSpec, Option<NodeId>, usize)> =
        std::collections::VecDeque::new();
    frontier.push_back((spec, None, 0));
    while let Some((node_spec, parent, start)) = frontier.pop_front() {
        let id = NodeId(nodes.len() as u32);
        let kv = kv_filler(id, start, node_spec.len);
        if kv.len() != node_spec.len {
            return Err(TreeError::MalformedSpec(format!(
                "filler produced {} positions for node {} of length {}",
                kv.len(),
                id,
                node_spec.len
            ))
            .into());
        }
        nodes.push(PrefixNode {
            id,
            kv,
            start_position: start,
            children: Vec::new(),
            parent,
        });
        if let Some(parent) = parent {
            nodes[parent.0 as usize].children.push(id);
        }
        if node_spec.children.is_empty() {
            for _ in 0..node_spec.num_sequences {
                leaf_assignment.insert(SequenceId(next_sequence), id);
                next_sequence += 1;
            }
        } else {
            let child_start = start + node_spec.len;
            for child in &node_spec.children {
                frontier.push_back((child, Some(id), child_start));
            }
        }
    }

    let tree = SharingTree::from_parts(nodes, leaf_assignment);
    tree.validate()?;
    Ok(tree)
}

/// Seeded KV content generator for benchmarks and tests: uniform values in
/// `[-1, 1)`, independent per node (the node id selects the stream), so the
/// produced tree depends only on `(seed, spec)`.
pub fn seeded_kv_filler<T: Scalar>(
    seed: u64,
    kv_heads: usize,
    head_dim: usize,
) -> impl FnMut(NodeId, usize, usize) -> KeyValueSegment<T> {
    move |node, _start, len| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(node.0 as u64);
        seeded_segment_with(&mut rng, len, kv_heads, head_dim)
    }
}

/// Fills one segment from an existing rng.
pub fn seeded_segment_with<T: Scalar>(
    rng: &mut impl Rng,
    len: usize,
    kv_heads: usize,
    head_dim: usize,
) -> KeyValueSegment<T> {
    let count = len * kv_heads * head_dim;
    let keys = (0..count)
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    let values = (0..count)
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    KeyValueSegment::from_data(len, kv_heads, head_dim, keys, values).expect("sized by count")
}

/// Per-sequence growable KV store appended to once per decode step.
///
/// Lengths are ragged across sequences. Appends to distinct sequences are
/// independent; the backing storage grows by amortized doubling while the
/// logical length is tracked exactly in the segment.
#[derive(Debug, Clone)]
pub struct SuffixCache<T: Scalar> {
    entries: BTreeMap<SequenceId, SuffixEntry<T>>,
}

#[derive(Debug, Clone)]
struct SuffixEntry<T: Scalar> {
    kv: KeyValueSegment<T>,
    /// Absolute position where the unshared region begins.
    suffix_start: usize,
}

impl<T: Scalar> SuffixCache<T> {
    /// One empty suffix per tree sequence, starting where that sequence's
    /// root-to-leaf path ends.
    pub fn for_tree(tree: &SharingTree<T>, kv_heads: usize, head_dim: usize) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for sequence in tree.sequence_ids() {
            entries.insert(
                sequence,
                SuffixEntry {
                    kv: KeyValueSegment::empty(kv_heads, head_dim),
                    suffix_start: tree.path_end_position(sequence)?,
                },
            );
        }
        Ok(SuffixCache { entries })
    }

    pub fn new_empty() -> Self {
        SuffixCache {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert_sequence(&mut self, sequence: SequenceId, suffix_start: usize, kv: KeyValueSegment<T>) {
        self.entries.insert(
            sequence,
            SuffixEntry {
                kv,
                suffix_start,
            },
        );
    }

    fn entry(&self, sequence: SequenceId) -> Result<&SuffixEntry<T>> {
        self.entries
            .get(&sequence)
            .ok_or(Error::UnknownSequence(sequence))
    }

    /// Appends one decode step's key/value rows (`[kv_heads, head_dim]`
    /// each); the sequence's suffix grows by exactly one position.
    pub fn append_step_kv(
        &mut self,
        sequence: SequenceId,
        k_row: &[T],
        v_row: &[T],
    ) -> Result<()> {
        let entry = self
            .entries
            .get_mut(&sequence)
            .ok_or(Error::UnknownSequence(sequence))?;
        entry.kv.push_position(k_row, v_row)
    }

    pub fn segment(&self, sequence: SequenceId) -> Result<&KeyValueSegment<T>> {
        Ok(&self.entry(sequence)?.kv)
    }

    pub fn suffix_start(&self, sequence: SequenceId) -> Result<usize> {
        Ok(self.entry(sequence)?.suffix_start)
    }

    pub fn suffix_len(&self, sequence: SequenceId) -> Result<usize> {
        Ok(self.entry(sequence)?.kv.len())
    }

    pub fn sequence_ids(&self) -> impl Iterator<Item = SequenceId> + '_ {
        self.entries.keys().copied()
    }
}

/// The set of sequences participating in a decode step, with each one's
/// current absolute position (the position of the token being processed).
#[derive(Debug, Clone)]
pub struct DecodeBatch {
    sequence_ids: Vec<SequenceId>,
    positions: Vec<usize>,
}

impl DecodeBatch {
    /// Sequence ids are kept in ascending order so downstream gather and
    /// scatter are reproducible.
    pub fn new(mut entries: Vec<(SequenceId, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput {
                op: "DecodeBatch",
                detail: "no sequences".into(),
            });
        }
        entries.sort_by_key(|(s, _)| *s);
        entries.dedup_by_key(|(s, _)| *s);
        Ok(DecodeBatch {
            sequence_ids: entries.iter().map(|(s, _)| *s).collect(),
            positions: entries.iter().map(|(_, p)| *p).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequence_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence_ids.is_empty()
    }

    pub fn sequence_ids(&self) -> &[SequenceId] {
        &self.sequence_ids
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Moves every sequence forward by one position after a decode step.
    pub fn advance(&mut self) {
        for p in self.positions.iter_mut() {
            *p += 1;
        }
    }
}

/// For each tree node (ascending node id), the batch sequences whose
/// root-to-leaf path passes through it, in ascending sequence order.
///
/// Every sequence therefore appears in exactly the groups of its ancestors
/// and its own leaf, and the ordering is stable across calls.
pub fn node_query_groups<T: Scalar>(
    tree: &SharingTree<T>,
    batch: &DecodeBatch,
) -> Result<Vec<(NodeId, Vec<SequenceId>)>> {
    let mut members: Vec<Vec<SequenceId>> = vec![Vec::new(); tree.num_nodes()];
    for &sequence in batch.sequence_ids() {
        for node in tree.path_from_root(sequence)? {
            members[node.0 as usize].push(sequence);
        }
    }
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, seqs)| !seqs.is_empty())
        .map(|(idx, seqs)| (NodeId(idx as u32), seqs))
        .collect())
}

/// Reconstructs the monolithic KV sequence one sequence sees: every node
/// segment on its root-to-leaf path, in position order, followed by its
/// suffix.
pub fn flatten_full_kv<T: Scalar>(
    tree: &SharingTree<T>,
    cache: &SuffixCache<T>,
    sequence: SequenceId,
) -> Result<KeyValueSegment<T>> {
    let path = tree.path_from_root(sequence)?;
    let mut segments: Vec<&KeyValueSegment<T>> =
        path.iter().map(|&id| &tree.node(id).kv).collect();
    let suffix = cache.segment(sequence)?;
    segments.push(suffix);
    KeyValueSegment::concat(&segments)
}
