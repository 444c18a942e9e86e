//! Error types shared across the library.

use std::path::PathBuf;

use crate::sharing::{NodeId, SequenceId};

/// Top-level error for all fallible operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received inputs whose shapes violate its contract.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Softmax over zero columns is undefined; callers must handle empty
    /// key sets before reaching the softmax.
    #[error("empty softmax: row length must be at least 1")]
    EmptySoftmax,

    /// A batch-level operation received zero sequences or zero queries.
    #[error("empty input in {op}: {detail}")]
    EmptyInput { op: &'static str, detail: String },

    #[error("unknown sequence id {0}")]
    UnknownSequence(SequenceId),

    #[error("sharing tree is invalid: {0}")]
    Tree(#[from] TreeError),

    #[error("token id {token} out of vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: u32, vocab_size: usize },

    #[error("invalid model configuration: {0}")]
    ModelConfig(String),

    #[error("invalid benchmark configuration: {0}")]
    BenchConfig(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Structural violations found when validating a [`crate::sharing::SharingTree`].
///
/// Returned (not panicked) so tooling can surface the first offending node.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("tree has no nodes")]
    Empty,

    #[error("multiple roots: node {first} and node {second} both have no parent")]
    MultipleRoots { first: NodeId, second: NodeId },

    #[error("node {node} is unreachable from the root")]
    Orphan { node: NodeId },

    #[error("cycle detected through node {node}")]
    Cycle { node: NodeId },

    #[error("parent/child link mismatch between node {parent} and node {child}")]
    LinkMismatch { parent: NodeId, child: NodeId },

    #[error("node {node} references unknown node {missing}")]
    UnknownNode { node: NodeId, missing: NodeId },

    #[error("position mismatch at node {node}: expected start {expected}, found {found}")]
    PositionMismatch {
        node: NodeId,
        expected: usize,
        found: usize,
    },

    #[error("non-root node {node} has an empty token segment")]
    EmptyNonRootSegment { node: NodeId },

    #[error("kv segment shape mismatch at node {node}")]
    SegmentShape { node: NodeId },

    #[error("sequence {sequence} is assigned to node {node}, which is not a leaf")]
    NonLeafAssignment { sequence: SequenceId, node: NodeId },

    #[error("leaf node {node} has no assigned sequences")]
    UnassignedLeaf { node: NodeId },

    #[error("sequence {sequence} is not assigned to any leaf")]
    UnassignedSequence { sequence: SequenceId },

    #[error("malformed tree spec: {0}")]
    MalformedSpec(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
