//! Multiply-accumulate accounting.
//!
//! Every matrix product in a forward pass charges `m*n*k` MACs to an
//! [`OpLedger`] bucket keyed by operation kind and by phase (work that must
//! run at query time vs. work that is precomputable per document). Counts
//! come from loop bounds, so re-running the same computation graph yields
//! identical ledgers. Elementwise work (softmax, layer norm, activations)
//! is deliberately not charged; the ledger models attention and linear-layer
//! arithmetic only.

/// What kind of matrix product is being charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    /// Attention score product and weighted value sum within one sequence.
    SelfAttention,
    /// Attention score product and weighted value sum from query to memory.
    CrossAttention,
    /// Position-wise feed-forward layers.
    FeedForward,
    /// Q/K/V/output projections, embeddings-adjacent linears, scoring head.
    Projection,
}

impl OpTag {
    pub const ALL: [OpTag; 4] = [
        OpTag::SelfAttention,
        OpTag::CrossAttention,
        OpTag::FeedForward,
        OpTag::Projection,
    ];

    fn index(self) -> usize {
        match self {
            OpTag::SelfAttention => 0,
            OpTag::CrossAttention => 1,
            OpTag::FeedForward => 2,
            OpTag::Projection => 3,
        }
    }
}

/// Whether the work depends on the query or is document-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    QueryDependent,
    QueryIndependent,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::QueryDependent, Phase::QueryIndependent];

    fn index(self) -> usize {
        match self {
            Phase::QueryDependent => 0,
            Phase::QueryIndependent => 1,
        }
    }
}

/// A (phase, tag) pair carried by every charged operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostLabel {
    pub phase: Phase,
    pub tag: OpTag,
}

impl CostLabel {
    pub fn new(phase: Phase, tag: OpTag) -> Self {
        CostLabel { phase, tag }
    }
}

/// MAC counts bucketed by phase and operation tag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpLedger {
    counts: [[u64; 4]; 2],
}

impl OpLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charge `macs` multiply-accumulates to the (phase, tag) bucket.
    pub fn record(&mut self, label: CostLabel, macs: u64) {
        self.counts[label.phase.index()][label.tag.index()] += macs;
    }

    /// Count in one bucket.
    pub fn get(&self, phase: Phase, tag: OpTag) -> u64 {
        self.counts[phase.index()][tag.index()]
    }

    /// Sum over all tags in a phase.
    pub fn phase_total(&self, phase: Phase) -> u64 {
        self.counts[phase.index()].iter().sum()
    }

    /// Self- plus cross-attention MACs in a phase (the quantities the
    /// analytic cost model predicts).
    pub fn attention_macs(&self, phase: Phase) -> u64 {
        self.get(phase, OpTag::SelfAttention) + self.get(phase, OpTag::CrossAttention)
    }

    /// Grand total across phases and tags.
    pub fn total(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.phase_total(p)).sum()
    }

    /// Add every bucket of `other` into `self`.
    pub fn merge(&mut self, other: &OpLedger) {
        for p in 0..2 {
            for t in 0..4 {
                self.counts[p][t] += other.counts[p][t];
            }
        }
    }
}
