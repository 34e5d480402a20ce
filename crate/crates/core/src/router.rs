//! Chunk router: gated-MLP forward pass, per-chunk expert vote and
//! strategy planning with routing freezing (RF) and routing sharing (RS).
//!
//! An "expert" here is a bit-width. The router scores every token of a
//! chunk against each expert, each token picks its top-1 expert, and the
//! chunk takes the most frequently picked one.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, matmul, silu, softmax_rows, Matrix};

pub const SUPPORTED_BITS: [u8; 4] = [2, 4, 8, 16];

/// Ordered bit-widths, one per expert, strictly decreasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSet {
    bits: Vec<u8>,
}

impl ExpertSet {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.len() < 2 {
            return Err(Error::Parameter("an expert set needs at least two experts".into()));
        }
        if let Some(b) = bits.iter().find(|b| !SUPPORTED_BITS.contains(b)) {
            return Err(Error::Parameter(format!("unsupported expert bit-width {b}")));
        }
        if bits.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Parameter(format!(
                "expert bit-widths must be strictly decreasing, got {bits:?}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bits_of(&self, expert: usize) -> u8 {
        self.bits[expert]
    }
}

impl Default for ExpertSet {
    fn default() -> Self {
        Self { bits: vec![16, 4, 2] }
    }
}

/// Weights of the gated router MLP: `softmax(silu((C·w1) ⊙ (C·w2)) · w3)`.
///
/// `w1`, `w2` are `D×M`; `w3` is `M×M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
}

impl RouterParams {
    pub fn new(w1: Matrix, w2: Matrix, w3: Matrix) -> Result<Self> {
        let (d, m) = w1.shape();
        if w2.shape() != (d, m) || w3.shape() != (m, m) {
            return Err(Error::Shape(format!(
                "router weights {:?}, {:?}, {:?} are inconsistent",
                w1.shape(),
                w2.shape(),
                w3.shape()
            )));
        }
        if !(w1.is_finite() && w2.is_finite() && w3.is_finite()) {
            return Err(Error::Numeric("non-finite router weight".into()));
        }
        Ok(Self { w1, w2, w3 })
    }

    /// Gaussian initialization; `w1`/`w2` scaled by `1/sqrt(D)`.
    pub fn init<R: Rng + ?Sized>(dim: usize, experts: usize, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            w1: Matrix::random_normal(dim, experts, s, rng),
            w2: Matrix::random_normal(dim, experts, s, rng),
            w3: Matrix::random_normal(experts, experts, 1.0, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.w2.data().len() + self.w3.data().len()
    }

    /// Parameters concatenated as w1 ‖ w2 ‖ w3, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(self.w3.data());
        v
    }

    pub fn from_flat(dim: usize, experts: usize, flat: &[f64]) -> Result<Self> {
        let dm = dim * experts;
        if flat.len() != 2 * dm + experts * experts {
            return Err(Error::Shape(format!(
                "{} values for a router with D={dim}, M={experts}",
                flat.len()
            )));
        }
        Self::new(
            Matrix::from_vec(dim, experts, flat[..dm].to_vec())?,
            Matrix::from_vec(dim, experts, flat[dm..2 * dm].to_vec())?,
            Matrix::from_vec(experts, experts, flat[2 * dm..].to_vec())?,
        )
    }
}

/// Intermediates of one router forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct RouterTrace {
    pub a: Matrix,
    pub b: Matrix,
    pub gate: Matrix,
    pub hidden: Matrix,
    pub probs: Matrix,
}

pub fn router_forward_trace(params: &RouterParams, chunk: &Matrix) -> Result<RouterTrace> {
    if chunk.cols() != params.dim() {
        return Err(Error::Shape(format!(
            "chunk has {} features, router expects {}",
            chunk.cols(),
            params.dim()
        )));
    }
    if !chunk.is_finite() {
        return Err(Error::Numeric("non-finite router input".into()));
    }
    let a = matmul(chunk, &params.w1)?;
    let b = matmul(chunk, &params.w2)?;
    let gate = a.hadamard(&b)?;
    let hidden = gate.map(silu);
    let probs = softmax_rows(&matmul(&hidden, &params.w3)?);
    Ok(RouterTrace { a, b, gate, hidden, probs })
}

/// Row-stochastic `N×M` expert probabilities for an `N×D` chunk.
pub fn router_forward(params: &RouterParams, chunk: &Matrix) -> Result<Matrix> {
    Ok(router_forward_trace(params, chunk)?.probs)
}

/// Top-1 expert per token; row ties go to the lower index.
pub fn per_token_experts(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows()).map(|r| argmax(probs.row(r))).collect()
}

/// Modal per-token expert. Ties between equally frequent experts go to the
/// one with the highest bit-width.
pub fn chunk_vote(probs: &Matrix, experts: &ExpertSet) -> Result<usize> {
    if probs.rows() == 0 || probs.cols() == 0 {
        return Err(Error::Shape("empty probability matrix".into()));
    }
    if probs.cols() != experts.len() {
        return Err(Error::Shape(format!(
            "{} probability columns for {} experts",
            probs.cols(),
            experts.len()
        )));
    }
    let mut counts = vec![0usize; experts.len()];
    for e in per_token_experts(probs) {
        counts[e] += 1;
    }
    let mut best = 0;
    for j in 1..counts.len() {
        if counts[j] > counts[best]
            || (counts[j] == counts[best] && experts.bits_of(j) > experts.bits_of(best))
        {
            best = j;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub probs: Matrix,
    pub per_token_expert: Vec<usize>,
    pub chunk_expert: usize,
}

pub fn route_chunk(params: &RouterParams, chunk: &Matrix, experts: &ExpertSet) -> Result<RoutingDecision> {
    let probs = router_forward(params, chunk)?;
    let per_token_expert = per_token_experts(&probs);
    let chunk_expert = chunk_vote(&probs, experts)?;
    Ok(RoutingDecision { probs, per_token_expert, chunk_expert })
}

/// What decides the bit-width of a routable chunk.
#[derive(Clone, Debug, PartialEq)]
pub enum RoutingPolicy {
    Learned { params: RouterParams, experts: ExpertSet },
    /// Every routable chunk gets these bits; no router runs.
    Fixed(u8),
    /// Bits by chunk index; chunks past the end of the list reuse its last
    /// entry. No router runs.
    Scheduled(Vec<u8>),
}

impl RoutingPolicy {
    /// Returns `(bits, expert index)`; the index is `None` for fixed policies.
    pub fn decide(&self, chunk_index: usize, chunk: &Matrix) -> Result<(u8, Option<usize>)> {
        match self {
            RoutingPolicy::Learned { params, experts } => {
                let d = route_chunk(params, chunk, experts)?;
                Ok((experts.bits_of(d.chunk_expert), Some(d.chunk_expert)))
            }
            RoutingPolicy::Fixed(bits) => Ok((*bits, None)),
            RoutingPolicy::Scheduled(bits) => {
                let b = bits.get(chunk_index).or(bits.last()).copied().unwrap_or(16);
                Ok((b, None))
            }
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, RoutingPolicy::Learned { .. })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            RoutingPolicy::Learned { params, experts } => {
                if params.dim() != dim || params.num_experts() != experts.len() {
                    return Err(Error::Shape(format!(
                        "router D={} M={} does not fit model D={dim} with {} experts",
                        params.dim(),
                        params.num_experts(),
                        experts.len()
                    )));
                }
                Ok(())
            }
            RoutingPolicy::Fixed(bits) if SUPPORTED_BITS.contains(bits) => Ok(()),
            RoutingPolicy::Fixed(bits) => Err(Error::Parameter(format!("unsupported bits {bits}"))),
            RoutingPolicy::Scheduled(bits) => match bits.iter().find(|b| !SUPPORTED_BITS.contains(b)) {
                Some(b) => Err(Error::Parameter(format!("unsupported bits {b}"))),
                None => Ok(()),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Routed,
    FrozenFp16,
    ResidualFp16,
    Shared,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Routed => "routed",
            Origin::FrozenFp16 => "frozen_fp16",
            Origin::ResidualFp16 => "residual_fp16",
            Origin::Shared => "shared",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Origin::Routed => 0,
            Origin::FrozenFp16 => 1,
            Origin::ResidualFp16 => 2,
            Origin::Shared => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Origin::Routed,
            1 => Origin::FrozenFp16,
            2 => Origin::ResidualFp16,
            3 => Origin::Shared,
            _ => return Err(Error::Format(format!("unknown origin code {code}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyEntry {
    pub start: usize,
    pub end: usize,
    pub bits: u8,
    pub origin: Origin,
}

impl StrategyEntry {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Per-block, per-chunk bit assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyMap {
    pub blocks: Vec<Vec<StrategyEntry>>,
    pub chunk_size: usize,
    pub rs_group_size: usize,
}

impl StrategyMap {
    /// Same uniform bit-width for every token of every block, tiled by chunk.
    pub fn uniform(blocks: usize, seq_len: usize, chunk_size: usize, bits: u8) -> Self {
        let entries: Vec<StrategyEntry> = tile(seq_len, chunk_size)
            .into_iter()
            .map(|r| StrategyEntry { start: r.start, end: r.end, bits, origin: Origin::Routed })
            .collect();
        Self { blocks: vec![entries; blocks], chunk_size, rs_group_size: 1 }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Tokens covered by block 0.
    pub fn seq_len(&self) -> usize {
        self.blocks.first().and_then(|b| b.last()).map_or(0, |e| e.end)
    }

    pub fn leader_of(&self, block: usize) -> usize {
        block - block % self.rs_group_size
    }

    /// Checks that every block tiles `[0, seq_len)` contiguously.
    pub fn check_tiling(&self, seq_len: usize) -> Result<()> {
        for (b, entries) in self.blocks.iter().enumerate() {
            let mut pos = 0;
            for e in entries {
                if e.start != pos || e.end <= e.start {
                    return Err(Error::Shape(format!("block {b}: entry {e:?} breaks tiling at {pos}")));
                }
                pos = e.end;
            }
            if pos != seq_len {
                return Err(Error::Shape(format!("block {b} covers {pos} tokens, expected {seq_len}")));
            }
        }
        Ok(())
    }

    /// Per-token bits of one block.
    pub fn token_bits(&self, block: usize) -> Vec<u8> {
        self.blocks[block]
            .iter()
            .flat_map(|e| std::iter::repeat(e.bits).take(e.len()))
            .collect()
    }
}

/// Splits `[0, seq_len)` into full chunks plus an optional shorter residual.
pub fn tile(seq_len: usize, chunk_size: usize) -> Vec<Range<usize>> {
    assert!(chunk_size > 0, "chunk_size must be positive");
    (0..seq_len)
        .step_by(chunk_size)
        .map(|s| s..(s + chunk_size).min(seq_len))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub chunk_size: usize,
    pub rf: bool,
    pub rs_group_size: usize,
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Parameter("chunk_size must be at least 1".into()));
        }
        if self.rs_group_size == 0 {
            return Err(Error::Parameter("rs_group_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_leader(&self, block: usize) -> bool {
        block % self.rs_group_size == 0
    }

    pub fn is_routable(&self, chunk_index: usize, chunk_len: usize) -> bool {
        chunk_len == self.chunk_size && !(self.rf && chunk_index == 0)
    }

    /// Entry for a chunk that never reaches the router, if any.
    pub fn fixed_entry(&self, chunk_index: usize, range: Range<usize>) -> Option<StrategyEntry> {
        let origin = if range.len() < self.chunk_size {
            Origin::ResidualFp16
        } else if self.rf && chunk_index == 0 {
            Origin::FrozenFp16
        } else {
            return None;
        };
        Some(StrategyEntry { start: range.start, end: range.end, bits: 16, origin })
    }
}

/// Builds a [`StrategyMap`] one block at a time, so callers whose router
/// inputs depend on earlier blocks (the transformer) can interleave.
#[derive(Clone, Debug)]
pub struct StrategyPlanner {
    cfg: PlanConfig,
    seq_len: usize,
    map: StrategyMap,
    invocations: usize,
}

impl StrategyPlanner {
    pub fn new(cfg: PlanConfig, seq_len: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            seq_len,
            map: StrategyMap { blocks: Vec::new(), chunk_size: cfg.chunk_size, rs_group_size: cfg.rs_group_size },
            invocations: 0,
        })
    }

    pub fn config(&self) -> &PlanConfig {
        &self.cfg
    }

    /// Plans the next block. `decide(chunk_index, range)` is called only for
    /// routable chunks of group-leader blocks and returns the chunk's bits.
    pub fn plan_next_block<F>(&mut self, mut decide: F) -> Result<&[StrategyEntry]>
    where
        F: FnMut(usize, Range<usize>) -> Result<u8>,
    {
        let block = self.map.blocks.len();
        let entries = if self.cfg.is_leader(block) {
            let mut entries = Vec::new();
            for (idx, range) in tile(self.seq_len, self.cfg.chunk_size).into_iter().enumerate() {
                let entry = match self.cfg.fixed_entry(idx, range.clone()) {
                    Some(e) => e,
                    None => {
                        self.invocations += 1;
                        let bits = decide(idx, range.clone())?;
                        StrategyEntry { start: range.start, end: range.end, bits, origin: Origin::Routed }
                    }
                };
                entries.push(entry);
            }
            entries
        } else {
            let leader = self.map.leader_of(block);
            self.map.blocks[leader]
                .iter()
                .map(|e| StrategyEntry {
                    origin: if e.origin == Origin::Routed { Origin::Shared } else { e.origin },
                    ..e.clone()
                })
                .collect()
        };
        self.map.blocks.push(entries);
        Ok(self.map.blocks.last().expect("just pushed"))
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn finish(self) -> (StrategyMap, usize) {
        (self.map, self.invocations)
    }
}

/// Plans every block up front from a supplier of router probabilities.
///
/// `probs_for(block, chunk_index, range)` is only asked about leader blocks'
/// routable chunks. Returns the map and the number of router invocations.
pub fn plan_strategy<F>(
    seq_len: usize,
    blocks: usize,
    cfg: PlanConfig,
    experts: &ExpertSet,
    mut probs_for: F,
) -> Result<(StrategyMap, usize)>
where
    F: FnMut(usize, usize, Range<usize>) -> Result<Matrix>,
{
    if seq_len == 0 {
        return Err(Error::Parameter("seq_len must be at least 1".into()));
    }
    let mut planner = StrategyPlanner::new(cfg, seq_len)?;
    for block in 0..blocks {
        planner.plan_next_block(|idx, range| {
            let probs = probs_for(block, idx, range)?;
            Ok(experts.bits_of(chunk_vote(&probs, experts)?))
        })?;
    }
    Ok(planner.finish())
}
