//! Prediction heads on top of final-layer embeddings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampler::SampledSubgraph;
use crate::tensor::{Tape, Tensor, Var};

/// Two affine layers with a ReLU between; one raw output per row.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add_glorot(format!("{prefix}/w1"), d, d, rng),
            b1: store.add_zeros(format!("{prefix}/b1"), 1, d),
            w2: store.add_glorot(format!("{prefix}/w2"), d, 1, rng),
            b2: store.add_zeros(format!("{prefix}/b2"), 1, 1),
        }
    }
}

/// `n x 1` logits (or regression values) for `n` embedding rows.
pub fn mlp_score(tape: &Tape, bound: &Bound, head: &MlpHead, h: Var) -> Result<Var> {
    let hidden = tape.add_row(tape.matmul(h, bound.var(head.w1))?, bound.var(head.b1))?;
    let hidden = tape.relu(hidden);
    tape.add_row(tape.matmul(hidden, bound.var(head.w2))?, bound.var(head.b2))
}

/// Identity-aware head: the seed of each subgraph is marked with a learned
/// vector before message passing, and candidates are scored by an MLP.
#[derive(Clone, Debug)]
pub struct IdGnnHead {
    pub identity: ParamId,
    pub mlp: MlpHead,
}

impl IdGnnHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            identity: store.add_glorot("head/idgnn/identity", 1, d, rng),
            mlp: MlpHead::new(store, "head/idgnn/mlp", d, rng),
        }
    }

    /// Adds the identity vector to the `seeds` rows of `h0`.
    pub fn mark_seeds(&self, tape: &Tape, bound: &Bound, h0: Var, seeds: &[usize]) -> Result<Var> {
        let n = tape.shape(h0).0;
        let mut indicator = Tensor::zeros(n, 1);
        for &s in seeds {
            if s >= n {
                return Err(Error::Shape(format!("seed row {s} of {n}")));
            }
            indicator.set(s, 0, 1.0);
        }
        let marks = tape.matmul(tape.constant(indicator), bound.var(self.identity))?;
        tape.add(h0, marks)
    }
}

/// One in-subgraph candidate of an ID-GNN query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub local: usize,
    pub global: usize,
}

/// Per batch element, the distinct sampled nodes of `target_type`, ordered
/// by global id. Empty when that type was never reached.
pub fn idgnn_candidates(sub: &SampledSubgraph, target_type: usize) -> Vec<Vec<Candidate>> {
    let mut per = vec![Vec::new(); sub.seeds.len()];
    if let Some(nodes) = sub.nodes.get(target_type) {
        for (local, n) in nodes.iter().enumerate() {
            per[n.element].push(Candidate { local, global: n.global });
        }
    }
    for c in &mut per {
        c.sort_by_key(|c| c.global);
    }
    per
}

/// MLP scores for the given local rows of the target type.
pub fn idgnn_scores(tape: &Tape, bound: &Bound, head: &IdGnnHead, h_target: Var, locals: &[usize]) -> Result<Var> {
    mlp_score(tape, bound, &head.mlp, tape.gather_rows(h_target, locals)?)
}

/// Inner product of each `h_src` row with the matching `h_dst` row.
pub fn two_tower_scores(tape: &Tape, h_src: Var, h_dst: Var) -> Result<Var> {
    Ok(tape.row_sum(tape.mul(h_src, h_dst)?))
}

/// `(id, score)` pairs sorted by descending score, ties by ascending id.
pub fn rank(ids: &[usize], scores: &[f64]) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = ids.iter().copied().zip(scores.iter().copied()).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs
}
