//! Heterogeneous GraphSAGE over raw foreign-key edges.

use rand::Rng;

use crate::entity_graph::EntityGraph;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampler::{relation_hops, Block, Hop};
use crate::tensor::{Tape, Var};

/// One layer's weights: a self matrix per node-type and a matrix per
/// relation (one relation per direction of every FK).
#[derive(Clone, Debug)]
pub struct BaselineParams {
    pub self_weights: Vec<ParamId>,
    pub relation_weights: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct HeteroSage {
    hops: Vec<Hop>,
    layers: Vec<BaselineParams>,
}

impl HeteroSage {
    pub fn new(store: &mut ParamStore, graph: &EntityGraph, layers: usize, d: usize, rng: &mut impl Rng) -> Self {
        let hops = relation_hops(graph);
        let schema = graph.schema();
        let layers = (0..layers)
            .map(|l| BaselineParams {
                self_weights: schema
                    .tables
                    .iter()
                    .map(|t| store.add_glorot(format!("heterosage/layer{l}/self/{}", t.name), d, d, rng))
                    .collect(),
                relation_weights: hops
                    .iter()
                    .map(|hop| {
                        let Hop::Edge { link, src_holds_fk, .. } = *hop else { unreachable!("relations are edges") };
                        let fk = &graph.links()[link];
                        let dir = if src_holds_fk { "in" } else { "out" };
                        let name = format!("heterosage/layer{l}/rel/{}.{}/{dir}", schema.tables[fk.table].name, fk.column);
                        store.add_glorot(name, d, d, rng)
                    })
                    .collect(),
            })
            .collect();
        Self { hops, layers }
    }

    pub fn hops(&self) -> &[Hop] {
        &self.hops
    }

    pub fn layers(&self) -> &[BaselineParams] {
        &self.layers
    }
}

/// `ReLU(h_v W_self + Σ_R mean_{u ∈ N_R(v)} h_u W_R)` for every sampled
/// node of every type.
pub fn heterosage_layer(
    tape: &Tape,
    bound: &Bound,
    h: &[Option<Var>],
    blocks: &[Block],
    hops: &[Hop],
    params: &BaselineParams,
) -> Result<Vec<Option<Var>>> {
    if blocks.len() != hops.len() || params.relation_weights.len() != hops.len() || params.self_weights.len() != h.len() {
        return Err(Error::Model("baseline layer: relation and block counts differ".into()));
    }
    let mut out = Vec::with_capacity(h.len());
    for (ty, hv) in h.iter().enumerate() {
        let Some(hv) = *hv else {
            out.push(None);
            continue;
        };
        let n = tape.shape(hv).0;
        let mut acc = tape.matmul(hv, bound.var(params.self_weights[ty]))?;
        for ((hop, block), &w) in hops.iter().zip(blocks).zip(&params.relation_weights) {
            if hop.dst() != ty || block.is_empty() {
                continue;
            }
            let hu = h
                .get(hop.src())
                .copied()
                .flatten()
                .ok_or_else(|| Error::Model(format!("relation {hop:?} has no source rows")))?;
            let mean = tape.segment_mean(tape.gather_rows(hu, &block.src)?, &block.dst, n)?;
            acc = tape.add(acc, tape.matmul(mean, bound.var(w))?)?;
        }
        out.push(Some(tape.relu(acc)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn isolated_and_single_neighbor_cases() {
        let mut store = ParamStore::new();
        let params = BaselineParams {
            self_weights: vec![store.add("s0", Tensor::identity(2)), store.add("s1", Tensor::zeros(2, 2))],
            relation_weights: vec![store.add("r", Tensor::identity(2))],
        };
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let h = vec![
            Some(tape.constant(Tensor::from_rows(&[vec![-1.0, 2.0]]))),
            Some(tape.constant(Tensor::from_rows(&[vec![7.0, 7.0], vec![1.0, 1.0]]))),
        ];
        let hop = Hop::Edge {
            src: 0,
            dst: 1,
            link: 0,
            src_holds_fk: true,
        };
        let block = Block {
            dst: vec![0],
            mid: vec![],
            src: vec![0],
        };
        let out = heterosage_layer(&tape, &bound, &h, &[block], &[hop], &params).unwrap();
        // type 0 is isolated: ReLU(h W_self)
        assert_eq!(tape.value(out[0].unwrap()).data(), &[0.0, 2.0]);
        // type 1, W_self = 0: row 0 gets ReLU(h_u), row 1 nothing
        assert_eq!(tape.value(out[1].unwrap()).data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
