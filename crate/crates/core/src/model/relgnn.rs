//! Composite message passing along atomic routes.

use rand::Rng;

use super::layers::{attn_aggr, fuse, sage_aggr, AggrVars};
use super::rpe::RpeTable;
use super::Aggregator;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampler::{Block, Hop};
use crate::tensor::{Tape, Var};

/// Weights of one route at one layer.
#[derive(Clone, Debug)]
pub struct RouteParams {
    /// `(W1, W2)` of the fusion step; absent for direct routes.
    pub fuse: Option<(ParamId, ParamId)>,
    /// `(WQ, WK)`; absent under the mean aggregator.
    pub query_key: Option<(ParamId, ParamId)>,
    pub value: ParamId,
    pub proj: ParamId,
}

impl RouteParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        composite: bool,
        aggregator: Aggregator,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut m = |name: &str| store.add_glorot(format!("{prefix}/{name}"), d, d, rng);
        let fuse = composite.then(|| (m("w1"), m("w2")));
        let query_key = (aggregator == Aggregator::Attention).then(|| (m("wq"), m("wk")));
        let value = m("wv");
        let proj = m("wproj");
        // A zero key projection starts every attention head uniform, i.e. at
        // the mean aggregator; its gradient is nonzero, so it moves away.
        if let Some((_, wk)) = query_key {
            store.set(wk, crate::tensor::Tensor::zeros(d, d));
        }
        Self {
            fuse,
            query_key,
            value,
            proj,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((a, b)) = self.fuse {
            ids.extend([a, b]);
        }
        if let Some((a, b)) = self.query_key {
            ids.extend([a, b]);
        }
        ids.extend([self.value, self.proj]);
        ids
    }

    fn aggr_vars(&self, bound: &Bound) -> AggrVars {
        AggrVars {
            query_key: self.query_key.map(|(q, k)| (bound.var(q), bound.var(k))),
            value: bound.var(self.value),
            proj: bound.var(self.proj),
        }
    }
}

/// Settings shared by every route of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerSpec<'a> {
    pub heads: usize,
    pub aggregator: Aggregator,
    pub final_layer: bool,
    pub rpe: Option<&'a RpeTable>,
}

fn present(h: &[Option<Var>], ty: usize, hop: &Hop) -> Result<Var> {
    h.get(ty)
        .copied()
        .flatten()
        .ok_or_else(|| Error::Model(format!("route {hop:?} references node-type {ty}, absent from the subgraph")))
}

/// The message a route delivers to every local node of its destination
/// type, before summation and activation. `None` when no node of that type
/// was sampled.
pub fn route_message(
    tape: &Tape,
    bound: &Bound,
    h: &[Option<Var>],
    block: &Block,
    hop: &Hop,
    params: &RouteParams,
    spec: &LayerSpec,
) -> Result<Option<Var>> {
    let Some(h_dst) = h.get(hop.dst()).copied().flatten() else {
        if block.is_empty() {
            return Ok(None);
        }
        return Err(Error::Model(format!("route {hop:?} has neighbors but no destination rows")));
    };
    let h_nbr = if block.is_empty() {
        tape.constant(crate::tensor::Tensor::zeros(0, tape.shape(h_dst).1))
    } else {
        let src = tape.gather_rows(present(h, hop.src(), hop)?, &block.src)?;
        match (hop.mid(), params.fuse) {
            (None, None) => src,
            (Some(mid), Some((w1, w2))) => {
                let mid = tape.gather_rows(present(h, mid, hop)?, &block.mid)?;
                fuse(tape, mid, src, bound.var(w1), bound.var(w2))?
            }
            _ => return Err(Error::Model(format!("route {hop:?} and its weights disagree on fusion"))),
        }
    };
    let w = params.aggr_vars(bound);
    let m = match spec.aggregator {
        Aggregator::Attention => attn_aggr(tape, h_dst, h_nbr, &block.dst, &w, spec.heads)?,
        Aggregator::Sage => sage_aggr(tape, h_dst, h_nbr, &block.dst, &w)?,
    };
    match spec.rpe {
        Some(rpe) => Ok(Some(rpe.apply(tape, m, hop.src(), hop.dst())?)),
        None => Ok(Some(m)),
    }
}

/// One layer: each destination type receives the sum of its routes'
/// messages, followed by ReLU except at the final layer. Types that no
/// route ends at are passed through unchanged.
pub fn relgnn_layer(
    tape: &Tape,
    bound: &Bound,
    h: &[Option<Var>],
    blocks: &[Block],
    hops: &[Hop],
    params: &[RouteParams],
    spec: &LayerSpec,
) -> Result<Vec<Option<Var>>> {
    if blocks.len() != hops.len() || params.len() != hops.len() {
        return Err(Error::Model(format!(
            "{} routes, {} blocks, {} weight sets",
            hops.len(),
            blocks.len(),
            params.len()
        )));
    }
    let mut sums: Vec<Option<Var>> = vec![None; h.len()];
    for ((hop, block), p) in hops.iter().zip(blocks).zip(params) {
        if hop.dst() >= h.len() {
            return Err(Error::Model(format!("route {hop:?} ends outside the subgraph")));
        }
        if let Some(m) = route_message(tape, bound, h, block, hop, p, spec)? {
            let slot = &mut sums[hop.dst()];
            *slot = Some(match *slot {
                Some(acc) => tape.add(acc, m)?,
                None => m,
            });
        }
    }
    Ok(sums
        .into_iter()
        .zip(h)
        .map(|(s, &old)| match s {
            Some(v) if !spec.final_layer => Some(tape.relu(v)),
            Some(v) => Some(v),
            None => old,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(composite: bool, d: usize) -> (ParamStore, RouteParams) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let p = RouteParams::new(&mut store, "r", composite, Aggregator::Attention, d, &mut rng);
        (store, p)
    }

    fn spec(final_layer: bool) -> LayerSpec<'static> {
        LayerSpec {
            heads: 1,
            aggregator: Aggregator::Attention,
            final_layer,
            rpe: None,
        }
    }

    #[test]
    fn identity_composite_adds_mid_and_src() {
        let (mut store, p) = store_with(true, 2);
        let (w1, w2) = p.fuse.unwrap();
        for id in [w1, w2, p.value] {
            store.set(id, Tensor::identity(2));
        }
        store.set(p.proj, Tensor::zeros(2, 2));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let h = vec![
            Some(tape.constant(Tensor::from_rows(&[vec![1.0, -3.0]]))),
            Some(tape.constant(Tensor::from_rows(&[vec![0.5, 1.0]]))),
            Some(tape.constant(Tensor::from_rows(&[vec![9.0, 9.0]]))),
        ];
        let hop = Hop::Triple {
            src: 0,
            mid: 1,
            dst: 2,
            src_link: 0,
            dst_link: 1,
        };
        let block = Block {
            dst: vec![0],
            mid: vec![0],
            src: vec![0],
        };
        let out = relgnn_layer(&tape, &bound, &h, &[block], &[hop], &[p], &spec(false)).unwrap();
        assert_eq!(tape.value(out[2].unwrap()).data(), &[1.5, 0.0]);
        // types that are no route's destination keep their rows
        assert_eq!(out[0], h[0]);
        assert_eq!(out[1], h[1]);
    }

    #[test]
    fn missing_source_rows_are_an_error() {
        let (store, p) = store_with(false, 2);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let h = vec![None, Some(tape.constant(Tensor::zeros(1, 2)))];
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
        assert!(matches!(
            relgnn_layer(&tape, &bound, &h, &[block], &[hop], &[p], &spec(true)),
            Err(Error::Model(_))
        ));
    }
}
