//! Temporal, route-aware neighbor sampling.
//!
//! Sampling runs from the outermost layer inwards. At each layer every
//! current destination draws its neighbors along each hop that ends at its
//! type; newly reached sources (and mids of types that are themselves hop
//! destinations) join the destination set of the next inner layer. Only
//! rows whose timestamp is at or before the serving seed time are eligible;
//! rows of tables without a time column always are.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::entity_graph::EntityGraph;
use crate::error::{Error, Result};
use crate::schema::{AtomicRoute, LinkDirection, RouteKind};

/// A sampling unit: either a single FK edge or a `src -> mid -> dst` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Hop {
    Edge {
        src: usize,
        dst: usize,
        /// Index into [`EntityGraph::links`].
        link: usize,
        /// The source type holds the foreign key (dst aggregates the rows
        /// referencing it); otherwise dst holds it and has one neighbor.
        src_holds_fk: bool,
    },
    Triple {
        src: usize,
        mid: usize,
        dst: usize,
        /// Link `mid -> src`.
        src_link: usize,
        /// Link `mid -> dst`.
        dst_link: usize,
    },
}

impl Hop {
    pub fn src(&self) -> usize {
        match *self {
            Hop::Edge { src, .. } | Hop::Triple { src, .. } => src,
        }
    }

    pub fn dst(&self) -> usize {
        match *self {
            Hop::Edge { dst, .. } | Hop::Triple { dst, .. } => dst,
        }
    }

    pub fn mid(&self) -> Option<usize> {
        match *self {
            Hop::Edge { .. } => None,
            Hop::Triple { mid, .. } => Some(mid),
        }
    }

    /// Resolves an atomic route against the graph.
    pub fn from_route(graph: &EntityGraph, route: &AtomicRoute) -> Result<Hop> {
        let ty = |name: &str| {
            graph
                .type_index(name)
                .ok_or_else(|| Error::Sampling(format!("unknown route {route}: no table `{name}`")))
        };
        let link = |table: usize, column: &str| {
            graph
                .links()
                .iter()
                .position(|l| l.table == table && l.column == column)
                .ok_or_else(|| Error::Sampling(format!("unknown route {route}: no key `{column}`")))
        };
        match &route.kind {
            RouteKind::Direct {
                src,
                dst,
                fk_table,
                fk_column,
                direction,
            } => {
                let (src, dst, fk_table) = (ty(src)?, ty(dst)?, ty(fk_table)?);
                Ok(Hop::Edge {
                    src,
                    dst,
                    link: link(fk_table, fk_column)?,
                    src_holds_fk: *direction == LinkDirection::FkToPk,
                })
            }
            RouteKind::Composite {
                src,
                mid,
                dst,
                fk_src_column,
                fk_dst_column,
            } => {
                let mid = ty(mid)?;
                Ok(Hop::Triple {
                    src: ty(src)?,
                    mid,
                    dst: ty(dst)?,
                    src_link: link(mid, fk_src_column)?,
                    dst_link: link(mid, fk_dst_column)?,
                })
            }
        }
    }
}

pub fn route_hops(graph: &EntityGraph, routes: &[AtomicRoute]) -> Result<Vec<Hop>> {
    routes.iter().map(|r| Hop::from_route(graph, r)).collect()
}

/// Both directions of every raw FK edge, as consumed by the baseline.
pub fn relation_hops(graph: &EntityGraph) -> Vec<Hop> {
    graph
        .links()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                Hop::Edge {
                    src: l.table,
                    dst: l.target,
                    link: i,
                    src_holds_fk: true,
                },
                Hop::Edge {
                    src: l.target,
                    dst: l.table,
                    link: i,
                    src_holds_fk: false,
                },
            ]
        })
        .collect()
}

/// Maximum neighbors drawn per destination, indexed by `[layer][hop]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FanoutConfig {
    per_layer: Vec<Vec<usize>>,
}

impl FanoutConfig {
    pub fn new(per_layer: Vec<Vec<usize>>) -> Result<Self> {
        if per_layer.iter().flatten().any(|&k| k == 0) {
            return Err(Error::InvalidArgument("fanouts must be at least 1".into()));
        }
        Ok(Self { per_layer })
    }

    pub fn uniform(layers: usize, hops: usize, fanout: usize) -> Result<Self> {
        Self::new(vec![vec![fanout; hops]; layers])
    }

    pub fn get(&self, layer: usize, hop: usize) -> Result<usize> {
        self.per_layer
            .get(layer)
            .and_then(|l| l.get(hop))
            .copied()
            .ok_or_else(|| Error::Sampling(format!("no fanout for hop {hop} at layer {layer}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedBatch {
    pub node_type: usize,
    pub node_ids: Vec<usize>,
    pub seed_times: Vec<i64>,
    pub labels: Option<Vec<f64>>,
}

impl SeedBatch {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// A sampled node: the row it copies and the batch element it serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalNode {
    pub global: usize,
    pub element: usize,
}

/// Sampled neighborhoods of one hop at one layer, sorted by `dst`.
/// `mid` is empty for edge hops. Entries are local node indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Block {
    pub dst: Vec<usize>,
    pub mid: Vec<usize>,
    pub src: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledSubgraph {
    pub seed_type: usize,
    /// Local index of each batch element's seed node.
    pub seeds: Vec<usize>,
    pub seed_times: Vec<i64>,
    /// Local nodes per node-type.
    pub nodes: Vec<Vec<LocalNode>>,
    /// `layers[l][hop]`; layer 0 is applied first, the last layer updates
    /// the seeds.
    pub layers: Vec<Vec<Block>>,
}

impl SampledSubgraph {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Nodes appearing in some block whose timestamp is after the seed time
    /// of the element they serve.
    pub fn leakage_violations(&self, graph: &EntityGraph, hops: &[Hop]) -> usize {
        let late = |ty: usize, local: usize| {
            let n = self.nodes[ty][local];
            graph
                .timestamp(ty, n.global)
                .is_some_and(|t| t > self.seed_times[n.element])
        };
        let mut count = 0;
        for layer in &self.layers {
            for (hop, block) in hops.iter().zip(layer) {
                for i in 0..block.len() {
                    count += usize::from(late(hop.src(), block.src[i]));
                    if let Some(mid) = hop.mid() {
                        count += usize::from(late(mid, block.mid[i]));
                    }
                }
            }
        }
        count
    }
}

/// Every row of every type with every neighbor, repeated for `layers`
/// layers and without any temporal filter. All nodes serve one element
/// whose seeds are the rows of `seed_type`.
pub fn full_neighborhood(graph: &EntityGraph, hops: &[Hop], layers: usize, seed_type: usize) -> SampledSubgraph {
    let links = graph.links();
    let mut layer = Vec::with_capacity(hops.len());
    for hop in hops {
        let mut block = Block::default();
        for d in 0..graph.num_nodes(hop.dst()) {
            match *hop {
                Hop::Edge {
                    link,
                    src_holds_fk: true,
                    ..
                } => {
                    for &s in links[link].referencing(d) {
                        block.dst.push(d);
                        block.src.push(s);
                    }
                }
                Hop::Edge { link, .. } => {
                    if let Some(s) = links[link].forward[d] {
                        block.dst.push(d);
                        block.src.push(s);
                    }
                }
                Hop::Triple { src_link, dst_link, .. } => {
                    for &m in links[dst_link].referencing(d) {
                        if let Some(s) = links[src_link].forward[m] {
                            block.dst.push(d);
                            block.mid.push(m);
                            block.src.push(s);
                        }
                    }
                }
            }
        }
        layer.push(block);
    }
    SampledSubgraph {
        seed_type,
        seeds: (0..graph.num_nodes(seed_type)).collect(),
        seed_times: vec![i64::MAX],
        nodes: (0..graph.num_types())
            .map(|ty| (0..graph.num_nodes(ty)).map(|global| LocalNode { global, element: 0 }).collect())
            .collect(),
        layers: vec![layer; layers],
    }
}

struct Builder<'g> {
    graph: &'g EntityGraph,
    seed_times: Vec<i64>,
    nodes: Vec<Vec<LocalNode>>,
    lookup: HashMap<(usize, LocalNode), usize>,
}

impl Builder<'_> {
    fn local(&mut self, ty: usize, node: LocalNode) -> (usize, bool) {
        if let Some(&i) = self.lookup.get(&(ty, node)) {
            return (i, false);
        }
        let i = self.nodes[ty].len();
        self.nodes[ty].push(node);
        self.lookup.insert((ty, node), i);
        (i, true)
    }

    fn eligible(&self, ty: usize, row: usize, element: usize) -> bool {
        self.graph
            .timestamp(ty, row)
            .is_none_or(|t| t <= self.seed_times[element])
    }
}

fn draw(candidates: Vec<usize>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if candidates.len() <= k {
        return candidates;
    }
    let mut picked: Vec<usize> = sample_indices(rng, candidates.len(), k).into_iter().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| candidates[i]).collect()
}

/// Samples a layered subgraph around `seeds`; fully determined by `rng_seed`.
pub fn temporal_route_sample(
    graph: &EntityGraph,
    hops: &[Hop],
    seeds: &SeedBatch,
    fanout: &FanoutConfig,
    layers: usize,
    rng_seed: u64,
) -> Result<SampledSubgraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_with(graph, hops, seeds, fanout, layers, &mut rng)
}

fn sample_with(
    graph: &EntityGraph,
    hops: &[Hop],
    seeds: &SeedBatch,
    fanout: &FanoutConfig,
    layers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampledSubgraph> {
    if seeds.node_ids.len() != seeds.seed_times.len() {
        return Err(Error::Sampling("seed ids and times differ in length".into()));
    }
    let n_types = graph.num_types();
    for h in hops {
        let types = [Some(h.src()), h.mid(), Some(h.dst())];
        if types.iter().flatten().any(|&t| t >= n_types) {
            return Err(Error::Sampling(format!("unknown route {h:?}")));
        }
    }
    for l in 0..layers {
        for h in 0..hops.len() {
            fanout.get(l, h)?;
        }
    }
    let is_destination: Vec<bool> = (0..n_types).map(|t| hops.iter().any(|h| h.dst() == t)).collect();

    let mut b = Builder {
        graph,
        seed_times: seeds.seed_times.clone(),
        nodes: vec![Vec::new(); n_types],
        lookup: HashMap::new(),
    };
    let mut frontier: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_types];
    let mut seed_locals = Vec::with_capacity(seeds.len());
    for (element, &global) in seeds.node_ids.iter().enumerate() {
        if global >= graph.num_nodes(seeds.node_type) {
            return Err(Error::Sampling(format!("seed row {global} out of range")));
        }
        let (local, _) = b.local(seeds.node_type, LocalNode { global, element });
        seed_locals.push(local);
        frontier[seeds.node_type].insert(local);
    }

    let links = graph.links();
    let mut layer_blocks = vec![Vec::new(); layers];
    for l in (0..layers).rev() {
        let mut next = frontier.clone();
        let mut blocks = Vec::with_capacity(hops.len());
        for (hi, hop) in hops.iter().enumerate() {
            let k = fanout.get(l, hi)?;
            let mut block = Block::default();
            let dst_ty = hop.dst();
            for &d in &frontier[dst_ty] {
                let LocalNode { global, element } = b.nodes[dst_ty][d];
                match *hop {
                    Hop::Edge {
                        src,
                        link,
                        src_holds_fk,
                        ..
                    } => {
                        let candidates: Vec<usize> = if src_holds_fk {
                            links[link].referencing(global).to_vec()
                        } else {
                            links[link].forward[global].into_iter().collect()
                        };
                        let candidates = candidates
                            .into_iter()
                            .filter(|&r| b.eligible(src, r, element))
                            .collect();
                        for row in draw(candidates, k, rng) {
                            let (s, _) = b.local(src, LocalNode { global: row, element });
                            next[src].insert(s);
                            block.dst.push(d);
                            block.src.push(s);
                        }
                    }
                    Hop::Triple {
                        src,
                        mid,
                        src_link,
                        dst_link,
                        ..
                    } => {
                        let candidates = links[dst_link]
                            .referencing(global)
                            .iter()
                            .copied()
                            .filter(|&m| b.eligible(mid, m, element))
                            .collect();
                        for m in draw(candidates, k, rng) {
                            let Some(row) = links[src_link].forward[m] else { continue };
                            if !b.eligible(src, row, element) {
                                continue;
                            }
                            let (ml, _) = b.local(mid, LocalNode { global: m, element });
                            let (s, _) = b.local(src, LocalNode { global: row, element });
                            next[src].insert(s);
                            if is_destination[mid] {
                                next[mid].insert(ml);
                            }
                            block.dst.push(d);
                            block.mid.push(ml);
                            block.src.push(s);
                        }
                    }
                }
            }
            blocks.push(block);
        }
        layer_blocks[l] = blocks;
        frontier = next;
    }

    Ok(SampledSubgraph {
        seed_type: seeds.node_type,
        seeds: seed_locals,
        seed_times: seeds.seed_times.clone(),
        nodes: b.nodes,
        layers: layer_blocks,
    })
}

/// RNG for batch `index` of a run seeded with `seed`; independent of how
/// many batches are sampled or in what order.
pub fn batch_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples many batches, each from its own `(rng_seed, index)` stream, on
/// up to `threads` worker threads. Output equals sequential sampling.
pub fn sample_batches(
    graph: &EntityGraph,
    hops: &[Hop],
    batches: &[SeedBatch],
    fanout: &FanoutConfig,
    layers: usize,
    rng_seed: u64,
    threads: usize,
) -> Result<Vec<SampledSubgraph>> {
    let one = |(i, s): (usize, &SeedBatch)| {
        let mut rng = batch_rng(rng_seed, i as u64);
        sample_with(graph, hops, s, fanout, layers, &mut rng)
    };
    if threads <= 1 {
        return batches.iter().enumerate().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| batches.par_iter().enumerate().map(one).collect())
}

/// Partitions `0..n` into batches of at most `batch_size`, optionally
/// shuffled by `rng_seed`.
pub fn make_batches(n: usize, batch_size: usize, shuffle: bool, rng_seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty task table".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
