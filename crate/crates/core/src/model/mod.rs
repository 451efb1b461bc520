//! Graph neural networks over sampled subgraphs: the route-based model,
//! its mean-aggregation ablation and the heterogeneous SAGE baseline.

pub mod baseline;
pub mod heads;
pub mod layers;
pub mod relgnn;
pub mod rpe;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use baseline::{heterosage_layer, BaselineParams, HeteroSage};
pub use heads::{idgnn_candidates, idgnn_scores, mlp_score, rank, two_tower_scores, Candidate, IdGnnHead, MlpHead};
pub use layers::{attn_aggr, attn_aggr_weights, fuse, sage_aggr, AggrVars};
pub use relgnn::{relgnn_layer, route_message, LayerSpec, RouteParams};
pub use rpe::{rpe_bias, spectral_pair_basis, RpeConfig, RpeParams, RpeTable};

use crate::entity_graph::{encode_nodes, EntityGraph, FeatureEncoder, InputParams, TimeEncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::sampler::{route_hops, Hop, SampledSubgraph};
use crate::schema::AtomicRoute;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "relgnn")]
    RelGnn,
    #[serde(rename = "relgnn_noattn")]
    RelGnnNoAttn,
    #[serde(rename = "heterosage")]
    HeteroSage,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relgnn" => Ok(Self::RelGnn),
            "relgnn-noattn" | "relgnn_noattn" => Ok(Self::RelGnnNoAttn),
            "heterosage" => Ok(Self::HeteroSage),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Attention,
    Sage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    /// Message-passing layers; for the baseline, one layer is one graph hop.
    pub layers: usize,
    pub heads: usize,
    #[serde(default)]
    pub rpe: Option<RpeConfig>,
    #[serde(default)]
    pub time_encoding: TimeEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.heads == 0 || self.d_model < self.heads || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("width {} does not split into {} heads", self.d_model, self.heads));
        }
        if self.rpe.is_some() && self.kind == ModelKind::HeteroSage {
            return bad("positional encodings apply to route messages only".into());
        }
        self.time_encoding.validate()
    }

    pub fn aggregator(&self) -> Aggregator {
        match self.kind {
            ModelKind::RelGnnNoAttn => Aggregator::Sage,
            _ => Aggregator::Attention,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RelGnn {
    hops: Vec<Hop>,
    layers: Vec<Vec<RouteParams>>,
    rpe: Option<RpeParams>,
    heads: usize,
    aggregator: Aggregator,
}

impl RelGnn {
    pub fn new(
        store: &mut ParamStore,
        graph: &EntityGraph,
        routes: &[AtomicRoute],
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hops = route_hops(graph, routes)?;
        let aggregator = config.aggregator();
        let layers = (0..config.layers)
            .map(|l| {
                routes
                    .iter()
                    .map(|r| {
                        let prefix = format!("relgnn/layer{l}/route{}", r.route_id);
                        RouteParams::new(store, &prefix, r.is_composite(), aggregator, config.d_model, rng)
                    })
                    .collect()
            })
            .collect();
        let rpe = match &config.rpe {
            Some(cfg) => Some(RpeParams::new(store, graph.schema(), cfg, config.d_model, rng)?),
            None => None,
        };
        Ok(Self {
            hops,
            layers,
            rpe,
            heads: config.heads,
            aggregator,
        })
    }

    pub fn layers(&self) -> &[Vec<RouteParams>] {
        &self.layers
    }

    pub fn rpe(&self) -> Option<&RpeParams> {
        self.rpe.as_ref()
    }

    pub fn propagate(&self, tape: &Tape, bound: &Bound, sub: &SampledSubgraph, h0: Vec<Option<Var>>) -> Result<Vec<Option<Var>>> {
        let rpe = match &self.rpe {
            Some(p) => Some(rpe_bias(tape, bound, p)?),
            None => None,
        };
        let mut h = h0;
        for (l, params) in self.layers.iter().enumerate() {
            let spec = LayerSpec {
                heads: self.heads,
                aggregator: self.aggregator,
                final_layer: l + 1 == self.layers.len(),
                rpe: rpe.as_ref(),
            };
            h = relgnn_layer(tape, bound, &h, &sub.layers[l], &self.hops, params, &spec)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    RelGnn(RelGnn),
    HeteroSage(HeteroSage),
}

/// Input encoders plus a message-passing network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub input: InputParams,
    pub network: Network,
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        graph: &EntityGraph,
        encoder: &FeatureEncoder,
        routes: &[AtomicRoute],
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let input = InputParams::new(store, graph.schema(), encoder, config.d_model, config.time_encoding, rng);
        let network = match config.kind {
            ModelKind::HeteroSage => Network::HeteroSage(HeteroSage::new(store, graph, config.layers, config.d_model, rng)),
            _ => Network::RelGnn(RelGnn::new(store, graph, routes, config, rng)?),
        };
        Ok(Self {
            config: config.clone(),
            input,
            network,
        })
    }

    /// The sampling units this model consumes, one block per unit per layer.
    pub fn hops(&self) -> &[Hop] {
        match &self.network {
            Network::RelGnn(m) => &m.hops,
            Network::HeteroSage(m) => m.hops(),
        }
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    /// Layer-0 embeddings of every sampled node, encoded relative to the
    /// seed time of the element it serves.
    pub fn initial_embeddings(
        &self,
        tape: &Tape,
        bound: &Bound,
        graph: &EntityGraph,
        encoder: &FeatureEncoder,
        sub: &SampledSubgraph,
    ) -> Result<Vec<Option<Var>>> {
        sub.nodes
            .iter()
            .enumerate()
            .map(|(ty, nodes)| {
                if nodes.is_empty() {
                    return Ok(None);
                }
                let rows: Vec<usize> = nodes.iter().map(|n| n.global).collect();
                let times: Vec<i64> = nodes.iter().map(|n| sub.seed_times[n.element]).collect();
                encode_nodes(tape, bound, &self.input, graph, encoder, ty, &rows, &times).map(Some)
            })
            .collect()
    }

    pub fn propagate(&self, tape: &Tape, bound: &Bound, sub: &SampledSubgraph, h0: Vec<Option<Var>>) -> Result<Vec<Option<Var>>> {
        if sub.num_layers() != self.config.layers {
            return Err(Error::Model(format!(
                "subgraph has {} layers, model {}",
                sub.num_layers(),
                self.config.layers
            )));
        }
        match &self.network {
            Network::RelGnn(m) => m.propagate(tape, bound, sub, h0),
            Network::HeteroSage(m) => {
                let mut h = h0;
                for (l, params) in m.layers().iter().enumerate() {
                    h = heterosage_layer(tape, bound, &h, &sub.layers[l], m.hops(), params)?;
                }
                Ok(h)
            }
        }
    }
}

/// A named parameter matrix as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn export_params(store: &ParamStore) -> Vec<ParamRecord> {
    store
        .iter()
        .map(|(_, name, t)| ParamRecord {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        })
        .collect()
}

/// Overwrites every parameter of `store` from `records`, which must name
/// exactly the same parameters with the same shapes.
pub fn import_params(store: &mut ParamStore, records: &[ParamRecord]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for r in records {
        let id = store
            .id(&r.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", r.name)))?;
        if store.get(id).shape() != (r.rows, r.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` is {}x{}, model expects {:?}",
                r.name,
                r.rows,
                r.cols,
                store.get(id).shape()
            )));
        }
        let t = Tensor::new(r.rows, r.cols, r.data.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.set(id, t);
    }
    Ok(())
}
