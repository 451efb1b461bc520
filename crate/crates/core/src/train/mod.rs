//! Losses, optimizer, metrics and the training / evaluation loops.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod task;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{bce_loss, bpr_loss, l1_loss};
pub use metrics::{map_at_k, mae, roc_auc};
pub use optim::{Adam, AdamConfig};
pub use task::{
    load_task, load_training_table, parse_task, parse_training_table, temporal_split, training_table_from_cells, Labels, Split, SplitName,
    TaskKind, TaskSpec, TrainingTable,
};

use crate::entity_graph::{EntityGraph, FeatureEncoder};
use crate::error::{Error, Result};
use crate::model::{
    export_params, idgnn_candidates, idgnn_scores, import_params, mlp_score, rank, two_tower_scores, IdGnnHead,
    MlpHead, Model, ModelConfig, ModelKind, ParamRecord,
};
use crate::params::{Bound, ParamStore};
use crate::sampler::{batch_rng, make_batches, sample_batches, FanoutConfig, SampledSubgraph, SeedBatch};
use crate::schema::AtomicRoute;
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Scoring head for recommendation tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationHead {
    #[default]
    IdGnn,
    TwoTower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Neighbors drawn per route (or relation) per layer.
    pub fanout: usize,
    pub rng_seed: u64,
    pub patience: usize,
    #[serde(default)]
    pub head: RecommendationHead,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 30,
            batch_size: 512,
            fanout: 16,
            rng_seed: 0,
            patience: 5,
            head: RecommendationHead::IdGnn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.fanout == 0 {
            return Err(Error::InvalidArgument("epochs, batch size and fanout must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub model: ModelKind,
    pub metric: String,
    /// Mean training loss of every epoch run.
    pub train_loss: Vec<f64>,
    /// Validation metric after every epoch run.
    pub val_metric: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Split name to metric values, computed with the kept parameters.
    pub splits: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Trained state persisted to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schema_hash: String,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub routes: Vec<AtomicRoute>,
    pub best_epoch: usize,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", c.format_version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

// Independent RNG families; each is further split by epoch or split.
const TAG_INIT: u64 = 0;
const TAG_SAMPLE: u64 = 1 << 20;
const TAG_SHUFFLE: u64 = 2 << 20;
const TAG_NEGATIVE: u64 = 3 << 20;
const TAG_EVAL: u64 = 4 << 20;
const TAG_EVAL_DEST: u64 = 5 << 20;

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

fn split_tag(s: SplitName) -> u64 {
    match s {
        SplitName::Train => 0,
        SplitName::Val => 1,
        SplitName::Test => 2,
    }
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Divergence(m),
        other => other,
    }
}

#[derive(Clone, Debug)]
enum Head {
    Mlp(MlpHead),
    IdGnn(IdGnnHead),
    TwoTower,
}

/// Per-batch evaluation output.
enum EvalPart {
    Scores(Vec<f64>),
    Rankings(Vec<Vec<usize>>),
}

/// Everything needed to train and evaluate one model on one task.
pub struct Session<'g> {
    graph: &'g EntityGraph,
    routes: Vec<AtomicRoute>,
    task: TaskSpec,
    table: TrainingTable,
    split: Split,
    encoder: FeatureEncoder,
    model: Model,
    head: Head,
    store: ParamStore,
    fanout: FanoutConfig,
    train_cfg: TrainConfig,
    threads: usize,
    best_epoch: usize,
}

impl<'g> Session<'g> {
    pub fn new(
        graph: &'g EntityGraph,
        routes: &[AtomicRoute],
        task: &TaskSpec,
        table: TrainingTable,
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        train_cfg.validate()?;
        task.validate()?;
        let split = temporal_split(&table.times)?;
        let cutoff = split.train.iter().map(|&i| table.times[i]).max().expect("non-empty train split");
        let mask: Vec<Vec<bool>> = (0..graph.num_types())
            .map(|ty| match graph.timestamps(ty) {
                Some(ts) => ts.iter().map(|&t| t <= cutoff).collect(),
                None => vec![true; graph.num_nodes(ty)],
            })
            .collect();
        let encoder = FeatureEncoder::fit(graph.database(), &mask)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.rng_seed, TAG_INIT));
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, graph, &encoder, routes, model_cfg, &mut rng)?;
        let head = match (task.kind, train_cfg.head) {
            (TaskKind::Recommendation, RecommendationHead::IdGnn) => Head::IdGnn(IdGnnHead::new(&mut store, model_cfg.d_model, &mut rng)),
            (TaskKind::Recommendation, RecommendationHead::TwoTower) => Head::TwoTower,
            _ => Head::Mlp(MlpHead::new(&mut store, "head/mlp", model_cfg.d_model, &mut rng)),
        };
        let fanout = FanoutConfig::uniform(model_cfg.layers, model.hops().len(), train_cfg.fanout)?;
        Ok(Self {
            graph,
            routes: routes.to_vec(),
            task: task.clone(),
            table,
            split,
            encoder,
            model,
            head,
            store,
            fanout,
            train_cfg: train_cfg.clone(),
            threads: 1,
            best_epoch: 0,
        })
    }

    /// Caps worker threads for sampling and evaluation. Results do not
    /// depend on the count.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn metric_name(&self) -> &'static str {
        match self.task.kind {
            TaskKind::Classification => "roc_auc",
            TaskKind::Regression => "mae",
            TaskKind::Recommendation => "map_at_k",
        }
    }

    fn higher_is_better(&self) -> bool {
        self.task.kind != TaskKind::Regression
    }

    fn seed_batch(&self, idx: &[usize]) -> SeedBatch {
        SeedBatch {
            node_type: self.table.entity_type,
            node_ids: idx.iter().map(|&i| self.table.rows[i]).collect(),
            seed_times: idx.iter().map(|&i| self.table.times[i]).collect(),
            labels: self
                .table
                .scalar_labels()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    fn sample(&self, batches: &[SeedBatch], seed: u64) -> Result<Vec<SampledSubgraph>> {
        sample_batches(
            self.graph,
            self.model.hops(),
            batches,
            &self.fanout,
            self.model.layers(),
            seed,
            self.threads,
        )
    }

    /// Final-layer embeddings of every sampled node.
    fn embed(&self, tape: &Tape, bound: &Bound, sub: &SampledSubgraph) -> Result<Vec<Option<Var>>> {
        let mut h0 = self.model.initial_embeddings(tape, bound, self.graph, &self.encoder, sub)?;
        if let Head::IdGnn(head) = &self.head {
            let seeds = h0[sub.seed_type].expect("seeds are sampled");
            h0[sub.seed_type] = Some(head.mark_seeds(tape, bound, seeds, &sub.seeds)?);
        }
        self.model.propagate(tape, bound, sub, h0)
    }

    fn seed_rows(&self, tape: &Tape, h: &[Option<Var>], sub: &SampledSubgraph) -> Result<Var> {
        tape.gather_rows(h[sub.seed_type].expect("seeds are sampled"), &sub.seeds)
    }

    /// Destination embeddings for `(row, time)` pairs, each from its own
    /// subgraph.
    fn destination_tower(
        &self,
        tape: &Tape,
        bound: &Bound,
        rows: Vec<usize>,
        times: Vec<i64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let batch = SeedBatch {
            node_type: self.table.destination_type.expect("recommendation task"),
            node_ids: rows,
            seed_times: times,
            labels: None,
        };
        let sub = crate::sampler::temporal_route_sample(
            self.graph,
            self.model.hops(),
            &batch,
            &self.fanout,
            self.model.layers(),
            rng.gen(),
        )?;
        let h = self.model.propagate(
            tape,
            bound,
            &sub,
            self.model.initial_embeddings(tape, bound, self.graph, &self.encoder, &sub)?,
        )?;
        self.seed_rows(tape, &h, &sub)
    }

    /// Training loss of one batch; `None` when the batch offers nothing to
    /// learn from (no in-subgraph candidates or no positives).
    fn batch_loss(
        &self,
        tape: &Tape,
        bound: &Bound,
        idx: &[usize],
        sub: &SampledSubgraph,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>> {
        let h = self.embed(tape, bound, sub)?;
        match (&self.head, &self.table.labels) {
            (Head::Mlp(head), Labels::Scalar(labels)) => {
                let out = mlp_score(tape, bound, head, self.seed_rows(tape, &h, sub)?)?;
                let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
                if self.task.kind == TaskKind::Classification {
                    bce_loss(tape, out, &y).map(Some)
                } else {
                    l1_loss(tape, out, &y).map(Some)
                }
            }
            (Head::IdGnn(head), Labels::Targets(targets)) => {
                let dt = self.table.destination_type.expect("recommendation task");
                let Some(h_dst) = h[dt] else { return Ok(None) };
                let mut locals = Vec::new();
                let mut y = Vec::new();
                for (e, cands) in idgnn_candidates(sub, dt).iter().enumerate() {
                    let gt = &targets[idx[e]];
                    for c in cands {
                        locals.push(c.local);
                        y.push(if gt.binary_search(&c.global).is_ok() { 1.0 } else { 0.0 });
                    }
                }
                if locals.is_empty() {
                    return Ok(None);
                }
                bce_loss(tape, idgnn_scores(tape, bound, head, h_dst, &locals)?, &y).map(Some)
            }
            (Head::TwoTower, Labels::Targets(targets)) => {
                let n_dest = self
                    .graph
                    .num_nodes(self.table.destination_type.expect("recommendation task"));
                let (mut query, mut pos, mut neg, mut times) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for (e, &i) in idx.iter().enumerate() {
                    let gt = &targets[i];
                    if gt.len() >= n_dest {
                        continue;
                    }
                    for &p in gt {
                        let mut n = rng.gen_range(0..n_dest);
                        while gt.binary_search(&n).is_ok() {
                            n = rng.gen_range(0..n_dest);
                        }
                        query.push(sub.seeds[e]);
                        pos.push(p);
                        neg.push(n);
                        times.push(self.table.times[i]);
                    }
                }
                if query.is_empty() {
                    return Ok(None);
                }
                let hq = tape.gather_rows(h[sub.seed_type].expect("seeds are sampled"), &query)?;
                let p = pos.len();
                let rows: Vec<usize> = pos.into_iter().chain(neg).collect();
                let all_times: Vec<i64> = times.iter().chain(&times).copied().collect();
                let hd = self.destination_tower(tape, bound, rows, all_times, rng)?;
                let hp = tape.gather_rows(hd, &(0..p).collect::<Vec<_>>())?;
                let hn = tape.gather_rows(hd, &(p..2 * p).collect::<Vec<_>>())?;
                bpr_loss(tape, two_tower_scores(tape, hq, hp)?, two_tower_scores(tape, hq, hn)?).map(Some)
            }
            _ => Err(Error::Model("head does not fit the task labels".into())),
        }
    }

    /// Runs the epochs, keeps the best-validation parameters and reports
    /// metrics computed with them.
    pub fn train(&mut self) -> Result<MetricsReport> {
        let cfg = self.train_cfg.clone();
        let mut adam = Adam::new(&self.store, cfg.optimizer);
        let mut train_loss = Vec::new();
        let mut val_metric = Vec::new();
        let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
        let mut stale = 0usize;
        for epoch in 0..cfg.epochs {
            let e = epoch as u64;
            let order = make_batches(self.split.train.len(), cfg.batch_size, true, derive_seed(cfg.rng_seed, TAG_SHUFFLE + e))?;
            let batches: Vec<Vec<usize>> = order
                .iter()
                .map(|b| b.iter().map(|&i| self.split.train[i]).collect())
                .collect();
            let seeds: Vec<SeedBatch> = batches.iter().map(|b| self.seed_batch(b)).collect();
            let subs = self.sample(&seeds, derive_seed(cfg.rng_seed, TAG_SAMPLE + e))?;
            let (mut total, mut count) = (0.0, 0usize);
            for (b, (idx, sub)) in batches.iter().zip(&subs).enumerate() {
                let mut rng = batch_rng(derive_seed(cfg.rng_seed, TAG_NEGATIVE + e), b as u64);
                let tape = Tape::new();
                let bound = self.store.bind(&tape);
                let Some(loss) = self.batch_loss(&tape, &bound, idx, sub, &mut rng).map_err(divergence)? else {
                    continue;
                };
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("loss {value} at epoch {epoch}, batch {b}")));
                }
                let grads = tape.backward(loss).map_err(divergence)?;
                adam.step(&mut self.store, &bound, &grads).map_err(divergence)?;
                total += value * idx.len() as f64;
                count += idx.len();
            }
            train_loss.push(if count == 0 { 0.0 } else { total / count as f64 });

            let val = self.evaluate(SplitName::Val)?;
            val_metric.push(val);
            let improved = match &best {
                None => true,
                Some((b, _, _)) if self.higher_is_better() => val > *b,
                Some((b, _, _)) => val < *b,
            };
            if improved {
                let snapshot = self.store.iter().map(|(_, _, t)| t.clone()).collect();
                best = Some((val, epoch, snapshot));
                stale = 0;
            } else {
                stale += 1;
                if stale > cfg.patience {
                    break;
                }
            }
        }
        let (_, best_epoch, snapshot) = best.expect("at least one epoch");
        let ids: Vec<_> = self.store.iter().map(|(id, _, _)| id).collect();
        for (id, t) in ids.into_iter().zip(snapshot) {
            self.store.set(id, t);
        }
        self.best_epoch = best_epoch;

        let mut splits = BTreeMap::new();
        for s in [SplitName::Train, SplitName::Val, SplitName::Test] {
            let v = self.evaluate(s)?;
            splits.insert(s.as_str().to_string(), BTreeMap::from([(self.metric_name().to_string(), v)]));
        }
        Ok(MetricsReport {
            task: self.task.kind,
            model: self.model.config.kind,
            metric: self.metric_name().to_string(),
            train_loss,
            val_metric,
            best_epoch,
            splits,
        })
    }

    fn eval_batch(&self, which: SplitName, b: usize, idx: &[usize]) -> Result<EvalPart> {
        let tag = split_tag(which);
        let seeds = self.seed_batch(idx);
        let mut rng = batch_rng(derive_seed(self.train_cfg.rng_seed, TAG_EVAL + tag), b as u64);
        let sub = crate::sampler::temporal_route_sample(
            self.graph,
            self.model.hops(),
            &seeds,
            &self.fanout,
            self.model.layers(),
            rng.gen(),
        )?;
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let h = self.embed(&tape, &bound, &sub).map_err(divergence)?;
        match &self.head {
            Head::Mlp(head) => {
                let out = mlp_score(&tape, &bound, head, self.seed_rows(&tape, &h, &sub)?)?;
                let v = tape.value(out).data().to_vec();
                Ok(EvalPart::Scores(v))
            }
            Head::IdGnn(head) => {
                let dt = self.table.destination_type.expect("recommendation task");
                let cands = idgnn_candidates(&sub, dt);
                let locals: Vec<usize> = cands.iter().flatten().map(|c| c.local).collect();
                let scores = match h[dt] {
                    Some(h_dst) if !locals.is_empty() => {
                        let s = idgnn_scores(&tape, &bound, head, h_dst, &locals)?;
                        let v = tape.value(s).data().to_vec();
                        v
                    }
                    _ => Vec::new(),
                };
                let mut offset = 0;
                let mut rankings = Vec::with_capacity(cands.len());
                for c in &cands {
                    let ids: Vec<usize> = c.iter().map(|c| c.global).collect();
                    let r = rank(&ids, &scores[offset..offset + ids.len()]);
                    offset += ids.len();
                    rankings.push(r.into_iter().map(|(id, _)| id).collect());
                }
                check_finite(&scores)?;
                Ok(EvalPart::Rankings(rankings))
            }
            Head::TwoTower => {
                let n_dest = self
                    .graph
                    .num_nodes(self.table.destination_type.expect("recommendation task"));
                let k = self.task.k.unwrap_or(1);
                let mut dest_rng = batch_rng(derive_seed(self.train_cfg.rng_seed, TAG_EVAL_DEST + tag), b as u64);
                let hq = self.seed_rows(&tape, &h, &sub)?;
                let mut by_time: BTreeMap<i64, Var> = BTreeMap::new();
                let mut rankings = Vec::with_capacity(idx.len());
                for (e, &i) in idx.iter().enumerate() {
                    let t = self.table.times[i];
                    let hd = match by_time.get(&t) {
                        Some(&v) => v,
                        None => {
                            let v = self.destination_tower(&tape, &bound, (0..n_dest).collect(), vec![t; n_dest], &mut dest_rng)?;
                            by_time.insert(t, v);
                            v
                        }
                    };
                    let q = tape.gather_rows(hq, &vec![e; n_dest])?;
                    let s = two_tower_scores(&tape, q, hd)?;
                    let scores = tape.value(s).data().to_vec();
                    check_finite(&scores)?;
                    let ids: Vec<usize> = (0..n_dest).collect();
                    rankings.push(rank(&ids, &scores).into_iter().take(k).map(|(id, _)| id).collect());
                }
                Ok(EvalPart::Rankings(rankings))
            }
        }
    }

    /// The task metric on one split with the current parameters. Sampling
    /// is keyed by `(seed, split, batch)`, so repeated calls agree bitwise.
    pub fn evaluate(&self, which: SplitName) -> Result<f64> {
        let rows = self.split.part(which);
        let batches = make_batches(rows.len(), self.train_cfg.batch_size, false, 0)?;
        let batches: Vec<Vec<usize>> = batches.iter().map(|b| b.iter().map(|&i| rows[i]).collect()).collect();
        let run = |(b, idx): (usize, &Vec<usize>)| self.eval_batch(which, b, idx);
        let parts: Vec<EvalPart> = if self.threads <= 1 {
            batches.iter().enumerate().map(run).collect::<Result<_>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            pool.install(|| batches.par_iter().enumerate().map(run).collect::<Result<_>>())?
        };
        let flat: Vec<usize> = batches.concat();
        match &self.table.labels {
            Labels::Scalar(labels) => {
                let mut scores = Vec::with_capacity(flat.len());
                for p in parts {
                    if let EvalPart::Scores(s) = p {
                        scores.extend(s);
                    }
                }
                check_finite(&scores)?;
                let y: Vec<f64> = flat.iter().map(|&i| labels[i]).collect();
                if self.task.kind == TaskKind::Classification {
                    roc_auc(&scores, &y)
                } else {
                    mae(&scores, &y)
                }
            }
            Labels::Targets(targets) => {
                let mut ranked = Vec::with_capacity(flat.len());
                for p in parts {
                    if let EvalPart::Rankings(r) = p {
                        ranked.extend(r);
                    }
                }
                let gt: Vec<Vec<usize>> = flat.iter().map(|&i| targets[i].clone()).collect();
                map_at_k(&ranked, &gt, self.task.k.unwrap_or(1))
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            schema_hash: self.graph.schema().content_hash(),
            task: self.task.clone(),
            model: self.model.config.clone(),
            training: self.train_cfg.clone(),
            routes: self.routes.clone(),
            best_epoch: self.best_epoch,
            params: export_params(&self.store),
        }
    }

    /// Replaces the parameters with a checkpoint's, after checking that it
    /// was produced for this schema and route set.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let hash = self.graph.schema().content_hash();
        if ckpt.schema_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on schema {}, this schema hashes to {hash}",
                ckpt.schema_hash
            )));
        }
        if ckpt.routes != self.routes {
            return Err(Error::Checkpoint("checkpoint route list differs from this schema's".into()));
        }
        import_params(&mut self.store, &ckpt.params)?;
        self.best_epoch = ckpt.best_epoch;
        Ok(())
    }
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence("non-finite prediction".into()))
    }
}
