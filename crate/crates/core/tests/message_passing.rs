use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relroute::entity_graph::{build_entity_graph, Database, EntityGraph, FeatureEncoder};
use relroute::model::{
    attn_aggr, attn_aggr_weights, route_message, sage_aggr, AggrVars, LayerSpec, Model, ModelConfig, ModelKind,
    Network, RpeConfig,
};
use relroute::params::ParamStore;
use relroute::sampler::full_neighborhood;
use relroute::schema::{derive_atomic_routes, parse_schema};
use relroute::synth::{generate, MotifConfig};
use relroute::{Tape, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn sorted_segments(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    s.sort_unstable();
    s
}

struct Weights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wp: Tensor,
}

impl Weights {
    fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            wq: random(rng, d, d),
            wk: random(rng, d, d),
            wv: random(rng, d, d),
            wp: random(rng, d, d),
        }
    }

    fn attention(&self, tape: &Tape) -> AggrVars {
        AggrVars {
            query_key: Some((tape.constant(self.wq.clone()), tape.constant(self.wk.clone()))),
            value: tape.constant(self.wv.clone()),
            proj: tape.constant(self.wp.clone()),
        }
    }

    fn mean(&self, tape: &Tape) -> AggrVars {
        AggrVars {
            query_key: None,
            value: tape.constant(self.wv.clone()),
            proj: tape.constant(self.wp.clone()),
        }
    }
}

#[test]
fn attention_weights_are_normalized_per_destination_and_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let heads = rng.gen_range(1..=4);
        let d = heads * rng.gen_range(1..=4);
        let (n, m) = (rng.gen_range(1..6), rng.gen_range(1..20));
        let seg = sorted_segments(&mut rng, m, n);
        let w = Weights::random(&mut rng, d);
        let tape = Tape::new();
        let h_dst = tape.constant(random(&mut rng, n, d));
        let h_nbr = tape.constant(random(&mut rng, m, d).map(|x| 3.0 * x));
        let (_, alpha) = attn_aggr_weights(&tape, h_dst, h_nbr, &seg, &w.attention(&tape), heads).unwrap();
        let alpha = tape.value(alpha.unwrap()).clone();
        assert_eq!(alpha.shape(), (m, heads));
        let mut sums = vec![vec![0.0; heads]; n];
        for (i, &s) in seg.iter().enumerate() {
            for (h, sum) in sums[s].iter_mut().enumerate() {
                *sum += alpha.get(i, h);
            }
        }
        for s in seg.iter().copied().collect::<std::collections::BTreeSet<_>>() {
            for sum in &sums[s] {
                assert!((sum - 1.0).abs() < 1e-12, "{sum}");
            }
        }
    }
}

#[test]
fn single_neighbor_attention_equals_mean_aggregation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let heads = rng.gen_range(1..=4);
        let d = heads * rng.gen_range(1..=4);
        let n = rng.gen_range(1..8);
        let seg: Vec<usize> = (0..n).collect();
        let w = Weights::random(&mut rng, d);
        let tape = Tape::new();
        let h_dst = tape.constant(random(&mut rng, n, d));
        let h_nbr = tape.constant(random(&mut rng, n, d));
        let a = attn_aggr(&tape, h_dst, h_nbr, &seg, &w.attention(&tape), heads).unwrap();
        let s = sage_aggr(&tape, h_dst, h_nbr, &seg, &w.mean(&tape)).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(s).data());
    }
}

#[test]
fn neighbor_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let heads = rng.gen_range(1..=4);
        let d = heads * rng.gen_range(1..=4);
        let (n, m) = (rng.gen_range(1..6), rng.gen_range(1..20));
        let seg = sorted_segments(&mut rng, m, n);
        let nbr = random(&mut rng, m, d);
        // shuffle rows within each segment; segment ids stay sorted
        let mut perm: Vec<usize> = (0..m).collect();
        let mut start = 0;
        while start < m {
            let end = start + seg[start..].iter().take_while(|&&s| s == seg[start]).count();
            for i in (start + 1..end).rev() {
                perm.swap(i, rng.gen_range(start..=i));
            }
            start = end;
        }
        let shuffled = Tensor::from_rows(&perm.iter().map(|&i| nbr.row(i).to_vec()).collect::<Vec<_>>());
        let w = Weights::random(&mut rng, d);
        let dst = random(&mut rng, n, d);
        let run = |rows: &Tensor| {
            let tape = Tape::new();
            let out = attn_aggr(
                &tape,
                tape.constant(dst.clone()),
                tape.constant(rows.clone()),
                &seg,
                &w.attention(&tape),
                heads,
            )
            .unwrap();
            let v = tape.value(out).clone();
            v
        };
        assert!(run(&nbr).frobenius_distance(&run(&shuffled)) < 1e-12);
    }
}

fn small_bridge() -> EntityGraph {
    let cfg = MotifConfig {
        n_src: 12,
        n_dst: 10,
        n_mid: 60,
        d_attr: 2,
        rng_seed: 4,
        ..MotifConfig::bridge()
    };
    build_entity_graph(generate(&cfg).unwrap().database)
}

fn build(graph: &EntityGraph, kind: ModelKind, layers: usize, rpe: Option<RpeConfig>) -> (ParamStore, Model) {
    let mask: Vec<Vec<bool>> = (0..graph.num_types()).map(|t| vec![true; graph.num_nodes(t)]).collect();
    let encoder = FeatureEncoder::fit(graph.database(), &mask).unwrap();
    let routes = derive_atomic_routes(graph.schema());
    let config = ModelConfig {
        kind,
        d_model: 8,
        layers,
        heads: 2,
        rpe,
        time_encoding: Default::default(),
    };
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, graph, &encoder, &routes, &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    (store, model)
}

fn node_features(graph: &EntityGraph, d: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    (0..graph.num_types()).map(|t| random(&mut rng, graph.num_nodes(t), d)).collect()
}

/// Full Jacobian of every dst output entry with respect to every src input entry.
fn jacobian(graph: &EntityGraph, store: &ParamStore, model: &Model, src: usize, dst: usize) -> Vec<f64> {
    let sub = full_neighborhood(graph, model.hops(), model.layers(), dst);
    let x = node_features(graph, 8);
    let zeros = Tensor::zeros(graph.num_nodes(src), 8);
    let mut out = Vec::new();
    for i in 0..graph.num_nodes(dst) {
        for k in 0..8 {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let h0: Vec<Option<Var>> = x.iter().map(|t| Some(tape.param(t.clone()))).collect();
            let h = model.propagate(&tape, &bound, &sub, h0.clone()).unwrap();
            let row = tape.gather_rows(h[dst].unwrap(), &[i]).unwrap();
            let entry = tape.sum(tape.slice_cols(row, k, k + 1).unwrap());
            let grads = tape.backward(entry).unwrap();
            out.extend_from_slice(grads.get(h0[src].unwrap()).unwrap_or(&zeros).data());
        }
    }
    out
}

#[test]
fn one_layer_baseline_cannot_see_across_a_bridge() {
    let graph = small_bridge();
    let (src, dst) = (graph.type_index("src").unwrap(), graph.type_index("dst").unwrap());

    let (store, baseline) = build(&graph, ModelKind::HeteroSage, 1, None);
    let j = jacobian(&graph, &store, &baseline, src, dst);
    assert!(j.iter().all(|&g| g == 0.0));

    for kind in [ModelKind::RelGnn, ModelKind::RelGnnNoAttn] {
        let (store, relgnn) = build(&graph, kind, 1, None);
        let j = jacobian(&graph, &store, &relgnn, src, dst);
        assert!(j.iter().any(|&g| g != 0.0), "{kind:?}");
    }

    // two baseline layers do reach the sources
    let (store, deep) = build(&graph, ModelKind::HeteroSage, 2, None);
    assert!(jacobian(&graph, &store, &deep, src, dst).iter().any(|&g| g != 0.0));
}

#[test]
fn final_layer_output_is_the_sum_of_route_messages() {
    let graph = small_bridge();
    let (store, model) = build(&graph, ModelKind::RelGnn, 1, None);
    let Network::RelGnn(net) = &model.network else { unreachable!() };
    let dst = graph.type_index("dst").unwrap();
    let sub = full_neighborhood(&graph, model.hops(), 1, dst);
    let x = node_features(&graph, 8);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let h0: Vec<Option<Var>> = x.iter().map(|t| Some(tape.constant(t.clone()))).collect();
    let h = model.propagate(&tape, &bound, &sub, h0.clone()).unwrap();
    let spec = LayerSpec {
        heads: 2,
        aggregator: model.config.aggregator(),
        final_layer: true,
        rpe: None,
    };
    let mut acc: Option<Var> = None;
    for ((hop, block), p) in model.hops().iter().zip(&sub.layers[0]).zip(&net.layers()[0]) {
        if hop.dst() != dst {
            continue;
        }
        let m = route_message(&tape, &bound, &h0, block, hop, p, &spec).unwrap().unwrap();
        acc = Some(match acc {
            Some(a) => tape.add(a, m).unwrap(),
            None => m,
        });
    }
    assert_eq!(tape.value(h[dst].unwrap()).data(), tape.value(acc.unwrap()).data());
}

#[test]
fn gradients_reach_every_route_weight() {
    let graph = small_bridge();
    let (store, model) = build(&graph, ModelKind::RelGnnNoAttn, 2, None);
    let dst = graph.type_index("dst").unwrap();
    let sub = full_neighborhood(&graph, model.hops(), 2, dst);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let h0: Vec<Option<Var>> = node_features(&graph, 8).into_iter().map(|t| Some(tape.constant(t))).collect();
    let h = model.propagate(&tape, &bound, &sub, h0).unwrap();
    let grads = tape.backward(tape.sum(tape.sin(h[dst].unwrap()))).unwrap();
    let Network::RelGnn(net) = &model.network else { unreachable!() };
    // only the routes that can influence dst contribute
    for (l, params) in net.layers().iter().enumerate() {
        for (hop, p) in model.hops().iter().zip(params) {
            if l == 1 && hop.dst() != dst {
                continue;
            }
            for id in p.ids() {
                let g = grads.get(bound.var(id)).unwrap_or_else(|| panic!("{}", store.name(id)));
                assert!(g.data().iter().any(|&x| x != 0.0), "{}", store.name(id));
            }
        }
    }
}

fn messages(graph: &EntityGraph, store: &ParamStore, model: &Model, dst: usize) -> Vec<Tensor> {
    let sub = full_neighborhood(graph, model.hops(), model.layers(), dst);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let h0: Vec<Option<Var>> = node_features(graph, 8).into_iter().map(|t| Some(tape.constant(t))).collect();
    let h = model.propagate(&tape, &bound, &sub, h0).unwrap();
    h.into_iter().flatten().map(|v| tape.value(v).clone()).collect()
}

#[test]
fn closed_positional_gate_is_exact() {
    let graph = small_bridge();
    let dst = graph.type_index("dst").unwrap();
    let (plain_store, plain) = build(&graph, ModelKind::RelGnn, 2, None);
    let (mut store, with_rpe) = build(&graph, ModelKind::RelGnn, 2, Some(RpeConfig::default()));
    let Network::RelGnn(net) = &with_rpe.network else { unreachable!() };
    let alpha = net.rpe().unwrap().alpha();
    store.set(alpha, Tensor::scalar(0.0));
    let a = messages(&graph, &plain_store, &plain, dst);
    let b = messages(&graph, &store, &with_rpe, dst);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
    store.set(alpha, Tensor::scalar(0.5));
    let c = messages(&graph, &store, &with_rpe, dst);
    assert!(a.iter().zip(&c).any(|(x, y)| x.data() != y.data()));
}

#[test]
fn positional_encoding_acts_on_a_self_referencing_schema() {
    let schema = parse_schema(
        r#"{"tables":[{"name":"users","primary_key":"id",
            "foreign_keys":[{"column":"referrer","target":"users","nullable":true}],
            "attributes":[{"name":"x","kind":"numeric"}]}]}"#,
    )
    .unwrap();
    let cells = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let db = Database::from_cells(
        &schema,
        vec![cells(&["id", "referrer", "x"])],
        vec![vec![
            cells(&["u0", "", "0.5"]),
            cells(&["u1", "u0", "-1.0"]),
            cells(&["u2", "u0", "2.0"]),
            cells(&["u3", "u1", "0.25"]),
        ]],
    )
    .unwrap();
    let graph = build_entity_graph(db);
    let (plain_store, plain) = build(&graph, ModelKind::RelGnn, 1, None);
    let (store, with_rpe) = build(&graph, ModelKind::RelGnn, 1, Some(RpeConfig::default()));
    let a = messages(&graph, &plain_store, &plain, 0);
    let b = messages(&graph, &store, &with_rpe, 0);
    assert_ne!(a[0].data(), b[0].data());
}
