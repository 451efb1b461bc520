//! Spectral relative positional encodings over the schema graph.
//!
//! The schema-graph Laplacian `L = V diag(λ) Vᵀ` is decomposed once. Each
//! channel `k` applies a small learned function `φ_k` to the eigenvalues
//! and forms `Q_k = V diag(φ_k(λ)) Vᵀ`; an MLP `ρ` maps the channel vector
//! `Q[i, j, :]` of every type pair to a `d`-wide bias, which is added to
//! messages from type `i` to type `j` with a learned gate `α`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::schema::{build_schema_graph, SchemaDef};
use crate::tensor::{sym_eig, SymEig, Tape, Tensor, Var};

const PHI_HIDDEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpeConfig {
    pub channels: usize,
    pub alpha_init: f64,
}

impl Default for RpeConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            alpha_init: 0.1,
        }
    }
}

/// Row `i * n + j` holds `V[i, :] ∘ V[j, :]`, so that multiplying by a
/// column of eigenvalue weights yields the flattened `V diag(w) Vᵀ`.
pub fn spectral_pair_basis(eig: &SymEig) -> Tensor {
    let n = eig.values.len();
    let mut basis = Tensor::zeros(n * n, n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                basis.set(i * n + j, k, eig.vectors.get(i, k) * eig.vectors.get(j, k));
            }
        }
    }
    basis
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    /// Biases start uniform in `±1/√fan_in`: with zero biases `φ(0) = 0`,
    /// and the constant eigenvector of every Laplacian would carry nothing.
    fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        fn bias(store: &mut ParamStore, name: String, fan_in: usize, width: usize, rng: &mut impl Rng) -> ParamId {
            let r = 1.0 / (fan_in as f64).sqrt();
            let data = (0..width).map(|_| rng.gen_range(-r..r)).collect();
            store.add(name, Tensor::new(1, width, data).expect("row shape"))
        }
        let w1 = store.add_glorot(format!("{prefix}/w1"), input, hidden, rng);
        let b1 = bias(store, format!("{prefix}/b1"), input, hidden, rng);
        let w2 = store.add_glorot(format!("{prefix}/w2"), hidden, output, rng);
        let b2 = bias(store, format!("{prefix}/b2"), hidden, output, rng);
        Self { w1, b1, w2, b2 }
    }

    fn apply(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.add_row(tape.matmul(x, bound.var(self.w1))?, bound.var(self.b1))?;
        let h = tape.relu(h);
        tape.add_row(tape.matmul(h, bound.var(self.w2))?, bound.var(self.b2))
    }
}

#[derive(Clone, Debug)]
pub struct RpeParams {
    n_types: usize,
    eigenvalues: Tensor,
    pair_basis: Tensor,
    phi: Vec<Mlp>,
    rho: Mlp,
    alpha: ParamId,
}

impl RpeParams {
    pub fn new(store: &mut ParamStore, schema: &SchemaDef, cfg: &RpeConfig, d_model: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels == 0 {
            return Err(Error::InvalidArgument("positional encoding needs at least one channel".into()));
        }
        let laplacian = build_schema_graph(schema).laplacian();
        if laplacian.rows() == 0 {
            return Err(Error::Model("positional encoding needs a non-empty schema graph".into()));
        }
        let eig = sym_eig(&laplacian)?;
        let phi = (0..cfg.channels)
            .map(|k| Mlp::new(store, &format!("rpe/phi{k}"), 1, PHI_HIDDEN, 1, rng))
            .collect();
        let rho = Mlp::new(store, "rpe/rho", cfg.channels, d_model, d_model, rng);
        let alpha = store.add("rpe/alpha", Tensor::scalar(cfg.alpha_init));
        Ok(Self {
            n_types: laplacian.rows(),
            eigenvalues: Tensor::column(eig.values.clone()),
            pair_basis: spectral_pair_basis(&eig),
            phi,
            rho,
            alpha,
        })
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }
}

/// The per-pair biases for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RpeTable {
    rows: Var,
    alpha: Var,
    n_types: usize,
}

/// Evaluates `ρ(Q)` for every type pair on `tape`.
pub fn rpe_bias(tape: &Tape, bound: &Bound, params: &RpeParams) -> Result<RpeTable> {
    let lambda = tape.constant(params.eigenvalues.clone());
    let mut channels = Vec::with_capacity(params.phi.len());
    for phi in &params.phi {
        channels.push(phi.apply(tape, bound, lambda)?);
    }
    let weights = if channels.len() == 1 { channels[0] } else { tape.concat_cols(&channels)? };
    let q = tape.matmul(tape.constant(params.pair_basis.clone()), weights)?;
    Ok(RpeTable {
        rows: params.rho.apply(tape, bound, q)?,
        alpha: bound.var(params.alpha),
        n_types: params.n_types,
    })
}

impl RpeTable {
    /// `m + α · RPE[src, dst]` broadcast over the rows of `m`.
    pub fn apply(&self, tape: &Tape, m: Var, src: usize, dst: usize) -> Result<Var> {
        let row = tape.gather_rows(self.rows, &[src * self.n_types + dst])?;
        tape.add_scaled_row(m, self.alpha, row)
    }
}
