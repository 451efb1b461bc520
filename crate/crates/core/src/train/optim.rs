use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient. Fails without touching `store` on a non-finite entry.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for &id in &ids {
            if let Some(g) = grads.get(bound.var(id)) {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{}`", store.name(id))));
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for id in ids {
            let g = grads.get(bound.var(id));
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..p.data().len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] -= update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn run(lr: f64, steps: usize, x0: f64) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x0));
        let mut adam = Adam::new(&store, AdamConfig { lr, ..AdamConfig::default() });
        for _ in 0..steps {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let x = bound.var(id);
            let loss = tape.sum(tape.mul(x, x).unwrap());
            let grads = tape.backward(loss).unwrap();
            adam.step(&mut store, &bound, &grads).unwrap();
        }
        store.get(id).item()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        assert_eq!(run(0.1, 3, 0.0), 0.0);
        assert_eq!(run(0.0, 5, 1.25), 1.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let x = run(0.01, 1, 3.0);
        assert!((x - (3.0 - 0.01)).abs() < 1e-10);
        assert_eq!(run(0.01, 7, 3.0).to_bits(), run(0.01, 7, 3.0).to_bits());
        assert!(run(0.05, 200, 3.0).abs() < 0.1);
    }
}
