use super::Tensor;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition `M = V diag(values) Vᵀ` of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Tensor,
}

impl SymEig {
    pub fn reconstruct(&self) -> Tensor {
        let n = self.values.len();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.vectors.get(i, k) * self.values[k] * self.vectors.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// Cyclic Jacobi eigensolver for small symmetric matrices.
pub fn sym_eig(m: &Tensor) -> Result<SymEig> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape(format!("sym_eig of a {:?} matrix", m.shape())));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::Eigen(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }

    let mut a = m.clone();
    // symmetrize exactly so rotations operate on a truly symmetric matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = Tensor::identity(n);
    let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j) * a.get(i, j))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::Eigen(format!(
            "no convergence after {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a.get(x, x).total_cmp(&a.get(y, y)));
    let values = order.iter().map(|&k| a.get(k, k)).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, v.get(r, src));
        }
    }
    Ok(SymEig { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(v: &Tensor) -> f64 {
        let vtv = v.transpose().matmul(v).unwrap();
        vtv.frobenius_distance(&Tensor::identity(v.rows()))
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = sym_eig(&Tensor::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_node_path_laplacian() {
        let l = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let e = sym_eig(&l).unwrap();
        assert!(e.values[0].abs() < 1e-12);
        assert!((e.values[1] - 2.0).abs() < 1e-12);
        assert!(e.reconstruct().frobenius_distance(&l) < 1e-8);
        assert!(orthonormality_error(&e.vectors) < 1e-8);
    }

    #[test]
    fn zero_matrix() {
        let e = sym_eig(&Tensor::zeros(4, 4)).unwrap();
        assert!(e.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn asymmetric_rejected() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig(&m), Err(Error::Eigen(_))));
    }

    #[test]
    fn random_symmetric_reconstructs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 5, 12, 30] {
            let mut m = Tensor::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let x: f64 = rng.gen_range(-3.0..3.0);
                    m.set(i, j, x);
                    m.set(j, i, x);
                }
            }
            let e = sym_eig(&m).unwrap();
            assert!(e.reconstruct().frobenius_distance(&m) < 1e-8, "n={n}");
            assert!(orthonormality_error(&e.vectors) < 1e-8, "n={n}");
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
