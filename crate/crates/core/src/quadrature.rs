//! Gauss-Hermite rules for Gaussian averages.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 128;

/// Nodes and weights for `int f(x) exp(-x^2) dx`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal Hermite functions `p_0..p_{n-1}` at `x`, returned as
/// `(p_{n-1}, p_{n-2}, sum p_k^2)`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25);
    let mut sumsq = cur * cur;
    for k in 0..n - 1 {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * x * cur - (kf / (kf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
        sumsq += cur * cur;
    }
    (cur, prev, sumsq)
}

impl GaussHermite {
    /// Golub-Welsch eigenvalues polished by Newton steps on `H_n`.
    pub fn new(order: usize) -> Result<Self> {
        if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
            return Err(Error::InvalidParameter(format!(
                "quadrature order {order} outside {MIN_ORDER}..={MAX_ORDER}"
            )));
        }
        let n = order;
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let mut nodes: Vec<f64> = jacobi
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        nodes.sort_by(f64::total_cmp);

        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                // p_n and its derivative sqrt(2n) p_{n-1}.
                let (pn1, pn2, _) = orthonormal_hermite(n, *x);
                let pn =
                    (2.0 / n as f64).sqrt() * *x * pn1 - ((n as f64 - 1.0) / n as f64).sqrt() * pn2;
                let dpn = (2.0 * n as f64).sqrt() * pn1;
                if dpn != 0.0 {
                    *x -= pn / dpn;
                }
            }
            let (_, _, sumsq) = orthonormal_hermite(n, *x);
            weights.push(1.0 / sumsq);
        }
        // Exact antisymmetry of the nodes.
        for k in 0..n / 2 {
            let x = 0.5 * (nodes[n - 1 - k] - nodes[k]);
            let w = 0.5 * (weights[k] + weights[n - 1 - k]);
            nodes[k] = -x;
            nodes[n - 1 - k] = x;
            weights[k] = w;
            weights[n - 1 - k] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Points and probabilities for a normal variable with standard deviation
    /// `sigma`: `r = sqrt(2) sigma x`, weights rescaled to sum to one.
    pub fn normal(&self, sigma: f64) -> Vec<(f64, f64)> {
        let total: f64 = self.weights.iter().sum();
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(|(&x, &w)| (std::f64::consts::SQRT_2 * sigma * x, w / total))
            .collect()
    }

    /// Tensor-product rule for an isotropic 3D normal with per-axis `sigma`.
    pub fn normal_3d(&self, sigma: f64) -> Vec<([f64; 3], f64)> {
        let axis = self.normal(sigma);
        let mut out = Vec::with_capacity(axis.len().pow(3));
        for &(x, wx) in &axis {
            for &(y, wy) in &axis {
                for &(z, wz) in &axis {
                    out.push(([x, y, z], wx * wy * wz));
                }
            }
        }
        let total: f64 = out.iter().map(|p| p.1).sum();
        for p in out.iter_mut() {
            p.1 /= total;
        }
        out
    }
}
