//! Gauss–Hermite quadrature and tensor-product rules for Gaussian
//! expectations.
//!
//! Nodes and weights come from the Golub–Welsch eigenvalue method: the
//! physicists' Hermite recurrence has Jacobi matrix with zero diagonal
//! and off-diagonal `sqrt(i/2)`, so the nodes are the eigenvalues of a
//! symmetric tridiagonal matrix and the weights are `√π` times the
//! squared first components of the normalized eigenvectors. An `n`-point
//! rule integrates polynomials up to degree `2n−1` exactly against
//! `exp(−x²)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// One-dimensional Gauss–Hermite rule (physicists' convention:
/// `∫ f(x) e^{−x²} dx ≈ Σ w_i f(x_i)`).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("quadrature rule needs ≥ 1 node".into()));
        }
        if n == 1 {
            return Ok(Self {
                nodes: vec![0.0],
                weights: vec![std::f64::consts::PI.sqrt()],
            });
        }
        let mut jacobi = DMatrix::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| {
                let v0 = eig.eigenvectors[(0, j)];
                (eig.eigenvalues[j], sqrt_pi * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The rule transformed for expectations under the standard normal:
    /// `E[f(Z)] ≈ Σ p_i f(z_i)` with `z_i = √2·x_i` and `Σ p_i = 1`.
    pub fn standard_normal_rule(&self) -> (Vec<f64>, Vec<f64>) {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let z = self.nodes.iter().map(|x| x * std::f64::consts::SQRT_2).collect();
        let p = self.weights.iter().map(|w| w * inv_sqrt_pi).collect();
        (z, p)
    }
}

/// Tensor-product rule for expectations under `N(mean, L Lᵀ)`:
/// `E[f(X)] ≈ Σ probs_i · f(points_i)`.
#[derive(Debug, Clone)]
pub struct GaussianRule {
    pub points: Vec<DVector<f64>>,
    pub probs: Vec<f64>,
}

/// Builds the tensor rule `x = mean + L·z` over the per-axis standard
/// normal rule. Cost grows as `nodes_per_dim^M`; callers restrict `M`.
pub fn gaussian_rule(
    mean: &[f64],
    chol_lower: &DMatrix<f64>,
    nodes_per_dim: usize,
) -> Result<GaussianRule> {
    let m = mean.len();
    if chol_lower.nrows() != m || chol_lower.ncols() != m {
        return Err(Error::Invalid(
            "Cholesky factor shape does not match the mean".into(),
        ));
    }
    let gh = GaussHermite::new(nodes_per_dim)?;
    let (z1, p1) = gh.standard_normal_rule();
    let total = nodes_per_dim.pow(m as u32);
    let mut points = Vec::with_capacity(total);
    let mut probs = Vec::with_capacity(total);
    let mut index = vec![0usize; m];
    let mut z = DVector::zeros(m);
    loop {
        let mut p = 1.0;
        for dim in 0..m {
            z[dim] = z1[index[dim]];
            p *= p1[index[dim]];
        }
        let mut x = DVector::from_column_slice(mean);
        // x += L z, exploiting the lower-triangular structure.
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..=i {
                s += chol_lower[(i, j)] * z[j];
            }
            x[i] += s;
        }
        points.push(x);
        probs.push(p);
        // Odometer increment over the tensor grid.
        let mut dim = 0;
        loop {
            if dim == m {
                return Ok(GaussianRule { points, probs });
            }
            index[dim] += 1;
            if index[dim] < nodes_per_dim {
                break;
            }
            index[dim] = 0;
            dim += 1;
        }
    }
}
