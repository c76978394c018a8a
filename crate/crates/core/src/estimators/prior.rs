//! Prior over the mixture parameter: symmetric Dirichlet on the mixing
//! ratios × independent Gaussians on every mean coordinate.
//!
//! The density is expressed on the free coordinates
//! `(a_1..a_{K−1}, μ_1..μ_K)` (Lebesgue measure on the solid simplex for
//! the ratio block), is strictly positive and twice differentiable on
//! the interior, and exposes the second-derivative ratio `φ″/φ` needed
//! by the `1/n` term of the marginal-likelihood expansion. A `Flat` mean
//! block (improper, density contribution 1) is available for tests that
//! need `φ″ = 0` exactly.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{MixtureModel, ParamVector};

/// Prior over the component means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanPrior {
    /// Independent `N(loc, scale²)` on every mean coordinate.
    Gaussian { loc: f64, scale: f64 },
    /// Improper flat prior (log-density contribution 0).
    Flat,
}

/// Prior `φ(w) = Dirichlet(η,…,η)(a) × Π N(μ | loc, scale²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    /// Dirichlet concentration; 1 is uniform on the simplex.
    pub eta: f64,
    pub mean_prior: MeanPrior,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            eta: 1.0,
            mean_prior: MeanPrior::Gaussian {
                loc: 0.0,
                scale: 10.0,
            },
        }
    }
}

impl Prior {
    pub fn new(eta: f64, loc: f64, scale: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::Config(format!(
                "Dirichlet concentration must be positive, got {eta}"
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Config(format!(
                "mean-prior scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            eta,
            mean_prior: MeanPrior::Gaussian { loc, scale },
        })
    }

    /// Dirichlet(η) on the ratios with a flat (improper) mean block.
    pub fn flat_means(eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::Config(format!(
                "Dirichlet concentration must be positive, got {eta}"
            )));
        }
        Ok(Self {
            eta,
            mean_prior: MeanPrior::Flat,
        })
    }

    /// `ln φ(w)`; `-inf` outside the open simplex.
    pub fn log_density(&self, model: &MixtureModel, w: &ParamVector) -> f64 {
        let k = model.k();
        if !model.weights_positive(w) {
            return f64::NEG_INFINITY;
        }
        let mut total = 0.0;
        if k > 1 {
            total += ln_gamma(k as f64 * self.eta) - k as f64 * ln_gamma(self.eta);
            if self.eta != 1.0 {
                for y in 0..k {
                    total += (self.eta - 1.0) * model.weight(w, y).ln();
                }
            }
        }
        match self.mean_prior {
            MeanPrior::Gaussian { loc, scale } => {
                let norm = -0.5 * (2.0 * std::f64::consts::PI * scale * scale).ln();
                for y in 0..k {
                    for &v in model.mean_slice(w, y) {
                        let z = (v - loc) / scale;
                        total += norm - 0.5 * z * z;
                    }
                }
            }
            MeanPrior::Flat => {}
        }
        total
    }

    /// `∇ ln φ(w)` on the free coordinates.
    pub fn grad_log_density(&self, model: &MixtureModel, w: &ParamVector) -> DVector<f64> {
        let k = model.k();
        let d = model.dim_param();
        let mut g = DVector::zeros(d);
        if k > 1 && self.eta != 1.0 {
            let a_last = model.weight(w, k - 1);
            for j in 0..k - 1 {
                g[j] = (self.eta - 1.0) * (1.0 / model.weight(w, j) - 1.0 / a_last);
            }
        }
        if let MeanPrior::Gaussian { loc, scale } = self.mean_prior {
            let inv_var = 1.0 / (scale * scale);
            for y in 0..k {
                let off = model.mean_offset(y);
                for (c, &v) in model.mean_slice(w, y).iter().enumerate() {
                    g[off + c] = -(v - loc) * inv_var;
                }
            }
        }
        g
    }

    /// The ratio `φ″(w)/φ(w) = ∇² ln φ + (∇ ln φ)(∇ ln φ)ᵀ`.
    pub fn hess_over_density(&self, model: &MixtureModel, w: &ParamVector) -> DMatrix<f64> {
        let k = model.k();
        let d = model.dim_param();
        let mut h = DMatrix::zeros(d, d);
        if k > 1 && self.eta != 1.0 {
            let a_last = model.weight(w, k - 1);
            let last_term = (self.eta - 1.0) * (-1.0 / (a_last * a_last));
            for j in 0..k - 1 {
                for l in 0..k - 1 {
                    h[(j, l)] = last_term;
                }
                let aj = model.weight(w, j);
                h[(j, j)] += (self.eta - 1.0) * (-1.0 / (aj * aj));
            }
        }
        if let MeanPrior::Gaussian { scale, .. } = self.mean_prior {
            let inv_var = 1.0 / (scale * scale);
            for y in 0..k {
                let off = model.mean_offset(y);
                for c in 0..model.m() {
                    h[(off + c, off + c)] = -inv_var;
                }
            }
        }
        let g = self.grad_log_density(model, w);
        h + &g * g.transpose()
    }
}
