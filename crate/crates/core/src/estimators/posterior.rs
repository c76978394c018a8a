//! Posterior machinery for the Bayes estimators.
//!
//! The posterior `p(w | X^n) ∝ φ(w) Π_i p(x_i | w)` has no closed form
//! for `K ≥ 2`, so expectations under it are computed by self-normalized
//! importance sampling. The proposal is the Laplace approximation
//! centered at the maximum-likelihood estimate with covariance
//! `inflation · (n I_X)⁻¹`; mild inflation keeps the proposal tails
//! heavier than the target's.  Every estimand the Bayes methods need is
//! a posterior mean of a positive function, so the sampler exposes
//! log-space ratio estimators with delta-method standard errors.
//!
//! For `K = 1` the model is a plain Gaussian with known covariance and
//! the Gaussian mean prior is conjugate; the [`conjugate`] submodule
//! carries the exact closed forms used to validate the sampler and the
//! asymptotic expansion of the marginal likelihood.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{MixtureModel, Observations, ParamVector};
use crate::numeric::logsumexp;

use super::prior::Prior;

/// Knobs for the importance sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    /// Number of proposal draws `S`.
    pub samples: usize,
    /// Multiplier on the Laplace covariance `(n I_X)⁻¹`.
    pub inflation: f64,
    /// Flag the sampler when `ESS < ess_fraction · S`.
    pub ess_fraction: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            inflation: 1.2,
            ess_fraction: 0.05,
        }
    }
}

/// A weighted sample approximation of `p(w | X^n)` together with the
/// marginal-likelihood estimate `Ẑ` it produces as a by-product.
#[derive(Debug, Clone)]
pub struct PosteriorSampler {
    samples: Vec<ParamVector>,
    /// Normalized log weights: `logsumexp(log_w) = 0`.
    log_w: Vec<f64>,
    lin_w: Vec<f64>,
    log_z: f64,
    log_z_se: f64,
    ess: f64,
    flagged: bool,
    n: usize,
}

/// Draw an importance-sample representation of the posterior given the
/// unlabeled observations.
///
/// `center` is the proposal mean (in practice the MLE) and `i_x` the
/// per-observation Fisher information used for the proposal covariance.
/// Draws that land outside the admissible parameter set get weight zero;
/// the proposal itself is an unconstrained Gaussian, so no rejection
/// step is needed and `Ẑ` stays unbiased for the constrained integral.
pub fn build_posterior<R: Rng + ?Sized>(
    model: &MixtureModel,
    prior: &Prior,
    x: &Observations,
    center: &ParamVector,
    i_x: &DMatrix<f64>,
    opts: &SamplerOptions,
    rng: &mut R,
) -> Result<PosteriorSampler> {
    let d = model.dim_param();
    let n = x.n();
    if x.dim() != model.m() {
        return Err(Error::Invalid(format!(
            "observation dimension {} does not match model dimension {}",
            x.dim(),
            model.m()
        )));
    }
    if center.len() != d {
        return Err(Error::Invalid(format!(
            "proposal center has {} coordinates, model needs {}",
            center.len(),
            d
        )));
    }
    if opts.samples == 0 {
        return Err(Error::Invalid("sampler needs at least one draw".into()));
    }
    if n == 0 {
        return Err(Error::InsufficientData(
            "posterior needs at least one observation".into(),
        ));
    }
    if !(opts.inflation > 0.0) {
        return Err(Error::Invalid(format!(
            "proposal inflation must be positive, got {}",
            opts.inflation
        )));
    }

    // Proposal covariance (inflation/n)·I_X⁻¹ and its Cholesky factor.
    let chol_info = Cholesky::new(i_x.clone()).ok_or_else(|| {
        Error::NonRegular("Fisher information for the proposal is not positive definite".into())
    })?;
    let cov = chol_info.inverse() * (opts.inflation / n as f64);
    let chol_cov = Cholesky::new(cov).ok_or_else(|| {
        Error::NonRegular("proposal covariance is not positive definite".into())
    })?;
    let l = chol_cov.l();
    // ln det cov from the factor diagonal; constant part of ln q.
    let half_log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
    let log_q_const = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - half_log_det;

    let s = opts.samples;
    let mut samples = Vec::with_capacity(s);
    let mut log_ell = Vec::with_capacity(s);
    let mut z = DVector::zeros(d);
    for _ in 0..s {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let w = ParamVector::new(center.values() + &l * &z);
        // ln q from the standardized draw; no solve needed.
        let log_q = log_q_const - 0.5 * z.dot(&z);
        let log_phi = prior.log_density(model, &w);
        let mut ell = log_phi - log_q;
        if ell > f64::NEG_INFINITY {
            let mut log_lik = 0.0;
            for row in x.rows() {
                log_lik += model.log_marginal(&w, row);
                if log_lik == f64::NEG_INFINITY {
                    break;
                }
            }
            ell += log_lik;
        }
        samples.push(w);
        log_ell.push(ell);
    }

    let lse = logsumexp(&log_ell);
    if lse == f64::NEG_INFINITY {
        return Err(Error::Invalid(
            "every proposal draw fell outside the prior support; \
             the proposal is badly centered or far too wide"
                .into(),
        ));
    }
    let log_z = lse - (s as f64).ln();
    let log_w: Vec<f64> = log_ell.iter().map(|&e| e - lse).collect();
    let lin_w: Vec<f64> = log_w.iter().map(|&lw| lw.exp()).collect();
    let sum_w_sq = {
        let doubled: Vec<f64> = log_w.iter().map(|&lw| 2.0 * lw).collect();
        logsumexp(&doubled).exp()
    };
    let ess = 1.0 / sum_w_sq;
    let log_z_se = (sum_w_sq - 1.0 / s as f64).max(0.0).sqrt();
    let flagged = ess < opts.ess_fraction * s as f64;

    Ok(PosteriorSampler {
        samples,
        log_w,
        lin_w,
        log_z,
        log_z_se,
        ess,
        flagged,
        n,
    })
}

impl PosteriorSampler {
    pub fn samples(&self) -> &[ParamVector] {
        &self.samples
    }

    /// Normalized log weights (`logsumexp` equals zero).
    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    /// Normalized linear weights (sum to one).
    pub fn weights(&self) -> &[f64] {
        &self.lin_w
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Number of observations the posterior conditions on.
    pub fn n_obs(&self) -> usize {
        self.n
    }

    /// Estimated log marginal likelihood `ln Ẑ`.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// Delta-method standard error of `ln Ẑ`.
    pub fn log_z_se(&self) -> f64 {
        self.log_z_se
    }

    /// Effective sample size `1 / Σ w̃²`.
    pub fn ess(&self) -> f64 {
        self.ess
    }

    /// True when the effective sample size fell below the configured
    /// fraction of the draw budget.
    pub fn flagged(&self) -> bool {
        self.flagged
    }

    /// Weighted posterior mean of the parameter.
    pub fn posterior_mean(&self) -> ParamVector {
        let d = self.samples[0].len();
        let mut mean = DVector::zeros(d);
        for (w, &wt) in self.samples.iter().zip(&self.lin_w) {
            if wt > 0.0 {
                mean.axpy(wt, w.values(), 1.0);
            }
        }
        ParamVector::new(mean)
    }

    /// Weighted posterior variance of each coordinate.
    pub fn posterior_var_diag(&self) -> Vec<f64> {
        let mean = self.posterior_mean();
        let d = mean.len();
        let mut var = vec![0.0; d];
        for (w, &wt) in self.samples.iter().zip(&self.lin_w) {
            if wt > 0.0 {
                for i in 0..d {
                    let dev = w.values()[i] - mean.values()[i];
                    var[i] += wt * dev * dev;
                }
            }
        }
        var
    }

    /// Posterior mean of a plain (linear-scale) function.
    pub fn posterior_mean_fn<F: FnMut(&ParamVector) -> f64>(&self, mut f: F) -> f64 {
        let mut acc = 0.0;
        for (w, &wt) in self.samples.iter().zip(&self.lin_w) {
            if wt > 0.0 {
                acc += wt * f(w);
            }
        }
        acc
    }

    /// `ln E_post[g]` for a positive function supplied as `ln g`.
    ///
    /// Zero-weight draws are skipped without evaluating `log_g`, so the
    /// callback never sees parameters outside the admissible set.
    pub fn log_posterior_mean_exp<F: FnMut(&ParamVector) -> f64>(&self, log_g: F) -> f64 {
        self.log_posterior_mean_exp_with_se(log_g).0
    }

    /// `ln E_post[g]` together with a delta-method standard error for
    /// the log of the self-normalized ratio estimate.
    pub fn log_posterior_mean_exp_with_se<F: FnMut(&ParamVector) -> f64>(
        &self,
        mut log_g: F,
    ) -> (f64, f64) {
        let s = self.samples.len();
        let mut terms = Vec::with_capacity(s);
        for (w, &lw) in self.samples.iter().zip(&self.log_w) {
            if lw == f64::NEG_INFINITY {
                terms.push(f64::NEG_INFINITY);
            } else {
                terms.push(lw + log_g(w));
            }
        }
        let log_r = logsumexp(&terms);
        if log_r == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        // Var(ln R) ≈ Σ (r_s − w̃_s)² with r_s the normalized numerator
        // weights; exact for g ≡ const where it vanishes.
        let mut var = 0.0;
        for (&t, &lw) in terms.iter().zip(&self.log_w) {
            let r = (t - log_r).exp();
            let dev = r - lw.exp();
            var += dev * dev;
        }
        (log_r, var.sqrt())
    }
}

/// Marginal-likelihood estimate and its standard error, as a pair.
pub fn log_marginal_likelihood(sampler: &PosteriorSampler) -> (f64, f64) {
    (sampler.log_z(), sampler.log_z_se())
}

/// Terms of the second-order expansion of the free energy `−ln Z`.
///
/// `total = nll_at_mle + dim_term − log_prior_at_mle − log_2pi_term
///          + half_log_det_ix − curvature_over_n`.
#[derive(Debug, Clone, Copy)]
pub struct F2Expansion {
    /// `−Σ_i ln p(x_i | ŵ)`.
    pub nll_at_mle: f64,
    /// `(d/2) ln n`.
    pub dim_term: f64,
    /// `ln φ(ŵ)`.
    pub log_prior_at_mle: f64,
    /// `(d/2) ln 2π`.
    pub log_2pi_term: f64,
    /// `½ ln det I_X`.
    pub half_log_det_ix: f64,
    /// `(1/2n) Tr[(φ″/φ)(ŵ) I_X⁻¹]`.
    pub curvature_over_n: f64,
    pub total: f64,
}

/// Evaluate the deterministic second-order approximation of `−ln Z`
/// around the MLE, using the supplied Fisher information in place of
/// the observed curvature.
pub fn laplace_expansion_f2(
    model: &MixtureModel,
    prior: &Prior,
    x: &Observations,
    w_hat: &ParamVector,
    i_x: &DMatrix<f64>,
) -> Result<F2Expansion> {
    let d = model.dim_param() as f64;
    let n = x.n();
    if n == 0 {
        return Err(Error::InsufficientData(
            "expansion needs at least one observation".into(),
        ));
    }
    model.check_params(w_hat)?;
    let chol = Cholesky::new(i_x.clone()).ok_or_else(|| {
        Error::NonRegular("Fisher information in the expansion is not positive definite".into())
    })?;
    let mut nll = 0.0;
    for row in x.rows() {
        nll -= model.log_marginal(w_hat, row);
    }
    let log_prior = prior.log_density(model, w_hat);
    if log_prior == f64::NEG_INFINITY {
        return Err(Error::Invalid(
            "prior vanishes at the expansion point".into(),
        ));
    }
    let half_log_det: f64 = (0..i_x.nrows()).map(|i| chol.l()[(i, i)].ln()).sum();
    let ratio = prior.hess_over_density(model, w_hat);
    let curvature = (ratio * chol.inverse()).trace() / (2.0 * n as f64);
    let nll_at_mle = nll;
    let dim_term = 0.5 * d * (n as f64).ln();
    let log_2pi_term = 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    let total = nll_at_mle + dim_term - log_prior - log_2pi_term + half_log_det - curvature;
    Ok(F2Expansion {
        nll_at_mle,
        dim_term,
        log_prior_at_mle: log_prior,
        log_2pi_term,
        half_log_det_ix: half_log_det,
        curvature_over_n: curvature,
        total,
    })
}

/// Exact posterior quantities for the single-component model, where the
/// Gaussian mean prior is conjugate.
pub mod conjugate {
    use super::*;
    use crate::estimators::prior::MeanPrior;

    fn gaussian_prior_params(model: &MixtureModel, prior: &Prior) -> (DVector<f64>, DMatrix<f64>) {
        assert_eq!(model.k(), 1, "conjugate forms require a single component");
        let (loc, scale) = match prior.mean_prior {
            MeanPrior::Gaussian { loc, scale } => (loc, scale),
            MeanPrior::Flat => panic!("conjugate forms require a proper Gaussian mean prior"),
        };
        let m = model.m();
        (
            DVector::from_element(m, loc),
            DMatrix::identity(m, m) * (scale * scale),
        )
    }

    fn log_gaussian(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let m = x.len();
        let chol = Cholesky::new(cov.clone()).expect("predictive covariance must be SPD");
        let mut dev = DVector::from_row_slice(x);
        dev -= mean;
        let z = chol.l().solve_lower_triangular(&dev).unwrap();
        let half_log_det: f64 = (0..m).map(|i| chol.l()[(i, i)].ln()).sum();
        -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln() - half_log_det - 0.5 * z.dot(&z)
    }

    /// One conjugate update: posterior over the mean after seeing `x`.
    fn update(
        mean: &mut DVector<f64>,
        cov: &mut DMatrix<f64>,
        sigma: &DMatrix<f64>,
        x: &[f64],
    ) -> f64 {
        let pred_cov = &*cov + sigma;
        let log_pred = log_gaussian(x, mean, &pred_cov);
        let chol = Cholesky::new(pred_cov).expect("predictive covariance must be SPD");
        // Kalman form: m ← m + V S⁻¹ (x − m), V ← V − V S⁻¹ V.
        let mut dev = DVector::from_row_slice(x);
        dev -= &*mean;
        let gain = &*cov * chol.inverse();
        *mean += &gain * dev;
        *cov -= &gain * &*cov;
        log_pred
    }

    /// Exact posterior mean and covariance of the single component's
    /// mean vector given the data, by sequential conjugate updates.
    pub fn posterior_k1(
        model: &MixtureModel,
        prior: &Prior,
        x: &Observations,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let (mut mean, mut cov) = gaussian_prior_params(model, prior);
        for row in x.rows() {
            update(&mut mean, &mut cov, model.sigma(), row);
        }
        (mean, cov)
    }

    /// Exact `ln Z` for the single-component model; zero observations
    /// give `ln Z = 0` (an empty product).
    pub fn log_marginal_k1(model: &MixtureModel, prior: &Prior, x: &Observations) -> f64 {
        let (mut mean, mut cov) = gaussian_prior_params(model, prior);
        let mut total = 0.0;
        for row in x.rows() {
            total += update(&mut mean, &mut cov, model.sigma(), row);
        }
        total
    }

    /// Exact log posterior-predictive density of a new point.
    pub fn log_predictive_k1(
        model: &MixtureModel,
        prior: &Prior,
        x: &Observations,
        x_new: &[f64],
    ) -> f64 {
        let (mean, cov) = posterior_k1(model, prior, x);
        log_gaussian(x_new, &mean, &(cov + model.sigma()))
    }
}
