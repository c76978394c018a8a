//! Maximum-likelihood and Bayes estimation machinery.
//!
//! The maximum-likelihood path fits the mixture by EM (the covariance is
//! known, so both EM steps are closed-form) and resolves label switching
//! by aligning the fit to the nearest symmetric image of the true
//! parameter. The Bayes path represents the posterior
//! `p(w|X^n) ∝ L(w)φ(w)` by self-normalized importance sampling with a
//! Laplace proposal `N(ŵ, inflation·(n·I_X(w*))⁻¹)` — the Gaussian the
//! posterior concentrates to — and every Bayes estimand is a posterior
//! mean of a product of conditionals computed from one shared weighted
//! sample set.
//!
//! [`targets`] implements the estimated probabilities themselves: joint
//! labels, one in-sample label, the label of a new observation, label
//! blocks, and the observable predictions, for both methods.

mod em;
mod posterior;
mod prior;
pub mod targets;

pub use em::{align_mle, em_fit, em_fit_restarts, em_fit_with_trace, EmOptions, MLEResult};
pub use posterior::{
    build_posterior, conjugate, laplace_expansion_f2, log_marginal_likelihood, F2Expansion,
    PosteriorSampler, SamplerOptions,
};
pub use prior::{MeanPrior, Prior};
