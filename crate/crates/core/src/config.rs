//! Experiment configuration: one TOML file describes the model, the
//! true parameter, the prior, the Fisher backend, and the simulation
//! sweep. Parsing is strict — unknown keys are rejected by name — and
//! defaults are filled in on parse, so serializing a parsed config
//! yields its canonical form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::targets::block_len_for_alpha;
use crate::estimators::{EmOptions, MeanPrior, Prior};
use crate::fisher::FisherBackend;
use crate::model::{MixtureModel, TrueDistribution};
use crate::montecarlo::{HarnessOptions, MethodKind, SweepSpec, Target, TargetRequest};

/// The mixture family: component count, observation dimension, and the
/// (known, shared, isotropic) noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub components: usize,
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    1.0
}

/// The data-generating parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    /// Mixing weights, one per component, summing to one.
    pub weights: Vec<f64>,
    /// Component means, one row of length `dim` per component.
    pub means: Vec<Vec<f64>>,
}

/// Prior hyperparameters: symmetric Dirichlet on the weights, i.i.d.
/// Gaussian (or flat) on the mean coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub eta: f64,
    pub mean_loc: f64,
    pub mean_scale: f64,
    /// Replace the Gaussian mean prior with an improper flat one.
    pub flat_means: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            mean_loc: 0.0,
            mean_scale: 10.0,
            flat_means: false,
        }
    }
}

/// How the Fisher information integrals are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherKind {
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    pub kind: FisherKind,
    /// Quadrature nodes per axis.
    pub nodes: usize,
    /// Monte Carlo draws (used only by the `monte-carlo` kind).
    pub draws: usize,
    /// Seed for the Monte Carlo backend.
    pub seed: u64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            kind: FisherKind::Quadrature,
            nodes: 80,
            draws: 200_000,
            seed: 1,
        }
    }
}

/// The simulation sweep: sample sizes, replication budget, block
/// fractions, and posterior sampler controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Strictly increasing sample sizes.
    pub n_grid: Vec<usize>,
    /// Replications per sample size (at least 100).
    pub reps: usize,
    /// Block fractions applied to every block target without its own
    /// `alpha` list.
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_posterior_samples")]
    pub posterior_samples: usize,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    #[serde(default = "default_ess_fraction")]
    pub ess_fraction: f64,
    /// Inner draws for the single-observation prediction target.
    #[serde(default = "default_stp_draws")]
    pub stp_draws: usize,
    /// Reject true parameters whose closest component means are nearer
    /// than this (0 disables the check; estimates near degeneracy are
    /// dominated by label-switching noise rather than the 1/n regime).
    #[serde(default)]
    pub min_separation: f64,
}

fn default_alpha() -> Vec<f64> {
    vec![0.5]
}

fn default_posterior_samples() -> usize {
    1000
}

fn default_inflation() -> f64 {
    1.2
}

fn default_ess_fraction() -> f64 {
    0.05
}

fn default_stp_draws() -> usize {
    64
}

/// EM stopping controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        let opts = EmOptions::default();
        Self {
            tol: opts.tol,
            max_iter: opts.max_iter,
        }
    }
}

/// One requested target family: which estimand, under which methods,
/// optionally overriding the sweep-level block fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: Target,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

fn default_methods() -> Vec<MethodKind> {
    vec![MethodKind::Ml, MethodKind::Bayes]
}

fn default_targets() -> Vec<TargetConfig> {
    Target::ALL
        .into_iter()
        .map(|kind| TargetConfig {
            kind,
            methods: default_methods(),
            alpha: None,
        })
        .collect()
}

/// Default output paths; the CLI `--out` flag overrides these.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeffs_json: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimates_csv: Option<String>,
}

/// A full experiment description, as parsed from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub truth: TruthConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub fisher: FisherConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default = "default_targets")]
    pub targets: Vec<TargetConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Everything the runner needs, validated and assembled from a config.
#[derive(Debug)]
pub struct Experiment {
    pub truth: TrueDistribution,
    pub prior: Prior,
    pub backend: FisherBackend,
    /// The sweep with target requests fully expanded over methods and
    /// block fractions, in config order.
    pub spec: SweepSpec,
}

impl ExperimentConfig {
    /// Parse a config from TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Canonical TOML form with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validate the config and assemble the runnable experiment.
    pub fn build(&self) -> Result<Experiment> {
        if !(self.model.sigma > 0.0) {
            return Err(Error::Config(format!(
                "model.sigma must be positive, got {}",
                self.model.sigma
            )));
        }
        let model = MixtureModel::isotropic(
            self.model.components,
            self.model.dim,
            self.model.sigma * self.model.sigma,
        )
        .map_err(config_err)?;
        let w_star = model
            .pack(&self.truth.weights, &self.truth.means)
            .map_err(config_err)?;
        let truth = TrueDistribution::new(model, w_star)?;
        if self.sweep.min_separation > 0.0
            && truth.model().k() > 1
            && truth.min_separation() < self.sweep.min_separation
        {
            return Err(Error::NonRegular(format!(
                "component means separated by {:.6}, below the configured minimum {:.6}",
                truth.min_separation(),
                self.sweep.min_separation
            )));
        }

        if !(self.prior.eta > 0.0) {
            return Err(Error::Config(format!(
                "prior.eta must be positive, got {}",
                self.prior.eta
            )));
        }
        if !self.prior.flat_means && !(self.prior.mean_scale > 0.0) {
            return Err(Error::Config(format!(
                "prior.mean_scale must be positive, got {}",
                self.prior.mean_scale
            )));
        }
        let prior = Prior {
            eta: self.prior.eta,
            mean_prior: if self.prior.flat_means {
                MeanPrior::Flat
            } else {
                MeanPrior::Gaussian {
                    loc: self.prior.mean_loc,
                    scale: self.prior.mean_scale,
                }
            },
        };

        let backend = match self.fisher.kind {
            FisherKind::Quadrature => {
                if self.fisher.nodes < 4 {
                    return Err(Error::Config(format!(
                        "fisher.nodes must be at least 4, got {}",
                        self.fisher.nodes
                    )));
                }
                FisherBackend::Quadrature {
                    nodes: self.fisher.nodes,
                }
            }
            FisherKind::MonteCarlo => {
                if self.fisher.draws == 0 {
                    return Err(Error::Config("fisher.draws must be positive".into()));
                }
                FisherBackend::MonteCarlo {
                    draws: self.fisher.draws,
                    seed: self.fisher.seed,
                }
            }
        };

        if self.sweep.n_grid.is_empty() {
            return Err(Error::Config("sweep.n_grid must not be empty".into()));
        }
        if !self.sweep.n_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "sweep.n_grid must be strictly increasing".into(),
            ));
        }
        if self.sweep.reps < 100 {
            return Err(Error::Config(format!(
                "sweep.reps must be at least 100, got {}",
                self.sweep.reps
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("targets must not be empty".into()));
        }

        let mut requests = Vec::new();
        for tc in &self.targets {
            if tc.methods.is_empty() {
                return Err(Error::Config(format!(
                    "target {} lists no methods",
                    tc.kind
                )));
            }
            if !tc.kind.needs_alpha() {
                if tc.alpha.is_some() {
                    return Err(Error::Config(format!(
                        "target {} takes no block fraction",
                        tc.kind
                    )));
                }
                for &method in &tc.methods {
                    requests.push(TargetRequest {
                        target: tc.kind,
                        method,
                        alpha: None,
                    });
                }
                continue;
            }
            let alphas = tc.alpha.as_ref().unwrap_or(&self.sweep.alpha);
            if alphas.is_empty() {
                return Err(Error::Config(format!(
                    "target {} has no block fractions (sweep.alpha is empty)",
                    tc.kind
                )));
            }
            for &alpha in alphas {
                for &n in &self.sweep.n_grid {
                    block_len_for_alpha(alpha, n, tc.kind.allows_full_alpha()).map_err(|e| {
                        Error::Config(format!("target {} at n = {n}: {e}", tc.kind))
                    })?;
                }
                for &method in &tc.methods {
                    requests.push(TargetRequest {
                        target: tc.kind,
                        method,
                        alpha: Some(alpha),
                    });
                }
            }
        }

        let spec = SweepSpec {
            requests,
            n_grid: self.sweep.n_grid.clone(),
            reps: self.sweep.reps,
            seed: self.seed,
            options: HarnessOptions {
                posterior_samples: self.sweep.posterior_samples,
                inflation: self.sweep.inflation,
                ess_fraction: self.sweep.ess_fraction,
                em: EmOptions {
                    tol: self.em.tol,
                    max_iter: self.em.max_iter,
                },
                stp_inner: self.sweep.stp_draws,
            },
        };
        Ok(Experiment {
            truth,
            prior,
            backend,
            spec,
        })
    }
}

/// Bad model numbers in a config file are configuration errors, not
/// runtime input errors.
fn config_err(e: Error) -> Error {
    match e {
        Error::Invalid(msg) => Error::Config(msg),
        other => other,
    }
}
