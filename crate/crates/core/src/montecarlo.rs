//! Monte Carlo verification of the asymptotic error coefficients.
//!
//! Each error function `D(n)` — the Kullback–Leibler risk of one
//! estimation target — is estimated by replication: a replication draws
//! a fresh labeled dataset, fits the mixture by EM, optionally builds
//! the importance-sampled posterior, and contributes one unbiased
//! per-replication summary of the target's KL error. Where the target's
//! label space is finite the inner expectation is computed as an exact
//! sum against the true conditional, so only the outer expectation over
//! data is sampled.
//!
//! Both estimation rules and every requested target are evaluated on the
//! *same* dataset, EM fit, and posterior sample set per replication
//! (common random numbers): the method differences to be resolved are an
//! order of magnitude smaller than per-replication noise, and pairing
//! cancels the shared fluctuations. Replications run in parallel, but
//! results are collected in replication order and reduced with
//! compensated summation, so output bits do not depend on the worker
//! count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::targets::block_len_for_alpha;
use crate::estimators::{align_mle, build_posterior, em_fit, EmOptions, SamplerOptions};
use crate::estimators::{PosteriorSampler, Prior};
use crate::fisher::{
    coeff_bayes_multitarget, coeff_bayes_type1, coeff_ml, coeff_predictions, FisherBundle,
};
use crate::model::{
    LabeledDataset, MixtureModel, Observations, ParamVector, SymmetryGroup, TrueDistribution,
};
use crate::numeric::{logsumexp, mean_and_stderr, StreamingLse};
use crate::seeding::{purpose, stream_rng};

/// One estimation target: which probability is being estimated and
/// scored. Block targets (`IIprime`, `IIIprime`, `MTP`) carry a block
/// fraction α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    /// Joint probability of all `n` latent labels.
    #[serde(rename = "I")]
    I,
    /// The label of one in-sample observation.
    #[serde(rename = "II")]
    II,
    /// The label of a new observation.
    #[serde(rename = "III")]
    III,
    /// The labels of the first `αn` in-sample observations.
    #[serde(rename = "IIprime")]
    IIPrime,
    /// The labels of `αn` new observations.
    #[serde(rename = "IIIprime")]
    IIIPrime,
    /// The density of one new observation.
    #[serde(rename = "STP")]
    Stp,
    /// The joint density of `αn` new observations.
    #[serde(rename = "MTP")]
    Mtp,
}

impl Target {
    pub const ALL: [Target; 7] = [
        Target::I,
        Target::II,
        Target::III,
        Target::IIPrime,
        Target::IIIPrime,
        Target::Stp,
        Target::Mtp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::I => "I",
            Target::II => "II",
            Target::III => "III",
            Target::IIPrime => "IIprime",
            Target::IIIPrime => "IIIprime",
            Target::Stp => "STP",
            Target::Mtp => "MTP",
        }
    }

    /// Whether the target is a block target and therefore needs α.
    pub fn needs_alpha(self) -> bool {
        matches!(self, Target::IIPrime | Target::IIIPrime | Target::Mtp)
    }

    /// Whether α = 1 is admissible (in-sample blocks stop short of the
    /// full dataset; the joint-label target covers that case).
    pub fn allows_full_alpha(self) -> bool {
        matches!(self, Target::IIIPrime | Target::Mtp)
    }

    /// Offset into the per-target auxiliary stream space.
    fn purpose_offset(self) -> u32 {
        match self {
            Target::I => 0,
            Target::II => 1,
            Target::III => 2,
            Target::IIPrime => 3,
            Target::IIIPrime => 4,
            Target::Stp => 5,
            Target::Mtp => 6,
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown target {s:?}")))
    }
}

/// Estimation rule being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "Bayes")]
    Bayes,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Ml => "ML",
            MethodKind::Bayes => "Bayes",
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ML" => Ok(MethodKind::Ml),
            "Bayes" => Ok(MethodKind::Bayes),
            _ => Err(Error::Invalid(format!("unknown method {s:?}"))),
        }
    }
}

/// Monte Carlo estimate of one error function at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEstimate {
    pub target: Target,
    pub method: MethodKind,
    pub n: usize,
    pub alpha: Option<f64>,
    /// Estimated `D(n)` in nats.
    pub mean: f64,
    /// Replication standard error of `mean`.
    pub stderr: f64,
    /// Contributing replications (hard failures are excluded and shrink
    /// this count below the configured budget).
    pub reps: usize,
    /// Replications whose posterior sampler tripped the ESS flag.
    pub flags: usize,
    pub seed: u64,
}

impl ErrorEstimate {
    /// A run is trustworthy when at most 5% of replications were
    /// ESS-flagged.
    pub fn is_valid(&self) -> bool {
        (self.flags as f64) <= 0.05 * self.reps as f64
    }
}

/// Per-replication paired difference `D_Bayes − D_ML` for one target,
/// sharing every random draw between the methods.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDiff {
    pub target: Target,
    pub n: usize,
    pub alpha: Option<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub reps: usize,
    pub flags: usize,
    pub seed: u64,
}

/// Tuning knobs shared by every replication.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessOptions {
    /// Importance-sample count per posterior.
    pub posterior_samples: usize,
    /// Proposal covariance inflation.
    pub inflation: f64,
    /// ESS flagging threshold as a fraction of `posterior_samples`.
    pub ess_fraction: f64,
    pub em: EmOptions,
    /// Inner draws for the single-observation prediction target, whose
    /// inner expectation over the new point cannot be summed exactly.
    pub stp_inner: usize,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self {
            posterior_samples: 1000,
            inflation: 1.2,
            ess_fraction: 0.05,
            em: EmOptions::default(),
            stp_inner: 64,
        }
    }
}

/// One requested output row family: a target scored under one method
/// (with a block fraction where the target needs one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRequest {
    pub target: Target,
    pub method: MethodKind,
    pub alpha: Option<f64>,
}

/// A full simulation sweep: which rows to produce, over which sample
/// sizes, with how many replications.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub requests: Vec<TargetRequest>,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub options: HarnessOptions,
}

/// Sweep results: one estimate row per (request, n), plus a paired
/// difference row for every target present under both methods.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub estimates: Vec<ErrorEstimate>,
    pub paired: Vec<PairedDiff>,
}

// ---------------------------------------------------------------------
// Leading-coefficient extraction
// ---------------------------------------------------------------------

/// Weighted least-squares fit of `n·D(n) = c + b/n`; the `b` term
/// absorbs the next-order correction so `c` is the leading coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientFit {
    pub c_hat: f64,
    pub c_se: f64,
    pub b_hat: f64,
    /// Weighted residual sum of squares.
    pub chi2: f64,
    pub dof: usize,
    pub points: usize,
    /// True when some input had stderr 0 and the fit fell back to unit
    /// weights with the error scale estimated from the residuals.
    pub unit_weights: bool,
}

/// Core fit over `(n, mean, stderr)` triples of `D(n)` measurements.
fn fit_points(points: &[(f64, f64, f64)]) -> Result<CoefficientFit> {
    let mut sizes: Vec<u64> = points.iter().map(|p| p.0.to_bits()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "coefficient fit needs ≥ 3 distinct sample sizes, got {}",
            sizes.len()
        )));
    }
    // Response z = n·mean with standard error n·stderr; weights 1/se².
    // Exact synthetic inputs carry stderr 0, where weighting is moot:
    // fall back to unit weights and let χ²/dof estimate the scale
    // (zero for exact inputs, giving c_se = 0).
    let unit_weights = points.iter().any(|p| p.2 == 0.0);
    let mut s_w = 0.0;
    let mut s_wx = 0.0;
    let mut s_wxx = 0.0;
    let mut s_wz = 0.0;
    let mut s_wxz = 0.0;
    for &(n, mean, stderr) in points {
        let z = n * mean;
        let x = 1.0 / n;
        let w = if unit_weights {
            1.0
        } else {
            1.0 / (n * stderr).powi(2)
        };
        s_w += w;
        s_wx += w * x;
        s_wxx += w * x * x;
        s_wz += w * z;
        s_wxz += w * x * z;
    }
    let det = s_w * s_wxx - s_wx * s_wx;
    if !(det > 0.0) {
        return Err(Error::Invalid(
            "coefficient fit design matrix is singular".into(),
        ));
    }
    let c_hat = (s_wxx * s_wz - s_wx * s_wxz) / det;
    let b_hat = (s_w * s_wxz - s_wx * s_wz) / det;
    let mut chi2 = 0.0;
    for &(n, mean, stderr) in points {
        let z = n * mean;
        let w = if unit_weights {
            1.0
        } else {
            1.0 / (n * stderr).powi(2)
        };
        let r = z - c_hat - b_hat / n;
        chi2 += w * r * r;
    }
    let dof = points.len() - 2;
    let var_c = s_wxx / det;
    let scale = if unit_weights {
        chi2 / dof as f64
    } else {
        // Inflate the nominal error when the model under-fits; never
        // deflate it on a lucky draw.
        (chi2 / dof as f64).max(1.0)
    };
    Ok(CoefficientFit {
        c_hat,
        c_se: (var_c * scale).sqrt(),
        b_hat,
        chi2,
        dof,
        points: points.len(),
        unit_weights,
    })
}

fn check_consistent_rows(
    target: Target,
    alpha: Option<f64>,
    rows: impl Iterator<Item = (Target, Option<f64>)>,
) -> Result<()> {
    for (t, a) in rows {
        if t != target || a.map(f64::to_bits) != alpha.map(f64::to_bits) {
            return Err(Error::Invalid(
                "coefficient fit mixes rows from different targets".into(),
            ));
        }
    }
    Ok(())
}

/// Fit the leading coefficient from a sweep of estimates of one target
/// under one method.
pub fn fit_leading_coefficient(estimates: &[ErrorEstimate]) -> Result<CoefficientFit> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::InsufficientData("coefficient fit got no rows".into()))?;
    check_consistent_rows(
        first.target,
        first.alpha,
        estimates.iter().map(|e| (e.target, e.alpha)),
    )?;
    if estimates.iter().any(|e| e.method != first.method) {
        return Err(Error::Invalid(
            "coefficient fit mixes rows from different methods".into(),
        ));
    }
    let points: Vec<(f64, f64, f64)> = estimates
        .iter()
        .map(|e| (e.n as f64, e.mean, e.stderr))
        .collect();
    fit_points(&points)
}

/// Fit the constant of `n·(D_Bayes − D_ML)` from paired rows.
pub fn fit_paired_coefficient(diffs: &[PairedDiff]) -> Result<CoefficientFit> {
    let first = diffs
        .first()
        .ok_or_else(|| Error::InsufficientData("coefficient fit got no rows".into()))?;
    check_consistent_rows(
        first.target,
        first.alpha,
        diffs.iter().map(|d| (d.target, d.alpha)),
    )?;
    let points: Vec<(f64, f64, f64)> = diffs
        .iter()
        .map(|d| (d.n as f64, d.mean, d.stderr))
        .collect();
    fit_points(&points)
}

/// Which method, if either, has the asymptotically smaller error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// Fitted coefficient gap within 3 standard errors of zero.
    Equivalent,
    /// Gap negative beyond 3 standard errors.
    BayesBetter,
    /// Gap positive beyond 3 standard errors.
    MlBetter,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Equivalent => "equivalent",
            Verdict::BayesBetter => "bayes-better",
            Verdict::MlBetter => "ml-better",
        })
    }
}

/// The verdict the theory predicts for each target: posterior averaging
/// wins exactly where the estimand couples many latent variables or
/// target blocks; single-variable targets wash out the difference.
pub fn expected_verdict(target: Target) -> Verdict {
    match target {
        Target::I | Target::IIPrime | Target::IIIPrime | Target::Mtp => Verdict::BayesBetter,
        Target::II | Target::III | Target::Stp => Verdict::Equivalent,
    }
}

/// Method comparison for one target: the fitted constant of the scaled
/// gap `n·(D_Bayes − D_ML)` and the verdict it supports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodComparison {
    pub target: Target,
    pub alpha: Option<f64>,
    pub gap: CoefficientFit,
    pub verdict: Verdict,
    /// Whether the gap came from paired per-replication differences
    /// (false: independent fits with errors combined in quadrature).
    pub paired: bool,
}

fn verdict_from_gap(c_hat: f64, c_se: f64) -> Verdict {
    if c_hat < -3.0 * c_se {
        Verdict::BayesBetter
    } else if c_hat > 3.0 * c_se {
        Verdict::MlBetter
    } else {
        Verdict::Equivalent
    }
}

/// Compare the methods from paired difference rows.
pub fn compare_methods_paired(diffs: &[PairedDiff]) -> Result<MethodComparison> {
    let gap = fit_paired_coefficient(diffs)?;
    let first = &diffs[0];
    Ok(MethodComparison {
        target: first.target,
        alpha: first.alpha,
        gap,
        verdict: verdict_from_gap(gap.c_hat, gap.c_se),
        paired: true,
    })
}

/// Compare the methods from two independent sweeps. Far less powerful
/// than the paired comparison: the difference of independent fits can
/// rarely resolve the equal-coefficient cases.
pub fn compare_methods_unpaired(
    ml: &[ErrorEstimate],
    bayes: &[ErrorEstimate],
) -> Result<MethodComparison> {
    let fit_ml = fit_leading_coefficient(ml)?;
    let fit_bayes = fit_leading_coefficient(bayes)?;
    if ml[0].target != bayes[0].target
        || ml[0].alpha.map(f64::to_bits) != bayes[0].alpha.map(f64::to_bits)
    {
        return Err(Error::Invalid(
            "method comparison mixes different targets".into(),
        ));
    }
    let gap = CoefficientFit {
        c_hat: fit_bayes.c_hat - fit_ml.c_hat,
        c_se: (fit_bayes.c_se.powi(2) + fit_ml.c_se.powi(2)).sqrt(),
        b_hat: fit_bayes.b_hat - fit_ml.b_hat,
        chi2: fit_bayes.chi2 + fit_ml.chi2,
        dof: fit_bayes.dof + fit_ml.dof,
        points: fit_ml.points + fit_bayes.points,
        unit_weights: fit_ml.unit_weights || fit_bayes.unit_weights,
    };
    Ok(MethodComparison {
        target: ml[0].target,
        alpha: ml[0].alpha,
        gap,
        verdict: verdict_from_gap(gap.c_hat, gap.c_se),
        paired: false,
    })
}

/// The closed-form leading coefficient each (target, method) pair should
/// exhibit, from the Fisher matrices.
pub fn theory_coefficient(
    bundle: &FisherBundle,
    target: Target,
    method: MethodKind,
    alpha: Option<f64>,
) -> Result<f64> {
    let d = bundle.i_x.nrows();
    let need_alpha = || {
        alpha.ok_or_else(|| {
            Error::Invalid(format!("target {target} needs a block fraction α"))
        })
    };
    match (target, method) {
        (Target::I, MethodKind::Ml)
        | (Target::II, _)
        | (Target::III, _)
        | (Target::IIPrime, MethodKind::Ml)
        | (Target::IIIPrime, MethodKind::Ml) => coeff_ml(bundle),
        (Target::I, MethodKind::Bayes) => coeff_bayes_type1(bundle),
        (Target::IIPrime, MethodKind::Bayes) | (Target::IIIPrime, MethodKind::Bayes) => {
            coeff_bayes_multitarget(bundle, need_alpha()?)
        }
        (Target::Stp, _) | (Target::Mtp, MethodKind::Ml) => {
            Ok(coeff_predictions(d, alpha.unwrap_or(1.0))?.0)
        }
        (Target::Mtp, MethodKind::Bayes) => Ok(coeff_predictions(d, need_alpha()?)?.1),
    }
}

// ---------------------------------------------------------------------
// The sweep
// ---------------------------------------------------------------------

/// Which targets each method must evaluate this sweep.
#[derive(Debug, Clone, Copy, Default)]
struct MethodNeed {
    ml: bool,
    bayes: bool,
}

impl MethodNeed {
    fn any(self) -> bool {
        self.ml || self.bayes
    }

    fn set(&mut self, method: MethodKind) {
        match method {
            MethodKind::Ml => self.ml = true,
            MethodKind::Bayes => self.bayes = true,
        }
    }
}

/// Union of everything the request list asks for, so one replication
/// pass can serve every row.
#[derive(Debug, Clone, Default)]
struct Needs {
    t1: MethodNeed,
    t2: MethodNeed,
    t3: MethodNeed,
    t2p: MethodNeed,
    t3p: MethodNeed,
    stp: MethodNeed,
    mtp: MethodNeed,
    /// Sorted unique block fractions per block target (union over
    /// methods — draws are shared, so the union costs one walk).
    ii_alphas: Vec<f64>,
    iii_alphas: Vec<f64>,
    mtp_alphas: Vec<f64>,
}

impl Needs {
    fn from_requests(requests: &[TargetRequest]) -> Needs {
        let mut needs = Needs::default();
        let push_alpha = |list: &mut Vec<f64>, a: f64| {
            if !list.iter().any(|&x| x.to_bits() == a.to_bits()) {
                list.push(a);
            }
        };
        for req in requests {
            match req.target {
                Target::I => needs.t1.set(req.method),
                Target::II => needs.t2.set(req.method),
                Target::III => needs.t3.set(req.method),
                Target::IIPrime => {
                    needs.t2p.set(req.method);
                    push_alpha(&mut needs.ii_alphas, req.alpha.unwrap());
                }
                Target::IIIPrime => {
                    needs.t3p.set(req.method);
                    push_alpha(&mut needs.iii_alphas, req.alpha.unwrap());
                }
                Target::Stp => needs.stp.set(req.method),
                Target::Mtp => {
                    needs.mtp.set(req.method);
                    push_alpha(&mut needs.mtp_alphas, req.alpha.unwrap());
                }
            }
        }
        needs.ii_alphas.sort_by(f64::total_cmp);
        needs.iii_alphas.sort_by(f64::total_cmp);
        needs.mtp_alphas.sort_by(f64::total_cmp);
        needs
    }

    fn bayes_any(&self) -> bool {
        self.t1.bayes
            || self.t2.bayes
            || self.t3.bayes
            || self.t2p.bayes
            || self.t3p.bayes
            || self.stp.bayes
            || self.mtp.bayes
    }

    fn alpha_index(list: &[f64], alpha: f64) -> usize {
        list.iter()
            .position(|&x| x.to_bits() == alpha.to_bits())
            .expect("alpha validated at sweep start")
    }
}

/// Block lengths at one sample size, aligned with the sorted α lists.
#[derive(Debug, Clone, Default)]
struct Marks {
    ii: Vec<usize>,
    iii: Vec<usize>,
    mtp: Vec<usize>,
}

/// Everything a replication needs to read; shared immutably across the
/// worker pool.
struct RepContext<'a> {
    truth: &'a TrueDistribution,
    prior: &'a Prior,
    i_x: &'a nalgebra::DMatrix<f64>,
    group: &'a SymmetryGroup,
    opts: &'a HarnessOptions,
    needs: &'a Needs,
    marks: &'a Marks,
    requests: &'a [TargetRequest],
    seed: u64,
    n: usize,
}

/// Per-replication values for one method; block-target vectors align
/// with the sorted α lists in [`Needs`]. Unrequested slots stay NaN and
/// are never read.
#[derive(Debug, Clone)]
struct MethodValues {
    t1: f64,
    t2: f64,
    t3: f64,
    stp: f64,
    t2p: Vec<f64>,
    t3p: Vec<f64>,
    mtp: Vec<f64>,
}

impl MethodValues {
    fn sized(marks: &Marks) -> Self {
        Self {
            t1: f64::NAN,
            t2: f64::NAN,
            t3: f64::NAN,
            stp: f64::NAN,
            t2p: vec![f64::NAN; marks.ii.len()],
            t3p: vec![f64::NAN; marks.iii.len()],
            mtp: vec![f64::NAN; marks.mtp.len()],
        }
    }

    fn lookup(&self, needs: &Needs, target: Target, alpha: Option<f64>) -> f64 {
        match target {
            Target::I => self.t1,
            Target::II => self.t2,
            Target::III => self.t3,
            Target::Stp => self.stp,
            Target::IIPrime => self.t2p[Needs::alpha_index(&needs.ii_alphas, alpha.unwrap())],
            Target::IIIPrime => self.t3p[Needs::alpha_index(&needs.iii_alphas, alpha.unwrap())],
            Target::Mtp => self.mtp[Needs::alpha_index(&needs.mtp_alphas, alpha.unwrap())],
        }
    }
}

/// One replication's random draws plus every truth-side quantity both
/// methods score against.
struct RepDraws {
    data: LabeledDataset,
    /// Prefix sums of `ln q(y_i|x_i)` over the dataset (length walk+1).
    lnq_prefix: Vec<f64>,
    /// Uniformly drawn in-sample index for the single-label target.
    j2: Option<usize>,
    qpost_j: Option<Vec<f64>>,
    /// The single new observation for the new-label target.
    x3: Option<Vec<f64>>,
    qpost_x3: Option<Vec<f64>>,
    /// New labeled block for the new-label block target.
    block3: Option<LabeledDataset>,
    lnq3_prefix: Vec<f64>,
    /// New observations for the single-observation prediction target.
    stp: Option<Observations>,
    q_stp_lm: Vec<f64>,
    /// New observations for the block prediction target.
    mtp: Option<Observations>,
    qlm_mtp_prefix: Vec<f64>,
}

fn draw_rep(ctx: &RepContext, rep: u64) -> RepDraws {
    let truth = ctx.truth;
    let n = ctx.n;
    let k = truth.model().k();
    let needs = ctx.needs;
    let target_rng = |t: Target| {
        stream_rng(
            ctx.seed,
            purpose::TARGET_EXTRA_BASE + t.purpose_offset(),
            n as u64,
            rep,
        )
    };

    let mut data_rng = stream_rng(ctx.seed, purpose::DATA, n as u64, rep);
    let data = truth.sample_dataset(n, &mut data_rng);

    // Truth-side conditional log-probabilities of the drawn labels,
    // as prefix sums so every block length reads in O(1).
    let latent_walk = if needs.t1.any() {
        n
    } else {
        ctx.marks.ii.last().copied().unwrap_or(0)
    };
    let mut lnq_prefix = Vec::new();
    if latent_walk > 0 && k > 1 {
        lnq_prefix.reserve(latent_walk + 1);
        lnq_prefix.push(0.0);
        let mut acc = 0.0;
        for i in 0..latent_walk {
            acc += truth.posterior(data.x.row(i))[data.y[i]].ln();
            lnq_prefix.push(acc);
        }
    }

    let j2 = needs.t2.any().then(|| {
        let mut rng = target_rng(Target::II);
        rng.gen_range(0..n)
    });
    let qpost_j = j2.map(|j| truth.posterior(data.x.row(j)));

    let (x3, qpost_x3) = if needs.t3.any() {
        let mut rng = target_rng(Target::III);
        let one = truth.sample_dataset(1, &mut rng);
        let x = one.x.row(0).to_vec();
        let q = truth.posterior(&x);
        (Some(x), Some(q))
    } else {
        (None, None)
    };

    let mut lnq3_prefix = Vec::new();
    let block3 = if needs.t3p.any() {
        let len = *ctx.marks.iii.last().unwrap();
        let mut rng = target_rng(Target::IIIPrime);
        let block = truth.sample_dataset(len, &mut rng);
        if k > 1 {
            lnq3_prefix.reserve(len + 1);
            lnq3_prefix.push(0.0);
            let mut acc = 0.0;
            for i in 0..len {
                acc += truth.posterior(block.x.row(i))[block.y[i]].ln();
                lnq3_prefix.push(acc);
            }
        }
        Some(block)
    } else {
        None
    };

    let mut q_stp_lm = Vec::new();
    let stp = if needs.stp.any() {
        let mut rng = target_rng(Target::Stp);
        let block = truth.sample_dataset(ctx.opts.stp_inner, &mut rng);
        q_stp_lm = block.x.rows().map(|r| truth.log_marginal(r)).collect();
        Some(block.x)
    } else {
        None
    };

    let mut qlm_mtp_prefix = Vec::new();
    let mtp = if needs.mtp.any() {
        let len = *ctx.marks.mtp.last().unwrap();
        let mut rng = target_rng(Target::Mtp);
        let block = truth.sample_dataset(len, &mut rng);
        qlm_mtp_prefix.reserve(len + 1);
        qlm_mtp_prefix.push(0.0);
        let mut acc = 0.0;
        for r in block.x.rows() {
            acc += truth.log_marginal(r);
            qlm_mtp_prefix.push(acc);
        }
        Some(block.x)
    } else {
        None
    };

    RepDraws {
        data,
        lnq_prefix,
        j2,
        qpost_j,
        x3,
        qpost_x3,
        block3,
        lnq3_prefix,
        stp,
        q_stp_lm,
        mtp,
        qlm_mtp_prefix,
    }
}

/// Exact inner KL between two distributions over the label alphabet.
fn inner_kl(q: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&qy, &py) in q.iter().zip(p) {
        if qy > 0.0 {
            acc += qy * (qy.ln() - py.ln());
        }
    }
    acc
}

/// Per-replication error contributions under the plug-in rule.
fn ml_values(
    model: &MixtureModel,
    w_hat: &ParamVector,
    draws: &RepDraws,
    needs: &Needs,
    marks: &Marks,
) -> MethodValues {
    let k = model.k();
    let n = draws.data.n();
    let mut v = MethodValues::sized(marks);
    let mut buf = vec![0.0; k];

    if k == 1 {
        // Labels are deterministic: every label target is error-free.
        if needs.t1.ml {
            v.t1 = 0.0;
        }
        if needs.t2.ml {
            v.t2 = 0.0;
        }
        if needs.t3.ml {
            v.t3 = 0.0;
        }
        if needs.t2p.ml {
            v.t2p.fill(0.0);
        }
        if needs.t3p.ml {
            v.t3p.fill(0.0);
        }
    } else {
        if needs.t1.ml || needs.t2p.ml {
            let walk = if needs.t1.ml {
                n
            } else {
                *marks.ii.last().unwrap()
            };
            let mut run = 0.0;
            let mut next_mark = 0;
            for i in 0..walk {
                model.log_joints_into(w_hat, draws.data.x.row(i), &mut buf);
                run += buf[draws.data.y[i]] - logsumexp(&buf);
                while next_mark < marks.ii.len() && marks.ii[next_mark] == i + 1 {
                    if needs.t2p.ml {
                        let len = (i + 1) as f64;
                        v.t2p[next_mark] = (draws.lnq_prefix[i + 1] - run) / len;
                    }
                    next_mark += 1;
                }
            }
            if needs.t1.ml {
                v.t1 = (draws.lnq_prefix[n] - run) / n as f64;
            }
        }
        if needs.t2.ml {
            let j = draws.j2.unwrap();
            let p = model.posterior_label(w_hat, draws.data.x.row(j));
            v.t2 = inner_kl(draws.qpost_j.as_ref().unwrap(), &p);
        }
        if needs.t3.ml {
            let x = draws.x3.as_ref().unwrap();
            let p = model.posterior_label(w_hat, x);
            v.t3 = inner_kl(draws.qpost_x3.as_ref().unwrap(), &p);
        }
        if needs.t3p.ml {
            let block = draws.block3.as_ref().unwrap();
            let mut run = 0.0;
            let mut next_mark = 0;
            for i in 0..block.n() {
                model.log_joints_into(w_hat, block.x.row(i), &mut buf);
                run += buf[block.y[i]] - logsumexp(&buf);
                while next_mark < marks.iii.len() && marks.iii[next_mark] == i + 1 {
                    let len = (i + 1) as f64;
                    v.t3p[next_mark] = (draws.lnq3_prefix[i + 1] - run) / len;
                    next_mark += 1;
                }
            }
        }
    }

    if needs.stp.ml {
        let block = draws.stp.as_ref().unwrap();
        let mut acc = 0.0;
        for (b, row) in block.rows().enumerate() {
            acc += draws.q_stp_lm[b] - model.log_marginal(w_hat, row);
        }
        v.stp = acc / block.n() as f64;
    }
    if needs.mtp.ml {
        let block = draws.mtp.as_ref().unwrap();
        let mut run = 0.0;
        let mut next_mark = 0;
        for (i, row) in block.rows().enumerate() {
            run += model.log_marginal(w_hat, row);
            while next_mark < marks.mtp.len() && marks.mtp[next_mark] == i + 1 {
                let len = (i + 1) as f64;
                v.mtp[next_mark] = (draws.qlm_mtp_prefix[i + 1] - run) / len;
                next_mark += 1;
            }
        }
    }
    v
}

/// Per-replication error contributions under posterior averaging: one
/// fused pass over the importance samples serves every Bayes target,
/// with prefix snapshots providing the nested block lengths.
fn bayes_values(
    model: &MixtureModel,
    sampler: &PosteriorSampler,
    draws: &RepDraws,
    needs: &Needs,
    marks: &Marks,
) -> MethodValues {
    let k = model.k();
    let n = draws.data.n();
    let mut v = MethodValues::sized(marks);
    let mut buf = vec![0.0; k];

    // Latent targets are exact for a single component; only the
    // prediction targets need the sample loop then.
    let latent = k > 1;
    let data_walk = if latent && needs.t1.bayes {
        n
    } else if latent && needs.t2p.bayes {
        *marks.ii.last().unwrap()
    } else {
        0
    };
    let block3_walk = if latent && needs.t3p.bayes {
        *marks.iii.last().unwrap()
    } else {
        0
    };
    let mtp_walk = if needs.mtp.bayes {
        *marks.mtp.last().unwrap()
    } else {
        0
    };
    let want_t2 = latent && needs.t2.bayes;
    let want_t3 = latent && needs.t3.bayes;

    let mut acc1 = StreamingLse::new();
    let mut acc2p = vec![StreamingLse::new(); marks.ii.len()];
    let mut acc2 = vec![StreamingLse::new(); k];
    let mut acc3 = vec![StreamingLse::new(); k];
    let mut acc3p = vec![StreamingLse::new(); marks.iii.len()];
    let mut acc_stp = vec![StreamingLse::new(); draws.q_stp_lm.len()];
    let mut acc_mtp = vec![StreamingLse::new(); marks.mtp.len()];

    for (w, &lw) in sampler.samples().iter().zip(sampler.log_weights()) {
        if lw == f64::NEG_INFINITY {
            continue;
        }
        if data_walk > 0 {
            let mut run = 0.0;
            let mut next_mark = 0;
            for i in 0..data_walk {
                model.log_joints_into(w, draws.data.x.row(i), &mut buf);
                run += buf[draws.data.y[i]] - logsumexp(&buf);
                while next_mark < marks.ii.len() && marks.ii[next_mark] == i + 1 {
                    acc2p[next_mark].add(lw + run);
                    next_mark += 1;
                }
            }
            if needs.t1.bayes {
                acc1.add(lw + run);
            }
        }
        if want_t2 {
            let j = draws.j2.unwrap();
            model.log_joints_into(w, draws.data.x.row(j), &mut buf);
            let lm = logsumexp(&buf);
            for y in 0..k {
                acc2[y].add(lw + buf[y] - lm);
            }
        }
        if want_t3 {
            model.log_joints_into(w, draws.x3.as_ref().unwrap(), &mut buf);
            let lm = logsumexp(&buf);
            for y in 0..k {
                acc3[y].add(lw + buf[y] - lm);
            }
        }
        if block3_walk > 0 {
            let block = draws.block3.as_ref().unwrap();
            let mut run = 0.0;
            let mut next_mark = 0;
            for i in 0..block3_walk {
                model.log_joints_into(w, block.x.row(i), &mut buf);
                run += buf[block.y[i]] - logsumexp(&buf);
                while next_mark < marks.iii.len() && marks.iii[next_mark] == i + 1 {
                    acc3p[next_mark].add(lw + run);
                    next_mark += 1;
                }
            }
        }
        if needs.stp.bayes {
            let block = draws.stp.as_ref().unwrap();
            for (b, row) in block.rows().enumerate() {
                acc_stp[b].add(lw + model.log_marginal(w, row));
            }
        }
        if mtp_walk > 0 {
            let block = draws.mtp.as_ref().unwrap();
            let mut run = 0.0;
            let mut next_mark = 0;
            for i in 0..mtp_walk {
                run += model.log_marginal(w, block.row(i));
                while next_mark < marks.mtp.len() && marks.mtp[next_mark] == i + 1 {
                    acc_mtp[next_mark].add(lw + run);
                    next_mark += 1;
                }
            }
        }
    }

    if needs.t1.bayes {
        v.t1 = if latent {
            (draws.lnq_prefix[n] - acc1.value()) / n as f64
        } else {
            0.0
        };
    }
    if needs.t2p.bayes {
        if latent {
            for (mi, &len) in marks.ii.iter().enumerate() {
                v.t2p[mi] = (draws.lnq_prefix[len] - acc2p[mi].value()) / len as f64;
            }
        } else {
            v.t2p.fill(0.0);
        }
    }
    if needs.t2.bayes {
        v.t2 = if latent {
            let mut p: Vec<f64> = acc2.iter().map(|a| a.value().exp()).collect();
            let total: f64 = p.iter().sum();
            for py in &mut p {
                *py /= total;
            }
            inner_kl(draws.qpost_j.as_ref().unwrap(), &p)
        } else {
            0.0
        };
    }
    if needs.t3.bayes {
        v.t3 = if latent {
            let mut p: Vec<f64> = acc3.iter().map(|a| a.value().exp()).collect();
            let total: f64 = p.iter().sum();
            for py in &mut p {
                *py /= total;
            }
            inner_kl(draws.qpost_x3.as_ref().unwrap(), &p)
        } else {
            0.0
        };
    }
    if needs.t3p.bayes {
        if latent {
            for (mi, &len) in marks.iii.iter().enumerate() {
                v.t3p[mi] = (draws.lnq3_prefix[len] - acc3p[mi].value()) / len as f64;
            }
        } else {
            v.t3p.fill(0.0);
        }
    }
    if needs.stp.bayes {
        let mut acc = 0.0;
        for (b, lse) in acc_stp.iter().enumerate() {
            acc += draws.q_stp_lm[b] - lse.value();
        }
        v.stp = acc / acc_stp.len() as f64;
    }
    if needs.mtp.bayes {
        for (mi, &len) in marks.mtp.iter().enumerate() {
            v.mtp[mi] = (draws.qlm_mtp_prefix[len] - acc_mtp[mi].value()) / len as f64;
        }
    }
    v
}

/// Run one replication end to end; `None` marks a hard failure (EM
/// boundary collapse, unusable posterior, or a non-finite contribution),
/// which drops the replication from every row of this sweep.
fn evaluate_rep(ctx: &RepContext, rep: u64) -> Option<(Vec<f64>, bool)> {
    let model = ctx.truth.model();
    let draws = draw_rep(ctx, rep);

    let fit = em_fit(model, &draws.data.x, ctx.truth.w_star(), &ctx.opts.em).ok()?;
    let fit = align_mle(&fit, ctx.truth, ctx.group);

    let (bayes, flagged) = if ctx.needs.bayes_any() {
        let mut srng = stream_rng(ctx.seed, purpose::SAMPLER, ctx.n as u64, rep);
        let sampler = build_posterior(
            model,
            ctx.prior,
            &draws.data.x,
            &fit.w_hat,
            ctx.i_x,
            &SamplerOptions {
                samples: ctx.opts.posterior_samples,
                inflation: ctx.opts.inflation,
                ess_fraction: ctx.opts.ess_fraction,
            },
            &mut srng,
        )
        .ok()?;
        let flagged = sampler.flagged();
        (
            Some(bayes_values(model, &sampler, &draws, ctx.needs, ctx.marks)),
            flagged,
        )
    } else {
        (None, false)
    };

    let ml = (ctx.needs.t1.ml
        || ctx.needs.t2.ml
        || ctx.needs.t3.ml
        || ctx.needs.t2p.ml
        || ctx.needs.t3p.ml
        || ctx.needs.stp.ml
        || ctx.needs.mtp.ml)
        .then(|| ml_values(model, &fit.w_hat, &draws, ctx.needs, ctx.marks));

    let mut values = Vec::with_capacity(ctx.requests.len());
    for req in ctx.requests {
        let source = match req.method {
            MethodKind::Ml => ml.as_ref().unwrap(),
            MethodKind::Bayes => bayes.as_ref().unwrap(),
        };
        let value = source.lookup(ctx.needs, req.target, req.alpha);
        if !value.is_finite() {
            return None;
        }
        values.push(value);
    }
    Some((values, flagged))
}

fn validate_spec(truth: &TrueDistribution, spec: &SweepSpec) -> Result<()> {
    let model = truth.model();
    if spec.requests.is_empty() {
        return Err(Error::Invalid("sweep requests no targets".into()));
    }
    if spec.n_grid.is_empty() {
        return Err(Error::Invalid("sweep has an empty sample-size grid".into()));
    }
    if spec.reps < 2 {
        return Err(Error::Invalid(
            "sweep needs at least two replications for a standard error".into(),
        ));
    }
    for (i, req) in spec.requests.iter().enumerate() {
        match (req.target.needs_alpha(), req.alpha) {
            (true, None) => {
                return Err(Error::Invalid(format!(
                    "target {} needs a block fraction α",
                    req.target
                )))
            }
            (false, Some(_)) => {
                return Err(Error::Invalid(format!(
                    "target {} takes no block fraction",
                    req.target
                )))
            }
            _ => {}
        }
        for other in &spec.requests[..i] {
            if other.target == req.target
                && other.method == req.method
                && other.alpha.map(f64::to_bits) == req.alpha.map(f64::to_bits)
            {
                return Err(Error::Invalid(format!(
                    "duplicate request: {} {} α={:?}",
                    req.target, req.method, req.alpha
                )));
            }
        }
    }
    for &n in &spec.n_grid {
        if n < model.dim_param() {
            return Err(Error::InsufficientData(format!(
                "sample size {n} is below the parameter dimension {}",
                model.dim_param()
            )));
        }
        for req in &spec.requests {
            if let Some(alpha) = req.alpha {
                block_len_for_alpha(alpha, n, req.target.allows_full_alpha())?;
            }
        }
    }
    let stp_requested = spec
        .requests
        .iter()
        .any(|r| r.target == Target::Stp);
    if stp_requested && spec.options.stp_inner == 0 {
        return Err(Error::Invalid(
            "the prediction target needs at least one inner draw".into(),
        ));
    }
    Ok(())
}

/// Run a full sweep: every requested row at every sample size, plus
/// paired Bayes−ML difference rows wherever a target was requested
/// under both methods.
pub fn run_sweep(
    truth: &TrueDistribution,
    prior: &Prior,
    bundle: &FisherBundle,
    spec: &SweepSpec,
) -> Result<SweepOutput> {
    validate_spec(truth, spec)?;
    let model = truth.model();
    let needs = Needs::from_requests(&spec.requests);
    let group = SymmetryGroup::new(model.k());

    // Paired rows: for each Bayes request, the matching ML request.
    let mut pairs = Vec::new();
    for (bi, req) in spec.requests.iter().enumerate() {
        if req.method != MethodKind::Bayes {
            continue;
        }
        if let Some(mi) = spec.requests.iter().position(|r| {
            r.method == MethodKind::Ml
                && r.target == req.target
                && r.alpha.map(f64::to_bits) == req.alpha.map(f64::to_bits)
        }) {
            pairs.push((mi, bi));
        }
    }

    let mut estimates = Vec::new();
    let mut paired = Vec::new();
    for &n in &spec.n_grid {
        let marks = Marks {
            ii: needs
                .ii_alphas
                .iter()
                .map(|&a| block_len_for_alpha(a, n, false))
                .collect::<Result<_>>()?,
            iii: needs
                .iii_alphas
                .iter()
                .map(|&a| block_len_for_alpha(a, n, true))
                .collect::<Result<_>>()?,
            mtp: needs
                .mtp_alphas
                .iter()
                .map(|&a| block_len_for_alpha(a, n, true))
                .collect::<Result<_>>()?,
        };
        let ctx = RepContext {
            truth,
            prior,
            i_x: &bundle.i_x,
            group: &group,
            opts: &spec.options,
            needs: &needs,
            marks: &marks,
            requests: &spec.requests,
            seed: spec.seed,
            n,
        };
        let results: Vec<Option<(Vec<f64>, bool)>> = (0..spec.reps as u64)
            .into_par_iter()
            .map(|rep| evaluate_rep(&ctx, rep))
            .collect();
        let ok: Vec<&(Vec<f64>, bool)> = results.iter().flatten().collect();
        if ok.len() < 2 {
            return Err(Error::Invalid(format!(
                "fewer than two replications survived at n = {n}; \
                 the model or sample size is unworkable"
            )));
        }
        let flags = ok.iter().filter(|(_, f)| *f).count();
        for (ti, req) in spec.requests.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|(v, _)| v[ti]).collect();
            let (mean, stderr) = mean_and_stderr(&vals);
            estimates.push(ErrorEstimate {
                target: req.target,
                method: req.method,
                n,
                alpha: req.alpha,
                mean,
                stderr,
                reps: vals.len(),
                flags: if req.method == MethodKind::Bayes {
                    flags
                } else {
                    0
                },
                seed: spec.seed,
            });
        }
        for &(mi, bi) in &pairs {
            let vals: Vec<f64> = ok.iter().map(|(v, _)| v[bi] - v[mi]).collect();
            let (mean, stderr) = mean_and_stderr(&vals);
            let req = &spec.requests[bi];
            paired.push(PairedDiff {
                target: req.target,
                n,
                alpha: req.alpha,
                mean,
                stderr,
                reps: vals.len(),
                flags,
                seed: spec.seed,
            });
        }
    }
    Ok(SweepOutput { estimates, paired })
}

/// Estimate one error function at one sample size.
#[allow(clippy::too_many_arguments)]
pub fn estimate_error(
    target: Target,
    method: MethodKind,
    truth: &TrueDistribution,
    prior: &Prior,
    bundle: &FisherBundle,
    n: usize,
    reps: usize,
    alpha: Option<f64>,
    seed: u64,
    options: &HarnessOptions,
) -> Result<ErrorEstimate> {
    if reps < 100 {
        return Err(Error::Invalid(format!(
            "error estimation needs ≥ 100 replications, got {reps}"
        )));
    }
    let spec = SweepSpec {
        requests: vec![TargetRequest {
            target,
            method,
            alpha,
        }],
        n_grid: vec![n],
        reps,
        seed,
        options: options.clone(),
    };
    let out = run_sweep(truth, prior, bundle, &spec)?;
    Ok(out.estimates.into_iter().next().expect("one row requested"))
}
