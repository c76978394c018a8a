//! Fisher information matrices and the closed-form leading coefficients
//! of the estimation-error curves.
//!
//! For the mixture `p(x, y|w)` at the true parameter `w*`, two matrices
//! drive every asymptotic result:
//!
//! - `I_XY`: expected outer product of the complete-data score
//!   `∂ ln p(x,y|w)/∂w`;
//! - `I_X`: the same for the marginal score `∂ ln p(x|w)/∂w`.
//!
//! Their difference `I_{Y|X} = I_XY − I_X` is positive semidefinite and
//! measures how much information the labels add. The leading `c` in each
//! error curve `D(n) = c/n + o(1/n)` is:
//!
//! | quantity                        | coefficient                          |
//! |---------------------------------|--------------------------------------|
//! | ML, every label target          | `Tr[I_{Y|X} I_X⁻¹] / 2`              |
//! | Bayes, joint labels             | `ln det[I_XY I_X⁻¹] / 2`             |
//! | Bayes, single label (either)    | `Tr[I_{Y|X} I_X⁻¹] / 2`              |
//! | Bayes, label block, fraction α  | `ln det[K_XY I_X⁻¹] / (2α)`          |
//! | single new-observable (both)    | `d / 2`                              |
//! | Bayes, observable block         | `ln(1+α)/α · d/2`                    |
//!
//! with `K_XY = α·I_XY + (1−α)·I_X`. No closed form exists for the
//! mixture Fisher integrals themselves, so they are evaluated either by
//! tensor Gauss–Hermite quadrature (low `M`; also the test oracle) or by
//! seeded Monte Carlo (any `M`, with a standard-error bound).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{MixtureModel, ParamVector, TrueDistribution};
use crate::quadrature::gaussian_rule;
use crate::seeding::{purpose, stream_rng};

/// Condition numbers above this make `ln det` / trace algebra
/// untrustworthy; the model is reported as non-regular.
pub const CONDITION_LIMIT: f64 = 1e10;

/// Eigenvalues of `I_{Y|X}` may dip this far below zero from round-off
/// before the bundle is rejected; backends with a larger reported error
/// bound are allowed proportionally more. Dips are clamped to 0.
pub const PSD_FLOOR: f64 = -1e-8;

/// How the Fisher matrices were computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FisherBackend {
    /// Tensor Gauss–Hermite rule with this many nodes per axis.
    Quadrature { nodes: usize },
    /// Seeded sampling from the true joint distribution.
    MonteCarlo { draws: usize, seed: u64 },
}

/// The Fisher matrices at the true parameter, with provenance.
#[derive(Debug, Clone)]
pub struct FisherBundle {
    pub i_x: DMatrix<f64>,
    pub i_xy: DMatrix<f64>,
    pub i_y_given_x: DMatrix<f64>,
    pub backend: FisherBackend,
    /// Estimated numerical error: max entrywise deviation between
    /// resolutions (quadrature) or max entrywise standard error (Monte
    /// Carlo).
    pub error_bound: f64,
}

/// Analytic score vectors at one data point: gradients of
/// `ln p(x, y|w)` and of `ln p(x|w)` with respect to `w`.
///
/// For the packed layout `(a_1..a_{K−1}, μ_1..μ_K)`:
/// `∂ ln p(x,y|w)/∂a_j = δ_{yj}/a_y` for `y < K`, `−1/a_K` when `y = K`;
/// `∂ ln p(x,y|w)/∂μ_k = δ_{yk} Σ⁻¹(x − μ_k)`. The marginal score is the
/// posterior-weighted average of the joint scores.
pub fn score_gradients(
    model: &MixtureModel,
    w: &ParamVector,
    x: &[f64],
    y: usize,
) -> (DVector<f64>, DVector<f64>) {
    let k = model.k();
    let d = model.dim_param();
    assert!(y < k, "label {y} out of range");
    debug_assert!(model.weights_positive(w), "score at inadmissible w");

    let mut joint = DVector::zeros(d);
    fill_joint_score(model, w, x, y, &mut joint);

    let mut marginal = DVector::zeros(d);
    let mut post = vec![0.0; k];
    model.posterior_label_into(w, x, &mut post);
    let mut buf = DVector::zeros(d);
    for (label, &p) in post.iter().enumerate() {
        fill_joint_score(model, w, x, label, &mut buf);
        marginal.axpy(p, &buf, 1.0);
    }
    (joint, marginal)
}

fn fill_joint_score(
    model: &MixtureModel,
    w: &ParamVector,
    x: &[f64],
    y: usize,
    out: &mut DVector<f64>,
) {
    let k = model.k();
    let m = model.m();
    out.fill(0.0);
    if k > 1 {
        if y + 1 < k {
            out[y] = 1.0 / model.weight(w, y);
        } else {
            let inv = -1.0 / model.weight(w, k - 1);
            for j in 0..k - 1 {
                out[j] = inv;
            }
        }
    }
    let mu = model.mean_slice(w, y);
    let sig_inv = model.sigma_inv();
    let off = model.mean_offset(y);
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..m {
            s += sig_inv[(i, j)] * (x[j] - mu[j]);
        }
        out[off + i] = s;
    }
}

/// Computes the Fisher bundle at `w*` with the requested backend.
pub fn fisher_matrices(truth: &TrueDistribution, backend: FisherBackend) -> Result<FisherBundle> {
    let (i_xy_raw, i_x_raw, error_bound) = match backend {
        FisherBackend::Quadrature { nodes } => {
            if truth.model().m() > 2 {
                return Err(Error::Invalid(
                    "quadrature Fisher backend supports M ≤ 2; use the Monte Carlo backend".into(),
                ));
            }
            if nodes < 4 {
                return Err(Error::Invalid("quadrature needs ≥ 4 nodes per axis".into()));
            }
            let fine = quadrature_moments(truth, nodes)?;
            let coarse = quadrature_moments(truth, (nodes / 2).max(4))?;
            let bound = max_entry_diff(&fine.0, &coarse.0).max(max_entry_diff(&fine.1, &coarse.1));
            (fine.0, fine.1, bound)
        }
        FisherBackend::MonteCarlo { draws, seed } => {
            if draws < 1000 {
                return Err(Error::Invalid(
                    "Monte Carlo Fisher backend needs ≥ 1000 draws".into(),
                ));
            }
            monte_carlo_moments(truth, draws, seed)
        }
    };
    assemble_bundle(i_xy_raw, i_x_raw, backend, error_bound)
}

fn max_entry_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Exact label sum + per-component Gaussian tensor quadrature:
/// `E[g(X,Y)] = Σ_y a*_y · E_{x~N(μ*_y, Σ)}[g(x, y)]`.
fn quadrature_moments(
    truth: &TrueDistribution,
    nodes: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let model = truth.model();
    let w = truth.w_star();
    let d = model.dim_param();
    let mut i_xy = DMatrix::zeros(d, d);
    let mut i_x = DMatrix::zeros(d, d);
    for y in 0..model.k() {
        let a = model.weight(w, y);
        let rule = gaussian_rule(model.mean_slice(w, y), model.sigma_chol_lower(), nodes)?;
        for (x, p) in rule.points.iter().zip(&rule.probs) {
            let (joint, marginal) = score_gradients(model, w, x.as_slice(), y);
            i_xy.ger(a * p, &joint, &joint, 1.0);
            i_x.ger(a * p, &marginal, &marginal, 1.0);
        }
    }
    symmetrize_from_lower(&mut i_xy);
    symmetrize_from_lower(&mut i_x);
    Ok((i_xy, i_x))
}

/// Chunked, seeded sampling; the reduction order is fixed by chunk index
/// so results do not depend on the worker count.
fn monte_carlo_moments(
    truth: &TrueDistribution,
    draws: usize,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let model = truth.model();
    let w = truth.w_star();
    let d = model.dim_param();
    const CHUNKS: usize = 64;
    let per = draws / CHUNKS;
    let extra = draws % CHUNKS;
    let partials: Vec<_> = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let count = per + usize::from(c < extra);
            let mut rng = stream_rng(seed, purpose::FISHER, 0, c as u64);
            let mut sum_xy = DMatrix::zeros(d, d);
            let mut sum_x = DMatrix::zeros(d, d);
            let mut sq_xy = DMatrix::zeros(d, d);
            let mut sq_x = DMatrix::zeros(d, d);
            for _ in 0..count {
                let ds = truth.sample_dataset(1, &mut rng);
                let (joint, marginal) = score_gradients(model, w, ds.x.row(0), ds.y[0]);
                accumulate_outer(&mut sum_xy, &mut sq_xy, &joint);
                accumulate_outer(&mut sum_x, &mut sq_x, &marginal);
            }
            (sum_xy, sum_x, sq_xy, sq_x)
        })
        .collect();
    let mut sum_xy = DMatrix::zeros(d, d);
    let mut sum_x = DMatrix::zeros(d, d);
    let mut sq_xy = DMatrix::zeros(d, d);
    let mut sq_x = DMatrix::zeros(d, d);
    for (a, b, c2, d2) in partials {
        sum_xy += a;
        sum_x += b;
        sq_xy += c2;
        sq_x += d2;
    }
    let nf = draws as f64;
    let i_xy = &sum_xy / nf;
    let i_x = &sum_x / nf;
    let mut max_se: f64 = 0.0;
    for (sum, sq) in [(&sum_xy, &sq_xy), (&sum_x, &sq_x)] {
        for i in 0..d {
            for j in 0..d {
                let mean = sum[(i, j)] / nf;
                let var = (sq[(i, j)] / nf - mean * mean).max(0.0);
                max_se = max_se.max((var / nf).sqrt());
            }
        }
    }
    (i_xy, i_x, max_se)
}

fn accumulate_outer(sum: &mut DMatrix<f64>, sq: &mut DMatrix<f64>, v: &DVector<f64>) {
    let d = v.len();
    for i in 0..d {
        for j in 0..d {
            let t = v[i] * v[j];
            sum[(i, j)] += t;
            sq[(i, j)] += t * t;
        }
    }
}

fn symmetrize_from_lower(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Validates positive definiteness and conditioning, clamps round-off
/// negatives in `I_{Y|X}`, and re-imposes `I_XY = I_X + I_{Y|X}` exactly.
fn assemble_bundle(
    i_xy_raw: DMatrix<f64>,
    i_x_raw: DMatrix<f64>,
    backend: FisherBackend,
    error_bound: f64,
) -> Result<FisherBundle> {
    check_spd("I_X", &i_x_raw)?;
    check_spd("I_XY", &i_xy_raw)?;
    let diff = &i_xy_raw - &i_x_raw;
    let eig = SymmetricEigen::new(diff);
    let min_eig = eig.eigenvalues.min();
    // Eigenvalues of the difference are perturbed by the backend's own
    // numerical error, so the rejection floor must scale with it; the
    // absolute floor still catches genuinely inconsistent inputs.
    let floor = PSD_FLOOR.min(-10.0 * error_bound);
    if min_eig < floor {
        return Err(Error::NonRegular(format!(
            "I_XY − I_X has eigenvalue {min_eig:e} below {floor:e}; the matrices are inconsistent"
        )));
    }
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    let mut i_y_given_x =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize_from_lower(&mut i_y_given_x);
    let i_xy = &i_x_raw + &i_y_given_x;
    Ok(FisherBundle {
        i_x: i_x_raw,
        i_xy,
        i_y_given_x,
        backend,
        error_bound,
    })
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if min <= 0.0 {
        return Err(Error::NonRegular(format!(
            "{name} is not positive definite (min eigenvalue {min:e})"
        )));
    }
    if max / min > CONDITION_LIMIT {
        return Err(Error::NonRegular(format!(
            "{name} condition number {:.3e} exceeds {CONDITION_LIMIT:e}",
            max / min
        )));
    }
    Ok(())
}

fn cholesky_of(name: &str, m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::NonRegular(format!("{name} has no Cholesky factorization")))
}

fn log_det(name: &str, m: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky_of(name, m)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Shared ML leading coefficient `Tr[I_{Y|X} I_X⁻¹] / 2`, evaluated via a
/// Cholesky solve (never an explicit inverse).
pub fn coeff_ml(bundle: &FisherBundle) -> Result<f64> {
    let chol = cholesky_of("I_X", &bundle.i_x)?;
    let solved = chol.solve(&bundle.i_y_given_x);
    Ok(0.5 * solved.trace())
}

/// Bayes joint-label coefficient `ln det[I_XY I_X⁻¹] / 2`, via the
/// factorized form `(ln det I_XY − ln det I_X)/2`.
pub fn coeff_bayes_type1(bundle: &FisherBundle) -> Result<f64> {
    Ok(0.5 * (log_det("I_XY", &bundle.i_xy)? - log_det("I_X", &bundle.i_x)?))
}

/// Bayes block-label coefficient `ln det[K_XY I_X⁻¹] / (2α)` with
/// `K_XY = α·I_XY + (1−α)·I_X`; identical for in-sample and
/// new-observation blocks, and equal to the joint-label coefficient at
/// `α = 1`.
pub fn coeff_bayes_multitarget(bundle: &FisherBundle, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!(
            "block fraction α must lie in (0, 1], got {alpha}"
        )));
    }
    let k_xy = &bundle.i_x + &bundle.i_y_given_x * alpha;
    Ok((log_det("K_XY", &k_xy)? - log_det("I_X", &bundle.i_x)?) / (2.0 * alpha))
}

/// Prediction coefficients for observable targets: single-target
/// `c_stp = d/2` for both methods, and the Bayes block value
/// `c_mtp = ln(1+α)/α · d/2`.
pub fn coeff_predictions(d: usize, alpha: f64) -> Result<(f64, f64)> {
    if d == 0 {
        return Err(Error::Invalid("parameter dimension must be ≥ 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!(
            "prediction block fraction α must be positive, got {alpha}"
        )));
    }
    let c_stp = d as f64 / 2.0;
    let c_mtp = (1.0 + alpha).ln() / alpha * c_stp;
    Ok((c_stp, c_mtp))
}

/// Coefficient value tabulated at one α.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlphaCoeff {
    pub alpha: f64,
    pub value: f64,
}

/// Every closed-form leading coefficient for one model instance.
#[derive(Debug, Clone, Serialize)]
pub struct CoefficientReport {
    /// Parameter dimension `d`.
    pub d: usize,
    /// Shared ML coefficient (all label targets; also Bayes single-label).
    pub c_ml: f64,
    /// Bayes joint-label coefficient.
    pub c_bayes_type1: f64,
    /// Single-observable prediction coefficient `d/2` (both methods).
    pub c_stp: f64,
    /// Bayes label-block coefficients over the α grid.
    pub c_block: Vec<AlphaCoeff>,
    /// Bayes observable-block coefficients over the α grid.
    pub c_mtp: Vec<AlphaCoeff>,
}

/// Evaluates the full coefficient table for the given α grid.
pub fn coefficient_report(
    bundle: &FisherBundle,
    d: usize,
    alphas: &[f64],
) -> Result<CoefficientReport> {
    let c_ml = coeff_ml(bundle)?;
    let c_bayes_type1 = coeff_bayes_type1(bundle)?;
    if c_bayes_type1 > c_ml + 1e-12 {
        return Err(Error::NonRegular(format!(
            "coefficient ordering violated: ln det term {c_bayes_type1} exceeds trace term {c_ml}"
        )));
    }
    let mut c_block = Vec::with_capacity(alphas.len());
    let mut c_mtp = Vec::with_capacity(alphas.len());
    let mut c_stp = d as f64 / 2.0;
    for &alpha in alphas {
        c_block.push(AlphaCoeff {
            alpha,
            value: coeff_bayes_multitarget(bundle, alpha)?,
        });
        let (stp, mtp) = coeff_predictions(d, alpha)?;
        c_stp = stp;
        c_mtp.push(AlphaCoeff { alpha, value: mtp });
    }
    Ok(CoefficientReport {
        d,
        c_ml,
        c_bayes_type1,
        c_stp,
        c_block,
        c_mtp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle_from(i_x: DMatrix<f64>, i_y_given_x: DMatrix<f64>) -> FisherBundle {
        let i_xy = &i_x + &i_y_given_x;
        FisherBundle {
            i_x,
            i_xy,
            i_y_given_x,
            backend: FisherBackend::Quadrature { nodes: 0 },
            error_bound: 0.0,
        }
    }

    fn benchmark_truth() -> TrueDistribution {
        let model = MixtureModel::isotropic(2, 1, 1.0).unwrap();
        let w = model
            .pack(&[0.4, 0.6], &[vec![-1.5], vec![1.5]])
            .unwrap();
        TrueDistribution::new(model, w).unwrap()
    }

    #[test]
    fn single_gaussian_fisher_info_is_one() {
        let model = MixtureModel::isotropic(1, 1, 1.0).unwrap();
        let w = model.pack(&[1.0], &[vec![0.0]]).unwrap();
        let truth = TrueDistribution::new(model, w).unwrap();
        let b = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 32 }).unwrap();
        assert_abs_diff_eq!(b.i_x[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(b.i_xy[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(b.i_y_given_x[(0, 0)], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn marginal_score_of_single_gaussian_is_residual() {
        let model = MixtureModel::isotropic(1, 1, 1.0).unwrap();
        let w = model.pack(&[1.0], &[vec![0.7]]).unwrap();
        let (_, marginal) = score_gradients(&model, &w, &[1.9], 0);
        assert_abs_diff_eq!(marginal[0], 1.9 - 0.7, epsilon = 1e-14);
    }

    #[test]
    fn marginal_score_is_posterior_average_of_joint_scores() {
        let model = MixtureModel::isotropic(3, 2, 1.3).unwrap();
        let w = model
            .pack(
                &[0.3, 0.45, 0.25],
                &[vec![0.0, 0.0], vec![2.0, 1.0], vec![-1.0, 1.5]],
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = [rng.gen::<f64>() * 6.0 - 3.0, rng.gen::<f64>() * 6.0 - 3.0];
            let (_, marginal) = score_gradients(&model, &w, &x, 0);
            let post = model.posterior_label(&w, &x);
            let mut avg = DVector::zeros(model.dim_param());
            for (y, &p) in post.iter().enumerate() {
                let (joint, _) = score_gradients(&model, &w, &x, y);
                avg += joint * p;
            }
            assert!((marginal - avg).abs().max() < 1e-10);
        }
    }

    #[test]
    fn coeff_ml_closed_form_cases() {
        let d = 4;
        let zero = bundle_from(DMatrix::identity(d, d) * 2.0, DMatrix::zeros(d, d));
        assert_abs_diff_eq!(coeff_ml(&zero).unwrap(), 0.0, epsilon = 1e-14);
        let quarter = bundle_from(DMatrix::identity(d, d) * 2.0, DMatrix::identity(d, d));
        assert_abs_diff_eq!(coeff_ml(&quarter).unwrap(), d as f64 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn coeff_bayes_type1_closed_form_cases() {
        let zero = bundle_from(DMatrix::identity(3, 3), DMatrix::zeros(3, 3));
        assert_abs_diff_eq!(coeff_bayes_type1(&zero).unwrap(), 0.0, epsilon = 1e-14);
        let b = bundle_from(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
        );
        assert_abs_diff_eq!(
            coeff_bayes_type1(&b).unwrap(),
            0.5 * (3.0f64 / 2.0).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn bayes_joint_coefficient_never_exceeds_ml() {
        // ln det(1 + A) ≤ Tr A for PSD A, so the Bayes joint coefficient
        // is bounded by the ML one on any admissible pair.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let d = 4;
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen::<f64>() - 0.5);
            let b = DMatrix::from_fn(d, d, |_, _| rng.gen::<f64>() - 0.5);
            let i_x = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
            let i_ygx = &b * b.transpose();
            let bundle = bundle_from(i_x, i_ygx);
            let ml = coeff_ml(&bundle).unwrap();
            let bayes = coeff_bayes_type1(&bundle).unwrap();
            assert!(
                bayes <= ml + 1e-12,
                "ln det bound violated: {bayes} > {ml}"
            );
        }
    }

    #[test]
    fn multitarget_coefficient_limits_and_monotonicity() {
        let truth = benchmark_truth();
        let bundle = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 100 }).unwrap();
        let c_ml = coeff_ml(&bundle).unwrap();
        let c_b1 = coeff_bayes_type1(&bundle).unwrap();
        // α = 1 reduces to the joint-label coefficient.
        assert_abs_diff_eq!(
            coeff_bayes_multitarget(&bundle, 1.0).unwrap(),
            c_b1,
            epsilon = 1e-12
        );
        // α → 0⁺ tends to the ML coefficient.
        let near_zero = coeff_bayes_multitarget(&bundle, 1e-4).unwrap();
        assert!((near_zero - c_ml).abs() / c_ml < 1e-3);
        // Strictly decreasing in α when I_{Y|X} ≠ 0.
        let grid = [0.1, 0.25, 0.5, 0.75, 1.0];
        let values: Vec<f64> = grid
            .iter()
            .map(|&a| coeff_bayes_multitarget(&bundle, a).unwrap())
            .collect();
        for pair in values.windows(2) {
            assert!(pair[0] > pair[1], "not decreasing: {values:?}");
        }
        assert!(coeff_bayes_multitarget(&bundle, 0.0).is_err());
        assert!(coeff_bayes_multitarget(&bundle, 1.5).is_err());
    }

    #[test]
    fn multitarget_coefficient_is_zero_when_labels_add_nothing() {
        let bundle = bundle_from(DMatrix::identity(3, 3) * 1.7, DMatrix::zeros(3, 3));
        for alpha in [0.1, 0.5, 1.0] {
            assert_abs_diff_eq!(
                coeff_bayes_multitarget(&bundle, alpha).unwrap(),
                0.0,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn prediction_coefficients() {
        let (stp, mtp) = coeff_predictions(3, 1.0).unwrap();
        assert_abs_diff_eq!(stp, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(mtp, 1.5 * 2f64.ln(), epsilon = 1e-15);
        // α → 0⁺: the block value tends to the single-target value.
        let (stp0, mtp0) = coeff_predictions(3, 1e-6).unwrap();
        assert!((mtp0 - stp0).abs() < 1e-5);
        // ln(1+α) < α, so the Bayes block coefficient is always smaller.
        for alpha in [0.01, 0.3, 0.9, 2.0] {
            let (s, m) = coeff_predictions(5, alpha).unwrap();
            assert!(m < s);
        }
        assert!(coeff_predictions(0, 1.0).is_err());
        assert!(coeff_predictions(3, 0.0).is_err());
    }

    #[test]
    fn benchmark_bundle_satisfies_matrix_invariants() {
        let truth = benchmark_truth();
        let b = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 150 }).unwrap();
        let d = 3;
        for m in [&b.i_x, &b.i_xy, &b.i_y_given_x] {
            assert!((m - m.transpose()).abs().max() < 1e-9, "not symmetric");
        }
        // The decomposition holds exactly by construction.
        assert_eq!(&b.i_x + &b.i_y_given_x, b.i_xy);
        let eig = SymmetricEigen::new(b.i_y_given_x.clone());
        assert!(eig.eigenvalues.min() >= 0.0);
        assert!(
            eig.eigenvalues.max() > 1e-3,
            "labels should add information on the benchmark"
        );
        let eig_x = SymmetricEigen::new(b.i_x.clone());
        assert!(eig_x.eigenvalues.min() > 0.0);
        let _ = d;
    }

    #[test]
    fn well_separated_mixture_has_informative_labels() {
        let model = MixtureModel::isotropic(2, 1, 1.0).unwrap();
        let w = model.pack(&[0.5, 0.5], &[vec![-2.0], vec![2.0]]).unwrap();
        let truth = TrueDistribution::new(model, w).unwrap();
        let b = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 200 }).unwrap();
        let eig = SymmetricEigen::new(b.i_y_given_x.clone());
        assert!(eig.eigenvalues.min() >= 0.0);
        assert!(eig.eigenvalues.max() > 1e-4);
    }

    #[test]
    fn report_carries_the_alpha_grids() {
        let truth = benchmark_truth();
        let b = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 100 }).unwrap();
        let report = coefficient_report(&b, 3, &[0.25, 0.5, 1.0]).unwrap();
        assert_eq!(report.c_block.len(), 3);
        assert_abs_diff_eq!(
            report.c_block[2].value,
            report.c_bayes_type1,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(report.c_stp, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            report.c_mtp[2].value,
            1.5 * 2f64.ln(),
            epsilon = 1e-15
        );
    }
}
