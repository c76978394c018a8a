//! EM maximum-likelihood fit for the fixed-covariance mixture, plus
//! label-switching alignment.
//!
//! With `Σ` known both steps are closed-form: the E-step computes the
//! label responsibilities, the M-step sets each mixing ratio to the mean
//! responsibility and each mean to the responsibility-weighted average
//! of the data. The log-likelihood never decreases across iterations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    MixtureModel, Observations, ParamVector, SymmetryGroup, TrueDistribution, BOUNDARY_EPS,
};
use crate::numeric::logsumexp;

/// EM stopping controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    /// Stop when the relative log-likelihood gain falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
        }
    }
}

/// A fitted maximum-likelihood estimate.
#[derive(Debug, Clone)]
pub struct MLEResult {
    pub w_hat: ParamVector,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// `false` when the iteration limit was hit first (flagged, not fatal).
    pub converged: bool,
}

/// Runs EM from `init`. Requires `n ≥ d`; a component whose total
/// responsibility collapses to zero is a boundary failure.
pub fn em_fit(
    model: &MixtureModel,
    x: &Observations,
    init: &ParamVector,
    opts: &EmOptions,
) -> Result<MLEResult> {
    em_fit_inner(model, x, init, opts, None)
}

/// Like [`em_fit`], also returning the per-iteration log-likelihoods
/// (diagnostic; the sequence is non-decreasing).
pub fn em_fit_with_trace(
    model: &MixtureModel,
    x: &Observations,
    init: &ParamVector,
    opts: &EmOptions,
) -> Result<(MLEResult, Vec<f64>)> {
    let mut trace = Vec::new();
    let result = em_fit_inner(model, x, init, opts, Some(&mut trace))?;
    Ok((result, trace))
}

fn em_fit_inner(
    model: &MixtureModel,
    x: &Observations,
    init: &ParamVector,
    opts: &EmOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<MLEResult> {
    let n = x.n();
    let k = model.k();
    let m = model.m();
    let d = model.dim_param();
    if n < d {
        return Err(Error::InsufficientData(format!(
            "EM needs n ≥ d = {d}, got n = {n}"
        )));
    }
    model.check_params(init)?;
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid("EM tolerance must be positive".into()));
    }

    let mut w = init.clone();
    let mut ll_prev = f64::NEG_INFINITY;
    let mut buf = vec![0.0; k];
    let mut wsum = vec![0.0; k];
    let mut musum = vec![0.0; k * m];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        wsum.iter_mut().for_each(|v| *v = 0.0);
        musum.iter_mut().for_each(|v| *v = 0.0);
        let mut ll = 0.0;
        for i in 0..n {
            let xi = x.row(i);
            model.log_joints_into(&w, xi, &mut buf);
            let lse = logsumexp(&buf);
            ll += lse;
            for y in 0..k {
                let r = (buf[y] - lse).exp();
                wsum[y] += r;
                for c in 0..m {
                    musum[y * m + c] += r * xi[c];
                }
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(ll);
        }
        debug_assert!(
            ll >= ll_prev - 1e-9 * (1.0 + ll.abs()),
            "EM log-likelihood decreased: {ll_prev} → {ll}"
        );
        if (ll - ll_prev).abs() < opts.tol * (1.0 + ll.abs()) {
            converged = true;
            ll_prev = ll;
            break;
        }
        ll_prev = ll;
        // M-step.
        let values = w.values_mut();
        for y in 0..k {
            if wsum[y] <= n as f64 * BOUNDARY_EPS {
                return Err(Error::Boundary(format!(
                    "component {} responsibility collapsed to {:e}",
                    y + 1,
                    wsum[y] / n as f64
                )));
            }
            if y + 1 < k {
                values[y] = wsum[y] / n as f64;
            }
            let off = (k - 1) + y * m;
            for c in 0..m {
                values[off + c] = musum[y * m + c] / wsum[y];
            }
        }
    }

    Ok(MLEResult {
        w_hat: w,
        log_likelihood: ll_prev,
        iterations,
        converged,
    })
}

/// Multi-start EM for robustness studies: `restarts` random
/// initializations (uniform-simplex weights, means drawn from the data),
/// keeping the best final log-likelihood. Initializations that fail on
/// the boundary are skipped; an error is returned only if every start
/// fails.
pub fn em_fit_restarts<R: Rng + ?Sized>(
    model: &MixtureModel,
    x: &Observations,
    opts: &EmOptions,
    restarts: usize,
    rng: &mut R,
) -> Result<MLEResult> {
    assert!(restarts >= 1);
    let k = model.k();
    let mut best: Option<MLEResult> = None;
    let mut last_err = None;
    for _ in 0..restarts {
        // Uniform Dirichlet draw via normalized exponentials.
        let mut weights: Vec<f64> = (0..k)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln())
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= total);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| x.row(rng.gen_range(0..x.n())).to_vec())
            .collect();
        let init = match model.pack(&weights, &means) {
            Ok(w) => w,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        match em_fit(model, x, &init, opts) {
            Ok(r) => {
                if best
                    .as_ref()
                    .map_or(true, |b| r.log_likelihood > b.log_likelihood)
                {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Boundary("every EM restart failed".into()))
    })
}

/// Resolves label switching: replaces `ŵ` by its symmetric image nearest
/// to the true parameter (deterministic tie-break toward the
/// lexicographically earliest permutation). The log-likelihood is
/// permutation-invariant, so only the parameter moves.
pub fn align_mle(result: &MLEResult, truth: &TrueDistribution, group: &SymmetryGroup) -> MLEResult {
    let aligned = group.nearest_image(truth.model(), &result.w_hat, truth.w_star());
    MLEResult {
        w_hat: aligned,
        ..result.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::apply_permutation;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn benchmark_truth() -> TrueDistribution {
        let model = MixtureModel::isotropic(2, 1, 1.0).unwrap();
        let w = model.pack(&[0.4, 0.6], &[vec![-1.5], vec![1.5]]).unwrap();
        TrueDistribution::new(model, w).unwrap()
    }

    #[test]
    fn k1_mle_is_the_sample_mean_in_one_step() {
        let model = MixtureModel::isotropic(1, 2, 1.0).unwrap();
        let w0 = model.pack(&[1.0], &[vec![5.0, -5.0]]).unwrap();
        let truth = TrueDistribution::new(model.clone(), w0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = truth.sample_dataset(40, &mut rng);
        let init = model.pack(&[1.0], &[vec![0.0, 0.0]]).unwrap();
        let fit = em_fit(&model, &ds.x, &init, &EmOptions::default()).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..40).map(|i| ds.x.row(i)[c]).sum::<f64>() / 40.0;
            assert_abs_diff_eq!(fit.w_hat.as_slice()[c], mean, epsilon = 1e-12);
        }
        assert!(fit.converged);
    }

    #[test]
    fn log_likelihood_is_monotone_across_iterations() {
        let truth = benchmark_truth();
        let model = truth.model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..25 {
            let ds = truth.sample_dataset(60, &mut rng);
            let a = 0.2 + 0.6 * rng.gen::<f64>();
            let init = model
                .pack(
                    &[a, 1.0 - a],
                    &[
                        vec![-3.0 + 2.0 * rng.gen::<f64>()],
                        vec![1.0 + 2.0 * rng.gen::<f64>()],
                    ],
                )
                .unwrap();
            let (_, trace) = em_fit_with_trace(model, &ds.x, &init, &EmOptions::default()).unwrap();
            for pair in trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9 * (1.0 + pair[0].abs()),
                    "trial {trial}: log-likelihood decreased {} → {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn em_requires_enough_data() {
        let truth = benchmark_truth();
        let model = truth.model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = truth.sample_dataset(2, &mut rng);
        let err = em_fit(model, &ds.x, truth.w_star(), &EmOptions::default());
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn vanishing_component_is_a_boundary_failure() {
        let model = MixtureModel::isotropic(2, 1, 1.0).unwrap();
        // All mass near 0; the component parked at 10⁴ gets essentially
        // zero responsibility and its weight collapses.
        let x = Observations::from_rows(&[vec![0.0], vec![0.1], vec![-0.1], vec![0.05]], 1).unwrap();
        let init = model.pack(&[0.5, 0.5], &[vec![0.0], vec![1e4]]).unwrap();
        let err = em_fit(&model, &x, &init, &EmOptions::default());
        assert!(matches!(err, Err(Error::Boundary(_))), "got {err:?}");
    }

    #[test]
    fn alignment_recovers_from_a_label_swap() {
        let truth = benchmark_truth();
        let group = SymmetryGroup::new(2);
        let swapped = apply_permutation(truth.model(), &[1, 0], truth.w_star());
        let result = MLEResult {
            w_hat: swapped,
            log_likelihood: -1.0,
            iterations: 1,
            converged: true,
        };
        let aligned = align_mle(&result, &truth, &group);
        for (a, b) in aligned.w_hat.as_slice().iter().zip(truth.w_star().as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn alignment_never_increases_distance_to_truth() {
        let truth = benchmark_truth();
        let group = SymmetryGroup::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = 0.05 + 0.9 * rng.gen::<f64>();
            let w = ParamVector::from_slice(&[
                a,
                6.0 * rng.gen::<f64>() - 3.0,
                6.0 * rng.gen::<f64>() - 3.0,
            ]);
            let result = MLEResult {
                w_hat: w.clone(),
                log_likelihood: 0.0,
                iterations: 0,
                converged: true,
            };
            let aligned = align_mle(&result, &truth, &group);
            assert!(aligned.w_hat.distance(truth.w_star()) <= w.distance(truth.w_star()) + 1e-12);
        }
    }

    #[test]
    fn restarts_find_the_same_optimum_as_the_oracle_start() {
        let truth = benchmark_truth();
        let model = truth.model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = truth.sample_dataset(400, &mut rng);
        let from_truth = em_fit(model, &ds.x, truth.w_star(), &EmOptions::default()).unwrap();
        let group = SymmetryGroup::new(2);
        let multi = em_fit_restarts(model, &ds.x, &EmOptions::default(), 10, &mut rng).unwrap();
        let multi = align_mle(&multi, &truth, &group);
        assert!(
            (multi.log_likelihood - from_truth.log_likelihood).abs() < 1e-6,
            "restart optimum {} vs oracle-start optimum {}",
            multi.log_likelihood,
            from_truth.log_likelihood
        );
        assert!(multi.w_hat.distance(&from_truth.w_hat) < 1e-3);
    }
}
