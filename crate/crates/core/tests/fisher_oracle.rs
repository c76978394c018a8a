//! Oracle checks for the Fisher matrices: the production path (analytic
//! scores + Gauss–Hermite quadrature) is compared against an independent
//! route built from finite-difference gradients and a Simpson rule on a
//! wide uniform grid. Agreement to 1e-6 certifies both the scores and the
//! integration; the benchmark coefficients are then frozen as regression
//! pins so later refactors cannot silently shift them.

use latvar::fisher::{
    coeff_bayes_multitarget, coeff_bayes_type1, coeff_ml, coeff_predictions, fisher_matrices,
    score_gradients, FisherBackend,
};
use latvar::model::{MixtureModel, ParamVector, TrueDistribution};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences with h = 1e-5 leave O(h²) ≈ 1e-10 truncation
/// error; 1e-6 gives three orders of headroom over the accumulated
/// round-off in the outer products.
const FD_TOL: f64 = 1e-6;

/// The reference two-component instance used throughout: weights
/// (0.4, 0.6), means ∓1.5, unit variance.
fn benchmark_truth() -> TrueDistribution {
    let model = MixtureModel::isotropic(2, 1, 1.0).unwrap();
    let w = model.pack(&[0.4, 0.6], &[vec![-1.5], vec![1.5]]).unwrap();
    TrueDistribution::new(model, w).unwrap()
}

fn fd_gradient<F: Fn(&ParamVector) -> f64>(w: &ParamVector, f: F) -> DVector<f64> {
    let h = 1e-5;
    let d = w.len();
    let mut grad = DVector::zeros(d);
    for i in 0..d {
        let mut hi = w.clone();
        let mut lo = w.clone();
        hi.values_mut()[i] += h;
        lo.values_mut()[i] -= h;
        grad[i] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    grad
}

/// Simpson-rule Fisher matrices on `x ∈ [−L, L]` with finite-difference
/// scores. Completely disjoint machinery from `fisher_matrices`: different
/// integration rule, different gradient source. One-dimensional data only.
fn simpson_fisher(truth: &TrueDistribution, half_width: f64, intervals: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    assert!(intervals % 2 == 0);
    let model = truth.model();
    assert_eq!(model.m(), 1);
    let d = model.dim_param();
    let w = truth.w_star();
    let h = 2.0 * half_width / intervals as f64;
    let mut i_x = DMatrix::zeros(d, d);
    let mut i_xy = DMatrix::zeros(d, d);
    for idx in 0..=intervals {
        let x = [-half_width + idx as f64 * h];
        let simpson = if idx == 0 || idx == intervals {
            1.0
        } else if idx % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let density = truth.log_marginal(&x).exp();
        let weight = simpson * h / 3.0 * density;
        let marg = fd_gradient(w, |v| model.log_marginal(v, &x));
        i_x += &marg * marg.transpose() * weight;
        let post = truth.posterior(&x);
        for (y, &p) in post.iter().enumerate() {
            let joint = fd_gradient(w, |v| model.log_joint(v, &x, y));
            i_xy += &joint * joint.transpose() * (weight * p);
        }
    }
    (i_x, i_xy)
}

#[test]
fn quadrature_matrices_match_the_simpson_oracle() {
    let truth = benchmark_truth();
    let bundle = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 80 }).unwrap();
    // ±10 covers the mixture to e⁻³⁶ tails; 4000 intervals push the
    // Simpson truncation error below the comparison tolerance.
    let (i_x, i_xy) = simpson_fisher(&truth, 10.0, 4000);
    let dx = (&bundle.i_x - &i_x).abs().max();
    let dxy = (&bundle.i_xy - &i_xy).abs().max();
    assert!(dx < FD_TOL, "I_X mismatch {dx:.2e}");
    assert!(dxy < FD_TOL, "I_XY mismatch {dxy:.2e}");
    let dygx = (&bundle.i_y_given_x - (&i_xy - &i_x)).abs().max();
    assert!(dygx < 2.0 * FD_TOL, "I_Y|X mismatch {dygx:.2e}");
}

#[test]
fn analytic_scores_match_finite_differences_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..100 {
        let k = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=2);
        let model = MixtureModel::isotropic(k, m, 0.7 + rng.gen::<f64>()).unwrap();
        let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.gen::<f64>()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|a| *a /= total);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..m).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let w = model.pack(&weights, &means).unwrap();
        let x: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
        let y = rng.gen_range(0..k);
        let (joint, marginal) = score_gradients(&model, &w, &x, y);
        let joint_fd = fd_gradient(&w, |v| model.log_joint(v, &x, y));
        let marg_fd = fd_gradient(&w, |v| model.log_marginal(v, &x));
        let dj = (&joint - &joint_fd).abs().max();
        let dm = (&marginal - &marg_fd).abs().max();
        assert!(dj < FD_TOL, "trial {trial}: joint score off by {dj:.2e}");
        assert!(dm < FD_TOL, "trial {trial}: marginal score off by {dm:.2e}");
    }
}

#[test]
fn monte_carlo_backend_agrees_with_quadrature() {
    let truth = benchmark_truth();
    let quad = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 80 }).unwrap();
    let mc = fisher_matrices(
        &truth,
        FisherBackend::MonteCarlo {
            draws: 200_000,
            seed: 99,
        },
    )
    .unwrap();
    // The Monte Carlo error bound is the max entrywise standard error;
    // 4 of them keeps the false-alarm rate negligible across entries,
    // and the quadrature rule contributes its own bound on top.
    let tol = 4.0 * mc.error_bound + quad.error_bound;
    for (name, a, b) in [
        ("I_X", &quad.i_x, &mc.i_x),
        ("I_XY", &quad.i_xy, &mc.i_xy),
    ] {
        let diff = (a - b).abs().max();
        assert!(diff < tol, "{name}: {diff:.2e} exceeds {tol:.2e}");
    }
}

#[test]
fn benchmark_coefficients_are_pinned() {
    // Regression pins for the reference instance, frozen from the
    // 80-node quadrature (error bound ≈ 1e-5; the values themselves are
    // converged far tighter, see the convergence check below).
    let truth = benchmark_truth();
    let bundle = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 80 }).unwrap();

    let c_ml = coeff_ml(&bundle).unwrap();
    let c_b1 = coeff_bayes_type1(&bundle).unwrap();
    assert!((c_ml - 0.951402809525463).abs() < 1e-9, "c_ml = {c_ml:.15}");
    assert!((c_b1 - 0.5606850156191134).abs() < 1e-9, "c_bayes = {c_b1:.15}");

    let pins = [
        (0.25, 0.7922997854648737),
        (0.5, 0.689623686087666),
        (1.0, 0.5606850156191134),
    ];
    for (alpha, expect) in pins {
        let got = coeff_bayes_multitarget(&bundle, alpha).unwrap();
        assert!((got - expect).abs() < 1e-9, "block({alpha}) = {got:.15}");
    }

    let (stp, mtp_full) = coeff_predictions(3, 1.0).unwrap();
    assert_eq!(stp, 1.5);
    assert!((mtp_full - 1.0397207708399179).abs() < 1e-12);
    let (_, mtp_half) = coeff_predictions(3, 0.5).unwrap();
    assert!((mtp_half - 1.2163953243244932).abs() < 1e-12);
    let (_, mtp_quarter) = coeff_predictions(3, 0.25).unwrap();
    assert!((mtp_quarter - 1.3388613078852587).abs() < 1e-12);

    // Doubling the node count moves the coefficients by no more than the
    // coarse rule's own reported error bound.
    let fine = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 160 }).unwrap();
    assert!((coeff_ml(&fine).unwrap() - c_ml).abs() < bundle.error_bound);
    assert!((coeff_bayes_type1(&fine).unwrap() - c_b1).abs() < bundle.error_bound);
}

#[test]
fn information_never_decreases_with_labels() {
    // I_XY − I_X = I_{Y|X} ⪰ 0 should hold on arbitrary regular
    // instances, not just the benchmark.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let k = rng.gen_range(2..=3);
        let mut weights: Vec<f64> = (0..k).map(|_| 0.3 + rng.gen::<f64>()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|a| *a /= total);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|i| vec![i as f64 * 2.0 - 1.5 + rng.gen::<f64>() * 0.5])
            .collect();
        let model = MixtureModel::isotropic(k, 1, 1.0).unwrap();
        let w = model.pack(&weights, &means).unwrap();
        let truth = TrueDistribution::new(model, w).unwrap();
        let bundle = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 60 }).unwrap();
        let eig = nalgebra::SymmetricEigen::new(bundle.i_y_given_x.clone());
        assert!(
            eig.eigenvalues.min() >= -1e-9,
            "conditional information not PSD: {}",
            eig.eigenvalues.min()
        );
        assert_eq!(&bundle.i_x + &bundle.i_y_given_x, bundle.i_xy);
    }
}
