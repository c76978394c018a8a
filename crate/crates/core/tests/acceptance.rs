//! The acceptance gate: seven end-to-end checks that tie the Monte
//! Carlo harness to the closed-form coefficients. Each test prints one
//! `acceptance N (...): PASS/FAIL` line with the measured numbers (run
//! with `--nocapture` to see them on success).
//!
//! Two sweeps feed the statistical criteria and are shared across
//! tests:
//!
//! * pass A — the plug-in new-label error alone at 10 000 replications
//!   (no posterior sampling, so it is cheap at that depth);
//! * pass B — every target under both methods, paired by common random
//!   numbers, at 1 600 replications and 500 posterior draws.
//!
//! At those depths every coefficient comparison below is calibrated to
//! have z-scores well inside ±3 when the implementation is correct, and
//! the Type I method gap resolves at |z| ≈ 25.

use std::sync::OnceLock;

use latvar::estimators::targets::{
    estimate_type1, estimate_type2, estimate_type2prime, estimate_type3, estimate_type3prime,
    Method,
};
use latvar::estimators::{
    align_mle, build_posterior, conjugate, em_fit, em_fit_with_trace, laplace_expansion_f2,
    EmOptions, Prior, SamplerOptions,
};
use latvar::fisher::{fisher_matrices, score_gradients, FisherBackend, FisherBundle};
use latvar::model::{MixtureModel, Observations, SymmetryGroup, TrueDistribution};
use latvar::montecarlo::{
    fit_leading_coefficient, fit_paired_coefficient, run_sweep, CoefficientFit, ErrorEstimate,
    HarnessOptions, MethodKind, PairedDiff, SweepOutput, SweepSpec, Target, TargetRequest,
};
use latvar::runner::estimates_csv;
use latvar::seeding::{purpose, stream_rng};
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID: [usize; 4] = [100, 200, 400, 800];
const PASS_A_REPS: usize = 10_000;
const PASS_B_REPS: usize = 1_600;

fn benchmark() -> (TrueDistribution, Prior, FisherBundle) {
    let model = MixtureModel::isotropic(2, 1, 1.0).unwrap();
    let w = model.pack(&[0.4, 0.6], &[vec![-1.5], vec![1.5]]).unwrap();
    let truth = TrueDistribution::new(model, w).unwrap();
    let prior = Prior::new(1.0, 0.0, 10.0).unwrap();
    let bundle = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 80 }).unwrap();
    (truth, prior, bundle)
}

fn request(target: Target, method: MethodKind, alpha: Option<f64>) -> TargetRequest {
    TargetRequest {
        target,
        method,
        alpha,
    }
}

/// Plug-in new-label error only, at full depth.
fn pass_a() -> &'static Vec<ErrorEstimate> {
    static PASS_A: OnceLock<Vec<ErrorEstimate>> = OnceLock::new();
    PASS_A.get_or_init(|| {
        let (truth, prior, bundle) = benchmark();
        let spec = SweepSpec {
            requests: vec![request(Target::III, MethodKind::Ml, None)],
            n_grid: GRID.to_vec(),
            reps: PASS_A_REPS,
            seed: 9001,
            options: HarnessOptions::default(),
        };
        run_sweep(&truth, &prior, &bundle, &spec)
            .expect("pass A sweep")
            .estimates
    })
}

/// Every target under both methods, paired.
fn pass_b() -> &'static SweepOutput {
    static PASS_B: OnceLock<SweepOutput> = OnceLock::new();
    PASS_B.get_or_init(|| {
        let (truth, prior, bundle) = benchmark();
        let mut requests = Vec::new();
        for method in [MethodKind::Ml, MethodKind::Bayes] {
            requests.push(request(Target::I, method, None));
            requests.push(request(Target::II, method, None));
            requests.push(request(Target::III, method, None));
            for alpha in [0.25, 0.5] {
                requests.push(request(Target::IIPrime, method, Some(alpha)));
            }
            for alpha in [0.25, 0.5, 1.0] {
                requests.push(request(Target::IIIPrime, method, Some(alpha)));
            }
            requests.push(request(Target::Stp, method, None));
            requests.push(request(Target::Mtp, method, Some(1.0)));
        }
        let spec = SweepSpec {
            requests,
            n_grid: GRID.to_vec(),
            reps: PASS_B_REPS,
            seed: 9002,
            options: HarnessOptions {
                posterior_samples: 500,
                ..HarnessOptions::default()
            },
        };
        run_sweep(&truth, &prior, &bundle, &spec).expect("pass B sweep")
    })
}

fn fit_rows(
    out: &SweepOutput,
    target: Target,
    method: MethodKind,
    alpha: Option<f64>,
) -> CoefficientFit {
    let rows: Vec<ErrorEstimate> = out
        .estimates
        .iter()
        .filter(|e| {
            e.target == target
                && e.method == method
                && e.alpha.map(f64::to_bits) == alpha.map(f64::to_bits)
        })
        .cloned()
        .collect();
    assert_eq!(rows.len(), GRID.len(), "{target} {method:?} {alpha:?}");
    for row in &rows {
        assert!(row.is_valid(), "degenerate row: {row:?}");
    }
    fit_leading_coefficient(&rows).unwrap()
}

fn fit_gap(out: &SweepOutput, target: Target, alpha: Option<f64>) -> CoefficientFit {
    let rows: Vec<PairedDiff> = out
        .paired
        .iter()
        .filter(|p| p.target == target && p.alpha.map(f64::to_bits) == alpha.map(f64::to_bits))
        .cloned()
        .collect();
    assert_eq!(rows.len(), GRID.len());
    fit_paired_coefficient(&rows).unwrap()
}

/// Prints the per-criterion verdict line, then enforces it.
fn gate(index: usize, label: &str, ok: bool, detail: &str) {
    println!(
        "acceptance {index} ({label}): {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "acceptance {index} ({label}): {detail}");
}

fn z_score(fit: &CoefficientFit, theory: f64) -> f64 {
    (fit.c_hat - theory) / fit.c_se
}

#[test]
fn a1_new_label_plug_in_coefficient() {
    let (_, _, bundle) = benchmark();
    let theory = latvar::fisher::coeff_ml(&bundle).unwrap();
    let fit = fit_leading_coefficient(pass_a()).unwrap();
    let z = z_score(&fit, theory);
    gate(
        1,
        "new-label plug-in coefficient",
        z.abs() < 3.0,
        &format!(
            "ĉ = {:.4} ± {:.4} vs quadrature {:.6} (z = {:+.2}, {} reps)",
            fit.c_hat, fit.c_se, theory, z, PASS_A_REPS
        ),
    );
}

#[test]
fn a2_joint_label_bayes_coefficient_and_strict_improvement() {
    let (_, _, bundle) = benchmark();
    let theory = latvar::fisher::coeff_bayes_type1(&bundle).unwrap();
    let out = pass_b();
    let fit = fit_rows(out, Target::I, MethodKind::Bayes, None);
    let gap = fit_gap(out, Target::I, None);
    let z = z_score(&fit, theory);
    let z_gap = gap.c_hat / gap.c_se;
    let ok = z.abs() < 3.0 && gap.c_hat < 0.0 && z_gap < -3.0;
    gate(
        2,
        "joint-label Bayes coefficient, strictly below plug-in",
        ok,
        &format!(
            "ĉ = {:.4} ± {:.4} vs ½ ln det {:.6} (z = {:+.2}); paired gap {:.4} ± {:.4} (z = {:+.1})",
            fit.c_hat, fit.c_se, theory, z, gap.c_hat, gap.c_se, z_gap
        ),
    );
}

#[test]
fn a3_single_label_gaps_vanish_while_the_joint_gap_resolves() {
    let out = pass_b();
    let gap2 = fit_gap(out, Target::II, None);
    let gap3 = fit_gap(out, Target::III, None);
    let gap1 = fit_gap(out, Target::I, None);
    let z2 = gap2.c_hat / gap2.c_se;
    let z3 = gap3.c_hat / gap3.c_se;
    let z1 = gap1.c_hat / gap1.c_se;
    // The joint gap serves as the power check: the same pipeline and
    // depth that accept the null for one-label targets must reject it
    // decisively where the methods genuinely differ.
    let ok = z2.abs() < 3.0 && z3.abs() < 3.0 && z1.abs() > 3.0;
    gate(
        3,
        "method equivalence for single-label targets",
        ok,
        &format!(
            "in-sample gap {:+.4} ± {:.4} (z = {:+.2}); new-label gap {:+.4} ± {:.4} (z = {:+.2}); joint |z| = {:.1}",
            gap2.c_hat, gap2.c_se, z2, gap3.c_hat, gap3.c_se, z3, z1.abs()
        ),
    );
}

#[test]
fn a4_block_coefficients_track_the_alpha_mixture() {
    let (_, _, bundle) = benchmark();
    let out = pass_b();
    let mut clauses: Vec<String> = Vec::new();
    let mut ok = true;

    // The joint-label row is the α = 1 member of both block families:
    // an in-sample block of everything is the full assignment.
    let fit_joint = fit_rows(out, Target::I, MethodKind::Bayes, None);
    let theory_joint = latvar::fisher::coeff_bayes_type1(&bundle).unwrap();

    let mut families = Vec::new();
    let in_sample = [
        (Target::IIPrime, Some(0.25)),
        (Target::IIPrime, Some(0.5)),
        (Target::I, None),
    ];
    let new_label = [
        (Target::IIIPrime, Some(0.25)),
        (Target::IIIPrime, Some(0.5)),
        (Target::IIIPrime, Some(1.0)),
    ];
    for (name, family) in [("in-sample", in_sample), ("new-label", new_label)] {
        let mut fitted = Vec::new();
        for &(target, alpha) in &family {
            let fit = fit_rows(out, target, MethodKind::Bayes, alpha);
            let theory = match alpha {
                Some(a) => latvar::fisher::coeff_bayes_multitarget(&bundle, a).unwrap(),
                None => theory_joint,
            };
            let z = z_score(&fit, theory);
            ok &= z.abs() < 3.0;
            clauses.push(format!(
                "{name} α={} z = {:+.2}",
                alpha.unwrap_or(1.0),
                z
            ));
            fitted.push((fit, theory));
        }
        // Monotone decrease in α: exact for the closed forms, within
        // noise for the fits.
        for pair in fitted.windows(2) {
            ok &= pair[0].1 > pair[1].1;
            let slack = 3.0 * (pair[0].0.c_se.powi(2) + pair[1].0.c_se.powi(2)).sqrt();
            ok &= pair[0].0.c_hat > pair[1].0.c_hat - slack;
        }
        families.push(fitted);
    }

    // α = 1 ↔ joint-label identity, in closed form and in the fits.
    let alpha_one = &families[1][2].0;
    ok &= (families[1][2].1 - theory_joint).abs() < 1e-12;
    let z_ident = (alpha_one.c_hat - fit_joint.c_hat)
        / (alpha_one.c_se.powi(2) + fit_joint.c_se.powi(2)).sqrt();
    ok &= z_ident.abs() < 3.0;
    clauses.push(format!("α=1 identity z = {z_ident:+.2}"));

    gate(
        4,
        "block coefficients follow ln det[K I_X⁻¹]/(2α)",
        ok,
        &clauses.join("; "),
    );
}

#[test]
fn a5_prediction_coefficients() {
    let (_, _, bundle) = benchmark();
    let out = pass_b();
    let d = bundle.i_x.nrows() as f64;
    let stp_theory = d / 2.0;
    let mtp_theory = d / 2.0 * 2f64.ln();

    let stp_ml = fit_rows(out, Target::Stp, MethodKind::Ml, None);
    let stp_bayes = fit_rows(out, Target::Stp, MethodKind::Bayes, None);
    let mtp_ml = fit_rows(out, Target::Mtp, MethodKind::Ml, Some(1.0));
    let mtp_bayes = fit_rows(out, Target::Mtp, MethodKind::Bayes, Some(1.0));

    let z_sm = z_score(&stp_ml, stp_theory);
    let z_sb = z_score(&stp_bayes, stp_theory);
    let z_mb = z_score(&mtp_bayes, mtp_theory);
    // Plug-in prediction gains nothing from blocking: same constant as
    // its single-target row.
    let z_mm = (mtp_ml.c_hat - stp_ml.c_hat)
        / (mtp_ml.c_se.powi(2) + stp_ml.c_se.powi(2)).sqrt();

    let ok = z_sm.abs() < 3.0 && z_sb.abs() < 3.0 && z_mb.abs() < 3.0 && z_mm.abs() < 3.0;
    gate(
        5,
        "prediction coefficients d/2 and (d/2)·ln 2",
        ok,
        &format!(
            "single-target z = {z_sm:+.2} (plug-in), {z_sb:+.2} (Bayes); block Bayes ĉ = {:.4} ± {:.4} vs {:.4} (z = {z_mb:+.2}); plug-in block ≡ single z = {z_mm:+.2}",
            mtp_bayes.c_hat, mtp_bayes.c_se, mtp_theory
        ),
    );
}

#[test]
fn a6_expansion_residual_on_the_conjugate_fixture() {
    // Single-component fixture: the evidence is exactly conjugate, so
    // the second-order expansion of −ln Z can be scored in absolute
    // nats. Prefix-nested data keep the per-n residuals on one sample
    // path.
    let model = MixtureModel::isotropic(1, 1, 1.0).unwrap();
    let w_star = model.pack(&[1.0], &[vec![0.3]]).unwrap();
    let truth = TrueDistribution::new(model.clone(), w_star).unwrap();
    let prior = Prior::new(1.0, 0.0, 5.0).unwrap();
    let bundle = fisher_matrices(&truth, FisherBackend::Quadrature { nodes: 32 }).unwrap();

    let grid = [50usize, 100, 200, 400, 800];
    let mut rng = stream_rng(9003, purpose::DATA, 800, 0);
    let full = truth.sample_dataset(800, &mut rng);

    let mut residuals = Vec::new();
    for &n in &grid {
        let x = full.x.prefix(n);
        let fit = em_fit(&model, &x, truth.w_star(), &EmOptions::default()).unwrap();
        let expansion =
            laplace_expansion_f2(&model, &prior, &x, &fit.w_hat, &bundle.i_x).unwrap();
        let exact = -conjugate::log_marginal_k1(&model, &prior, &x);
        residuals.push((expansion.total - exact).abs());
    }
    let last = *residuals.last().unwrap();
    let mut inversions = 0usize;
    let mut worst = 0.0f64;
    for pair in residuals.windows(2) {
        if pair[1] >= pair[0] {
            inversions += 1;
            worst = worst.max(pair[1] - pair[0]);
        }
    }
    let ok = last < 0.05 && (inversions == 0 || (inversions == 1 && worst < 1e-3));
    gate(
        6,
        "second-order evidence expansion residual",
        ok,
        &format!(
            "residuals {:?} nats; n = 800 residual {:.2e} < 0.05; inversions {} (worst {:.1e})",
            residuals
                .iter()
                .map(|r| format!("{r:.1e}"))
                .collect::<Vec<_>>(),
            last,
            inversions,
            worst
        ),
    );
}

#[test]
fn a7_structural_invariants() {
    let (truth, prior, bundle) = benchmark();
    let model = truth.model();
    let mut clauses: Vec<String> = Vec::new();
    let mut ok = true;

    // Matrix identities: exact decomposition and PSD ordering.
    let decomposition_exact = &bundle.i_x + &bundle.i_y_given_x == bundle.i_xy;
    let min_cond = SymmetricEigen::new(bundle.i_y_given_x.clone()).eigenvalues.min();
    let min_x = SymmetricEigen::new(bundle.i_x.clone()).eigenvalues.min();
    ok &= decomposition_exact && min_cond >= 0.0 && min_x > 0.0;
    clauses.push(format!(
        "decomposition exact, eig(I_Y|X) ≥ {min_cond:.1e}, eig(I_X) ≥ {min_x:.3}"
    ));

    // Analytic scores against central differences.
    let mut rng = ChaCha8Rng::seed_from_u64(9004);
    let mut worst_fd = 0.0f64;
    for _ in 0..20 {
        let x = [rng.gen::<f64>() * 8.0 - 4.0];
        let y = rng.gen_range(0..2);
        let (joint, marginal) = score_gradients(model, truth.w_star(), &x, y);
        let h = 1e-5;
        for i in 0..3 {
            let mut hi = truth.w_star().clone();
            let mut lo = truth.w_star().clone();
            hi.values_mut()[i] += h;
            lo.values_mut()[i] -= h;
            let dj = (model.log_joint(&hi, &x, y) - model.log_joint(&lo, &x, y)) / (2.0 * h);
            let dm = (model.log_marginal(&hi, &x) - model.log_marginal(&lo, &x)) / (2.0 * h);
            worst_fd = worst_fd.max((dj - joint[i]).abs()).max((dm - marginal[i]).abs());
        }
    }
    ok &= worst_fd < 1e-6;
    clauses.push(format!("score vs finite differences ≤ {worst_fd:.1e}"));

    // Exhaustive normalization of every estimated label probability on
    // blocks of up to three targets, under both methods.
    let mut drng = stream_rng(9005, purpose::DATA, 6, 0);
    let data = truth.sample_dataset(6, &mut drng);
    let fit = em_fit(model, &data.x, truth.w_star(), &EmOptions::default()).unwrap();
    let fit = align_mle(&fit, &truth, &SymmetryGroup::new(2));
    let mut srng = stream_rng(9005, purpose::SAMPLER, 6, 0);
    let sampler = build_posterior(
        model,
        &prior,
        &data.x,
        &fit.w_hat,
        &bundle.i_x,
        &SamplerOptions {
            samples: 2000,
            ..SamplerOptions::default()
        },
        &mut srng,
    )
    .unwrap();
    let mut worst_norm = 0.0f64;
    {
        let methods = [Method::Ml(&fit), Method::Bayes(&sampler)];
        for method in methods {
            // Full joint assignment (2⁶ outcomes) and in-sample blocks
            // of one, two, and three labels.
            let mut total = 0.0;
            for mask in 0..64u32 {
                let labels: Vec<usize> = (0..6).map(|i| (mask >> i & 1) as usize).collect();
                total += estimate_type1(method, model, &data.x, &labels).unwrap().exp();
            }
            worst_norm = worst_norm.max((total - 1.0).abs());
            for block in 1..=3usize {
                let alpha = block as f64 / 6.0;
                let mut total = 0.0;
                for mask in 0..1u32 << block {
                    let labels: Vec<usize> =
                        (0..block).map(|i| (mask >> i & 1) as usize).collect();
                    total += estimate_type2prime(method, model, &data.x, &labels, alpha)
                        .unwrap()
                        .exp();
                }
                worst_norm = worst_norm.max((total - 1.0).abs());
            }
            // New-observation blocks of three, and the single-label
            // distributions.
            let x2 = Observations::from_rows(&[vec![0.4], vec![-1.1], vec![2.2]], 1).unwrap();
            let mut total = 0.0;
            for mask in 0..8u32 {
                let labels: Vec<usize> = (0..3).map(|i| (mask >> i & 1) as usize).collect();
                total += estimate_type3prime(method, model, &data.x, &x2, &labels, 0.5)
                    .unwrap()
                    .exp();
            }
            worst_norm = worst_norm.max((total - 1.0).abs());
            for j in 0..6 {
                let sum: f64 = estimate_type2(method, model, &data.x, j).unwrap().iter().sum();
                worst_norm = worst_norm.max((sum - 1.0).abs());
            }
            let sum: f64 = estimate_type3(method, model, &[0.9]).iter().sum();
            worst_norm = worst_norm.max((sum - 1.0).abs());
        }
    }
    ok &= worst_norm < 1e-9;
    clauses.push(format!("normalization ≤ {worst_norm:.1e}"));

    // EM ascends its objective on 100 random instances.
    let mut em_rng = ChaCha8Rng::seed_from_u64(9006);
    let mut monotone = true;
    for _ in 0..100 {
        let k = em_rng.gen_range(2..=3);
        let m = em_rng.gen_range(1..=2);
        let inst = MixtureModel::isotropic(k, m, 1.0).unwrap();
        let mut weights: Vec<f64> = (0..k).map(|_| 0.3 + em_rng.gen::<f64>()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|a| *a /= total);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..m)
                    .map(|_| i as f64 * 2.5 - 2.0 + em_rng.gen::<f64>() * 0.8)
                    .collect()
            })
            .collect();
        let w = inst.pack(&weights, &means).unwrap();
        let inst_truth = TrueDistribution::new(inst.clone(), w).unwrap();
        let n = em_rng.gen_range(50..=150);
        let data = inst_truth.sample_dataset(n, &mut em_rng);
        let mut init = inst_truth.w_star().clone();
        for v in init.values_mut().iter_mut() {
            *v += em_rng.gen::<f64>() * 0.1 - 0.05;
        }
        let (_, trace) =
            em_fit_with_trace(&inst, &data.x, &init, &EmOptions::default()).unwrap();
        for pair in trace.windows(2) {
            monotone &= pair[1] >= pair[0] - 1e-9;
        }
    }
    ok &= monotone;
    clauses.push(format!(
        "EM log-likelihood non-decreasing on 100 instances: {monotone}"
    ));

    // Bit-identical reruns of a full sweep.
    let spec = SweepSpec {
        requests: vec![
            request(Target::III, MethodKind::Ml, None),
            request(Target::III, MethodKind::Bayes, None),
        ],
        n_grid: vec![60, 120],
        reps: 50,
        seed: 9007,
        options: HarnessOptions {
            posterior_samples: 200,
            ..HarnessOptions::default()
        },
    };
    let first = run_sweep(&truth, &prior, &bundle, &spec).unwrap();
    let second = run_sweep(&truth, &prior, &bundle, &spec).unwrap();
    let identical =
        estimates_csv(&first.estimates) == estimates_csv(&second.estimates) && first.paired == second.paired;
    ok &= identical;
    clauses.push(format!("rerun bit-identical: {identical}"));

    gate(7, "structural invariants", ok, &clauses.join("; "));
}
