//! Gaussian mixture model with fixed covariance: densities, sampling,
//! and label-permutation symmetries.
//!
//! The free parameter packs the mixing ratios and component means as
//! `w = (a_1, …, a_{K-1}, μ_1, …, μ_K)` with `a_K = 1 − Σ_k a_k`, giving
//! dimension `d = (K − 1) + K·M`. The covariance `Σ` is shared by all
//! components and is not a parameter. All density work happens in log
//! space; outside the admissible parameter set (any mixing ratio ≤ 0)
//! the density is zero and the log-densities return `-inf`, which is
//! what the importance sampler relies on.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::logsumexp;

/// Mixing ratios at or below this are treated as boundary points and
/// rejected by [`MixtureModel::check_params`]: the regularity assumptions
/// behind every asymptotic result exclude the simplex boundary.
pub const BOUNDARY_EPS: f64 = 1e-8;

/// A point in parameter space. The layout (which entry is a mixing ratio,
/// which a mean coordinate) is fixed by the owning [`MixtureModel`]; the
/// vector itself carries no interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: DVector<f64>,
}

impl ParamVector {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            values: DVector::from_column_slice(values),
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DVector<f64> {
        &mut self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    /// Euclidean distance to another point, used for label alignment.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        (&self.values - &other.values).norm()
    }
}

/// Observation matrix: `n` rows of dimension `m`, stored row-major so the
/// per-observation hot loops read contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    data: Vec<f64>,
    n: usize,
    m: usize,
}

impl Observations {
    pub fn new(data: Vec<f64>, n: usize, m: usize) -> Result<Self> {
        if data.len() != n * m {
            return Err(Error::Invalid(format!(
                "observation buffer has {} entries, expected {}×{}",
                data.len(),
                n,
                m
            )));
        }
        Ok(Self { data, n, m })
    }

    pub fn empty(m: usize) -> Self {
        Self {
            data: Vec::new(),
            n: 0,
            m,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], m: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::Invalid(format!(
                    "observation row has {} coordinates, expected {}",
                    r.len(),
                    m
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            data,
            n: rows.len(),
            m,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.m.max(1))
    }

    /// The first `n_head` rows, as an owned copy.
    pub fn prefix(&self, n_head: usize) -> Observations {
        assert!(n_head <= self.n, "prefix longer than the data");
        Observations {
            data: self.data[..n_head * self.m].to_vec(),
            n: n_head,
            m: self.m,
        }
    }

    /// Concatenation `self ++ other` (same dimension).
    pub fn concat(&self, other: &Observations) -> Observations {
        assert_eq!(self.m, other.m, "dimension mismatch in concat");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Observations {
            data,
            n: self.n + other.n,
            m: self.m,
        }
    }
}

/// Paired draws `(x_i, y_i)` from a labeled source; labels are 0-based
/// component indices in `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Observations,
    pub y: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(x: Observations, y: Vec<usize>) -> Result<Self> {
        if x.n() != y.len() {
            return Err(Error::Invalid(format!(
                "{} observations but {} labels",
                x.n(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Gaussian mixture with `K` components on `R^M` and a fixed, shared,
/// positive-definite covariance.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    k: usize,
    m: usize,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    /// `−(M/2)·ln 2π − ½·ln det Σ`, the log-normalizer of one component.
    log_norm: f64,
}

impl MixtureModel {
    pub fn new(k: usize, m: usize, sigma: DMatrix<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("component count K must be ≥ 1".into()));
        }
        if m == 0 {
            return Err(Error::Invalid("observable dimension M must be ≥ 1".into()));
        }
        if sigma.nrows() != m || sigma.ncols() != m {
            return Err(Error::Invalid(format!(
                "covariance is {}×{}, expected {m}×{m}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let asym = (&sigma - sigma.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + sigma.abs().max()) {
            return Err(Error::Invalid(
                "covariance is not symmetric within tolerance".into(),
            ));
        }
        let chol = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::Invalid("covariance is not positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (m as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
        let sigma_inv = chol.inverse();
        Ok(Self {
            k,
            m,
            sigma,
            sigma_inv,
            chol_lower: chol.l(),
            log_norm,
        })
    }

    /// Convenience constructor with `Σ = var·I`.
    pub fn isotropic(k: usize, m: usize, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::Invalid("variance must be positive".into()));
        }
        Self::new(k, m, DMatrix::identity(m, m) * var)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Parameter dimension `d = (K−1) + K·M`.
    pub fn dim_param(&self) -> usize {
        (self.k - 1) + self.k * self.m
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    /// Lower Cholesky factor of `Σ`, used for sampling.
    pub fn sigma_chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    /// Index of the first coordinate of `μ_y` inside a parameter vector.
    pub fn mean_offset(&self, y: usize) -> usize {
        (self.k - 1) + y * self.m
    }

    /// Mixing ratio of component `y` (the last one is implicit).
    pub fn weight(&self, w: &ParamVector, y: usize) -> f64 {
        debug_assert!(y < self.k);
        if y + 1 < self.k {
            w.values[y]
        } else {
            1.0 - w.values.as_slice()[..self.k - 1].iter().sum::<f64>()
        }
    }

    /// All `K` mixing ratios, the implicit one included.
    pub fn weights(&self, w: &ParamVector) -> Vec<f64> {
        (0..self.k).map(|y| self.weight(w, y)).collect()
    }

    pub fn mean_slice<'a>(&self, w: &'a ParamVector, y: usize) -> &'a [f64] {
        let o = self.mean_offset(y);
        &w.as_slice()[o..o + self.m]
    }

    /// Whether every mixing ratio is strictly positive (the support of
    /// the model as a function of `w`).
    pub fn weights_positive(&self, w: &ParamVector) -> bool {
        let head = &w.as_slice()[..self.k - 1];
        let mut rest = 1.0;
        for &a in head {
            if a <= 0.0 {
                return false;
            }
            rest -= a;
        }
        rest > 0.0
    }

    /// Packs explicit weights (length `K`, summing to 1) and means into a
    /// parameter vector, validating interior-of-simplex and shapes.
    pub fn pack(&self, weights: &[f64], means: &[Vec<f64>]) -> Result<ParamVector> {
        if weights.len() != self.k {
            return Err(Error::Invalid(format!(
                "{} weights for K={} components",
                weights.len(),
                self.k
            )));
        }
        if means.len() != self.k {
            return Err(Error::Invalid(format!(
                "{} means for K={} components",
                means.len(),
                self.k
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "mixing ratios sum to {sum}, expected 1"
            )));
        }
        let mut values = Vec::with_capacity(self.dim_param());
        values.extend_from_slice(&weights[..self.k - 1]);
        for mu in means {
            if mu.len() != self.m {
                return Err(Error::Invalid(format!(
                    "mean has {} coordinates, expected {}",
                    mu.len(),
                    self.m
                )));
            }
            values.extend_from_slice(mu);
        }
        let w = ParamVector::from_slice(&values);
        self.check_params(&w)?;
        Ok(w)
    }

    /// Splits a parameter vector into `(weights, means)`; inverse of
    /// [`MixtureModel::pack`].
    pub fn unpack(&self, w: &ParamVector) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_params(w)?;
        let weights = self.weights(w);
        let means = (0..self.k).map(|y| self.mean_slice(w, y).to_vec()).collect();
        Ok((weights, means))
    }

    /// Validates length and strict simplex interior (every mixing ratio
    /// above [`BOUNDARY_EPS`]).
    pub fn check_params(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.dim_param() {
            return Err(Error::Invalid(format!(
                "parameter vector has length {}, expected {}",
                w.len(),
                self.dim_param()
            )));
        }
        for y in 0..self.k {
            let a = self.weight(w, y);
            if !(a > BOUNDARY_EPS) {
                return Err(Error::NonRegular(format!(
                    "mixing ratio a_{} = {a:e} is on the simplex boundary",
                    y + 1
                )));
            }
        }
        Ok(())
    }

    /// `(x−μ_y)ᵀ Σ⁻¹ (x−μ_y)`.
    fn quad_form(&self, x: &[f64], mu: &[f64]) -> f64 {
        let m = self.m;
        if m == 1 {
            let d = x[0] - mu[0];
            return d * d * self.sigma_inv[(0, 0)];
        }
        let mut q = 0.0;
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                s += self.sigma_inv[(i, j)] * (x[j] - mu[j]);
            }
            q += (x[i] - mu[i]) * s;
        }
        q
    }

    /// `ln N(x | μ_y, Σ)`, the component log-density without the weight.
    pub fn log_component(&self, w: &ParamVector, x: &[f64], y: usize) -> f64 {
        self.log_norm - 0.5 * self.quad_form(x, self.mean_slice(w, y))
    }

    /// `ln p(x, y | w) = ln a_y + ln N(x | μ_y, Σ)`; `-inf` when `w` lies
    /// outside the admissible set.
    pub fn log_joint(&self, w: &ParamVector, x: &[f64], y: usize) -> f64 {
        assert!(y < self.k, "label {y} out of range for K={}", self.k);
        if !self.weights_positive(w) {
            return f64::NEG_INFINITY;
        }
        self.weight(w, y).ln() + self.log_component(w, x, y)
    }

    /// Fills `out[y] = ln p(x, y | w)` for all `y`. The caller guarantees
    /// `w` is inside the admissible set (see [`MixtureModel::weights_positive`]).
    pub fn log_joints_into(&self, w: &ParamVector, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.k);
        debug_assert!(self.weights_positive(w));
        for y in 0..self.k {
            out[y] = self.weight(w, y).ln() + self.log_component(w, x, y);
        }
    }

    /// `ln p(x | w) = ln Σ_y p(x, y | w)`; `-inf` outside the admissible set.
    pub fn log_marginal(&self, w: &ParamVector, x: &[f64]) -> f64 {
        if !self.weights_positive(w) {
            return f64::NEG_INFINITY;
        }
        let mut buf = [0.0; 8];
        if self.k <= 8 {
            let out = &mut buf[..self.k];
            self.log_joints_into(w, x, out);
            logsumexp(out)
        } else {
            let mut out = vec![0.0; self.k];
            self.log_joints_into(w, x, &mut out);
            logsumexp(&out)
        }
    }

    /// Label posterior `p(y | x, w)` as a probability vector.
    pub fn posterior_label(&self, w: &ParamVector, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.posterior_label_into(w, x, &mut out);
        out
    }

    /// In-place label posterior; `out` receives nonnegative entries
    /// summing to 1. `K = 1` short-circuits to exactly `[1.0]`.
    pub fn posterior_label_into(&self, w: &ParamVector, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.k);
        if self.k == 1 {
            out[0] = 1.0;
            return;
        }
        debug_assert!(self.weights_positive(w), "posterior at inadmissible w");
        self.log_joints_into(w, x, out);
        let lse = logsumexp(out);
        for v in out.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
}

/// Applies a label permutation to a parameter vector: component `j` of
/// the result is component `perm[j]` of the input.
pub fn apply_permutation(model: &MixtureModel, perm: &[usize], w: &ParamVector) -> ParamVector {
    assert_eq!(perm.len(), model.k(), "permutation length must equal K");
    let k = model.k();
    let m = model.m();
    let weights = model.weights(w);
    let mut values = Vec::with_capacity(model.dim_param());
    for j in 0..k - 1 {
        values.push(weights[perm[j]]);
    }
    for j in 0..k {
        values.extend_from_slice(model.mean_slice(w, perm[j]));
    }
    debug_assert_eq!(values.len(), (k - 1) + k * m);
    ParamVector::from_slice(&values)
}

/// The K! label permutations, in lexicographic order (identity first).
/// Every permutation leaves the marginal density `p(x|w)` unchanged.
#[derive(Debug, Clone)]
pub struct SymmetryGroup {
    perms: Vec<Vec<usize>>,
}

impl SymmetryGroup {
    pub fn new(k: usize) -> Self {
        assert!(
            (1..=8).contains(&k),
            "label alignment enumerates K! permutations; K={k} is out of range"
        );
        let mut perms = Vec::new();
        let mut cur = Vec::with_capacity(k);
        let mut used = vec![false; k];
        fn rec(k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for v in 0..k {
                if !used[v] {
                    used[v] = true;
                    cur.push(v);
                    rec(k, cur, used, out);
                    cur.pop();
                    used[v] = false;
                }
            }
        }
        rec(k, &mut cur, &mut used, &mut perms);
        Self { perms }
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.perms.iter().map(|p| p.as_slice())
    }

    /// The symmetric image of `w` nearest to `reference` in Euclidean
    /// distance. Ties break deterministically toward the lexicographically
    /// earliest permutation (strict improvement required to switch).
    pub fn nearest_image(
        &self,
        model: &MixtureModel,
        w: &ParamVector,
        reference: &ParamVector,
    ) -> ParamVector {
        let mut best = apply_permutation(model, &self.perms[0], w);
        let mut best_dist = best.distance(reference);
        for perm in self.perms.iter().skip(1) {
            let candidate = apply_permutation(model, perm, w);
            let dist = candidate.distance(reference);
            if dist < best_dist {
                best = candidate;
                best_dist = dist;
            }
        }
        best
    }
}

/// The data-generating distribution `q(x, y) = p(x, y | w*)`.
#[derive(Debug, Clone)]
pub struct TrueDistribution {
    model: MixtureModel,
    w_star: ParamVector,
}

impl TrueDistribution {
    /// Requires `w*` strictly inside the simplex and pairwise-distinct
    /// component means (the regular, well-specified case).
    pub fn new(model: MixtureModel, w_star: ParamVector) -> Result<Self> {
        model.check_params(&w_star)?;
        let k = model.k();
        for a in 0..k {
            for b in (a + 1)..k {
                let da: f64 = model
                    .mean_slice(&w_star, a)
                    .iter()
                    .zip(model.mean_slice(&w_star, b))
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                if da <= 1e-8 {
                    return Err(Error::NonRegular(format!(
                        "components {} and {} have coincident means",
                        a + 1,
                        b + 1
                    )));
                }
            }
        }
        Ok(Self { model, w_star })
    }

    pub fn model(&self) -> &MixtureModel {
        &self.model
    }

    pub fn w_star(&self) -> &ParamVector {
        &self.w_star
    }

    /// Smallest pairwise distance between component means; configs may
    /// impose a floor on this ("separation") before trusting asymptotics.
    pub fn min_separation(&self) -> f64 {
        let k = self.model.k();
        if k == 1 {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in (a + 1)..k {
                let d: f64 = self
                    .model
                    .mean_slice(&self.w_star, a)
                    .iter()
                    .zip(self.model.mean_slice(&self.w_star, b))
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// True label posterior `q(y | x)`.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        self.model.posterior_label(&self.w_star, x)
    }

    /// `ln q(x)`.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        self.model.log_marginal(&self.w_star, x)
    }

    /// Draws `n` i.i.d. labeled pairs: `y ~ Cat(a*)`, then
    /// `x ~ N(μ*_y, Σ)`. Deterministic for a fixed generator state.
    pub fn sample_dataset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> LabeledDataset {
        assert!(n >= 1, "sample_dataset requires n ≥ 1");
        let k = self.model.k();
        let m = self.model.m();
        let weights = self.model.weights(&self.w_star);
        let chol = self.model.sigma_chol_lower();
        let mut data = Vec::with_capacity(n * m);
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0f64; m];
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut y = k - 1;
            let mut acc = 0.0;
            for (idx, &a) in weights.iter().enumerate() {
                acc += a;
                if u < acc {
                    y = idx;
                    break;
                }
            }
            labels.push(y);
            for zj in z.iter_mut() {
                *zj = rng.sample(StandardNormal);
            }
            let mu = self.model.mean_slice(&self.w_star, y);
            for i in 0..m {
                let mut xi = mu[i];
                for j in 0..=i {
                    xi += chol[(i, j)] * z[j];
                }
                data.push(xi);
            }
        }
        LabeledDataset {
            x: Observations { data, n, m },
            y: labels,
        }
    }
}
