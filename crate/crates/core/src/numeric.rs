//! Small numerical helpers shared across modules.

/// Log of the sum of exponentials, stable against overflow and tolerant
/// of `-inf` entries (empty or all-`-inf` input yields `-inf`).
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        debug_assert!(!x.is_nan(), "logsumexp received NaN");
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &x in xs {
        if x > f64::NEG_INFINITY {
            sum += (x - max).exp();
        }
    }
    max + sum.ln()
}

/// Streaming log-sum-exp: accumulates `ln Σ exp(tᵢ)` one term at a time
/// in O(1) memory by rescaling whenever a new maximum arrives. `-inf`
/// terms are ignored; an empty accumulator reads `-inf`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StreamingLse {
    max: f64,
    /// Sum of `exp(tᵢ − max)`.
    sum: f64,
}

impl StreamingLse {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, t: f64) {
        debug_assert!(!t.is_nan(), "StreamingLse received NaN");
        if t == f64::NEG_INFINITY {
            return;
        }
        if t <= self.max {
            self.sum += (t - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - t).exp() + 1.0;
            self.max = t;
        }
    }

    pub fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Compensated (Kahan) accumulator. Summation results are independent of
/// how work was distributed across threads as long as values are added
/// in a fixed order, which the harness guarantees by collecting
/// replication results into an indexed buffer before reducing.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Mean and standard error of the mean, via compensated two-pass sums.
/// Returns `(nan, nan)` for empty input and stderr 0 for a single value.
pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mut s = KahanSum::new();
    for &v in values {
        s.add(v);
    }
    let mean = s.value() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let mut sq = KahanSum::new();
    for &v in values {
        let d = v - mean;
        sq.add(d * d);
    }
    let var = sq.value() / (n - 1.0);
    (mean, (var / n).sqrt())
}
