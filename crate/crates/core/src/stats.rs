//! Incremental statistics and the variance-ratio F-test used to score splits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("overall scaled variance is not positive ({0}); candidate cannot be split")]
    DegenerateVariance(f64),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Running count, mean and scaled variance `J = variance * n` of a stream of reals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub n: u64,
    pub mean: f64,
    /// Sum of squared deviations from the running mean.
    pub j: f64,
}

impl RunningStats {
    pub const fn new() -> Self {
        Self {
            n: 0,
            mean: 0.0,
            j: 0.0,
        }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = Self::new();
        for &x in xs {
            s.push(x);
        }
        s
    }

    /// Welford update. The sum-of-squares form is avoided on purpose: it cancels badly.
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let prev_mean = self.mean;
        self.mean = prev_mean + (x - prev_mean) / self.n as f64;
        self.j += (x - prev_mean) * (x - self.mean);
        if self.j < 0.0 {
            self.j = 0.0;
        }
    }

    /// Value-semantics form of [`RunningStats::push`].
    pub fn updated(mut self, x: f64) -> Self {
        self.push(x);
        self
    }

    /// Population variance `J / n`; zero for an empty accumulator.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.j / self.n as f64
        }
    }
}

/// Ratio of the pooled within-partition variance to the overall variance.
///
/// With `n_O` visits this is `(sum_i J_i / n_O) / (J_O / n_O)`, so the `n_O`
/// factors cancel. Works for any number of partitions.
pub fn pooled_f_ratio(children: &[RunningStats], overall: &RunningStats) -> Result<f64, StatsError> {
    if overall.n == 0 {
        return Err(StatsError::Domain("overall statistics are empty".into()));
    }
    let total: u64 = children.iter().map(|c| c.n).sum();
    if total != overall.n {
        return Err(StatsError::Domain(format!(
            "children cover {total} observations but overall has {}",
            overall.n
        )));
    }
    if overall.j <= 0.0 {
        return Err(StatsError::DegenerateVariance(overall.j));
    }
    let within: f64 = children.iter().map(|c| c.j).sum();
    Ok(within / overall.j)
}

/// Lower-tail probability `P(F <= f)` for `F ~ F(df1, df2)`.
///
/// A split is informative when the within-partition variance is small, so the
/// statistic is tested against the lower tail.
pub fn f_test_p_value(f: f64, df1: u64, df2: u64) -> Result<f64, StatsError> {
    if f.is_nan() || f < 0.0 {
        return Err(StatsError::Domain(format!("F statistic must be >= 0, got {f}")));
    }
    if df1 == 0 || df2 == 0 {
        return Err(StatsError::Domain(format!(
            "degrees of freedom must be >= 1, got ({df1}, {df2})"
        )));
    }
    if f == 0.0 {
        return Ok(0.0);
    }
    if f.is_infinite() {
        return Ok(1.0);
    }
    let (d1, d2) = (df1 as f64, df2 as f64);
    let x = d1 * f / (d1 * f + d2);
    let p = regularized_incomplete_beta(d1 / 2.0, d2 / 2.0, x)?;
    Ok(p.clamp(0.0, 1.0))
}

const CF_MAX_ITER: usize = 20_000;
const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64, StatsError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(StatsError::Domain(format!("shape parameters must be > 0, got ({a}, {b})")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(StatsError::Domain(format!("x must lie in [0, 1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    // The continued fraction converges fastest below the mean; reflect otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(beta_prefix(a, b, x) * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - beta_prefix(b, a, 1.0 - x) * beta_cf(b, a, 1.0 - x)? / b)
    }
}

fn beta_prefix(a: f64, b: f64, x: f64) -> f64 {
    (a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b)).exp()
}

/// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64, StatsError> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            return Ok(h);
        }
    }
    Err(StatsError::Domain(format!(
        "incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}"
    )))
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `ln Γ(x)` for `x > 0`: shift up to `x >= 10`, then the Stirling series.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut shift = 0.0;
    let mut z = x;
    while z < 10.0 {
        shift += z.ln();
        z += 1.0;
    }
    let z2 = z * z;
    let series = 1.0 / (12.0 * z) - 1.0 / (360.0 * z * z2) + 1.0 / (1260.0 * z2 * z2 * z)
        - 1.0 / (1680.0 * z2 * z2 * z2 * z)
        + 1.0 / (1188.0 * z2 * z2 * z2 * z2 * z)
        - 691.0 / (360360.0 * z2 * z2 * z2 * z2 * z2 * z);
    (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + series - shift
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(xs: &[f64]) -> (u64, f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let j = xs.iter().map(|x| (x - mean).powi(2)).sum();
        (xs.len() as u64, mean, j)
    }

    #[test]
    fn first_observation() {
        let s = RunningStats::new().updated(2.0);
        assert_eq!((s.n, s.mean, s.j), (1, 2.0, 0.0));
    }

    #[test]
    fn second_observation_matches_batch() {
        let s = RunningStats { n: 1, mean: 2.0, j: 0.0 }.updated(4.0);
        assert_eq!((s.n, s.mean, s.j), (2, 3.0, 2.0));
        assert_eq!(batch(&[2.0, 4.0]), (2, 3.0, 2.0));
        assert_eq!(s.variance(), 1.0);
    }

    #[test]
    fn constant_sequence_has_zero_j() {
        let s = RunningStats::from_slice(&[5.0, 5.0, 5.0]);
        assert_eq!((s.n, s.mean, s.j), (3, 5.0, 0.0));
    }

    #[test]
    fn empty_stats_are_zero() {
        let s = RunningStats::default();
        assert_eq!((s.n, s.mean, s.j, s.variance()), (0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn f_ratio_analytic_cases() {
        let perfect = [RunningStats::from_slice(&[1.0, 1.0]), RunningStats::from_slice(&[3.0, 3.0])];
        let overall = RunningStats::from_slice(&[1.0, 1.0, 3.0, 3.0]);
        assert_eq!(overall.j, 4.0);
        assert_eq!(pooled_f_ratio(&perfect, &overall).unwrap(), 0.0);

        let mixed = [RunningStats::from_slice(&[1.0, 3.0]), RunningStats::from_slice(&[1.0, 3.0])];
        let overall = RunningStats::from_slice(&[1.0, 3.0, 1.0, 3.0]);
        assert_eq!(pooled_f_ratio(&mixed, &overall).unwrap(), 1.0);

        let three = [
            RunningStats::from_slice(&[1.0, 1.0]),
            RunningStats::from_slice(&[2.0, 2.0]),
            RunningStats::from_slice(&[3.0, 3.0]),
        ];
        let overall = RunningStats::from_slice(&[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(overall.j, 4.0);
        assert_eq!(pooled_f_ratio(&three, &overall).unwrap(), 0.0);
    }

    #[test]
    fn f_ratio_rejects_degenerate_and_mismatched_inputs() {
        let flat = RunningStats::from_slice(&[2.0, 2.0]);
        let kids = [RunningStats::from_slice(&[2.0]), RunningStats::from_slice(&[2.0])];
        assert!(matches!(pooled_f_ratio(&kids, &flat), Err(StatsError::DegenerateVariance(_))));
        let overall = RunningStats::from_slice(&[1.0, 2.0, 3.0]);
        assert!(matches!(pooled_f_ratio(&kids, &overall), Err(StatsError::Domain(_))));
        assert!(pooled_f_ratio(&[], &RunningStats::new()).is_err());
    }

    #[test]
    fn p_value_edges() {
        assert_eq!(f_test_p_value(0.0, 3, 4).unwrap(), 0.0);
        assert_eq!(f_test_p_value(f64::INFINITY, 3, 4).unwrap(), 1.0);
        for k in [1, 2, 5, 30, 100, 1000] {
            assert!((f_test_p_value(1.0, k, k).unwrap() - 0.5).abs() < 1e-12, "k={k}");
        }
        assert!(f_test_p_value(-0.1, 1, 1).is_err());
        assert!(f_test_p_value(1.0, 0, 1).is_err());
        assert!(f_test_p_value(1.0, 1, 0).is_err());
    }

    // Frozen from a 60-digit mpmath evaluation of I_x(d1/2, d2/2) via 2F1.
    const REFERENCE: &[(f64, u64, u64, f64)] = &[
        (0.5, 10, 20, 0.1298396258304),
        (1.0, 3, 7, 0.5529203865315164405),
        (1.2, 5, 5, 0.5768475607898793096),
        (0.01, 2, 3, 0.009917309989096219265),
        (10.0, 6, 8, 0.9976408560447823060),
        (0.2, 1, 1, 0.2677204728012300173),
        (2.5, 4, 12, 0.9018381888268953970),
        (3.0, 2, 50, 0.9411766934477462636),
        (0.9, 98, 99, 0.3011846055898521275),
        (0.97, 1997, 1999, 0.2480495448452131506),
        (0.95, 1998, 1999, 0.1258333931181568467),
        (0.99, 99997, 99999, 0.05602180150689986708),
        (0.985, 99998, 99999, 0.008432432447604939250),
    ];

    #[test]
    fn p_value_matches_high_precision_reference() {
        for &(f, d1, d2, want) in REFERENCE {
            let got = f_test_p_value(f, d1, d2).unwrap();
            assert!((got - want).abs() <= 1e-8, "F({d1},{d2}) at {f}: {got} vs {want}");
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        // ln(10!) = ln(3628800)
        assert!((ln_gamma(11.0) - 3628800f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn incremental_matches_batch(xs in prop::collection::vec(-1e3f64..1e3, 1..500)) {
            let s = RunningStats::from_slice(&xs);
            let (n, mean, j) = batch(&xs);
            prop_assert_eq!(s.n, n);
            prop_assert!((s.mean - mean).abs() <= 1e-9 * mean.abs().max(1.0));
            prop_assert!((s.j - j).abs() <= 1e-9 * j.max(1.0));
            prop_assert!(s.j >= 0.0);
        }

        #[test]
        fn permutation_invariant(mut xs in prop::collection::vec(-50f64..50.0, 2..200)) {
            let a = RunningStats::from_slice(&xs);
            xs.reverse();
            let b = RunningStats::from_slice(&xs);
            prop_assert_eq!(a.n, b.n);
            prop_assert!((a.mean - b.mean).abs() <= 1e-9 * a.mean.abs().max(1.0));
            prop_assert!((a.j - b.j).abs() <= 1e-9 * a.j.max(1.0));
        }

        #[test]
        fn p_value_monotone_in_f(f1 in 0.0f64..5.0, f2 in 0.0f64..5.0, d1 in 1u64..200, d2 in 1u64..200) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let pl = f_test_p_value(lo, d1, d2).unwrap();
            let ph = f_test_p_value(hi, d1, d2).unwrap();
            prop_assert!(pl <= ph + 1e-12);
            prop_assert!((0.0..=1.0).contains(&pl));
        }
    }
}
