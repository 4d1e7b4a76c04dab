//! Paired two-sided t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// Every difference is zero.
    AllZero,
    /// Differences are constant and nonzero.
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
    pub significant_at_05: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<Degenerate>,
}

/// Differences whose standard deviation is below this fraction of their largest magnitude
/// count as constant; it absorbs rounding in differences such as `0.4 - 0.3` vs `0.3 - 0.2`.
const ZERO_SPREAD: f64 = 1e-12;

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(0.5 * df, 0.5, df / (df + t * t))
}

/// Tests whether the mean of `a - b` differs from zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("paired series differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Domain(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("paired t-test inputs must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let result = |t: f64, p: f64, degenerate| TTest {
        t,
        p,
        df,
        mean_difference: mean,
        significant_at_05: p < 0.05,
        degenerate,
    };
    if d.iter().all(|&x| x == 0.0) {
        return Ok(result(0.0, 1.0, Some(Degenerate::AllZero)));
    }
    let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if var.sqrt() <= ZERO_SPREAD * scale {
        return Ok(result(f64::INFINITY.copysign(mean), 0.0, Some(Degenerate::ZeroVariance)));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(result(t, student_t_two_sided(t, df as f64), None))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-sided tail by Simpson integration of the Student-t density over `[|t|, ∞)`,
    /// substituting `x = |t| + u / (1 - u)`.
    fn tail_by_quadrature(t: f64, df: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma(0.5 * (df + 1.0))
            - statrs::function::gamma::ln_gamma(0.5 * df)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let density = |x: f64| (ln_c - 0.5 * (df + 1.0) * (1.0 + x * x / df).ln()).exp();
        let f = |u: f64| {
            if u >= 1.0 {
                // limit of density(x)·x² as x → ∞; nonzero only for the Cauchy case
                return if df == 1.0 { ln_c.exp() } else { 0.0 };
            }
            let x = t.abs() + u / (1.0 - u);
            density(x) / (1.0 - u).powi(2)
        };
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for k in 1..n {
            s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        2.0 * s * h / 3.0
    }

    #[test]
    fn worked_example() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0; 4];
        let r = paired_t_test(&a, &b).unwrap();
        // mean 2.5, sd sqrt(5/3)
        let t = 2.5 / ((5.0f64 / 3.0).sqrt() / 2.0);
        assert!((r.t - t).abs() < 1e-12);
        assert!((r.t - 3.873).abs() < 1e-3);
        assert!((r.p - 0.0305).abs() < 1e-3, "{}", r.p);
        assert!(r.significant_at_05);
        assert_eq!(r.df, 3);
    }

    #[test]
    fn incomplete_beta_route_matches_quadrature() {
        for &(t, df) in &[(3.8729833462, 3.0), (0.5, 1.0), (1.2, 5.0), (-2.1, 10.0), (4.0, 29.0), (0.0, 7.0)] {
            let p = student_t_two_sided(t, df);
            let q = tail_by_quadrature(t, df);
            assert!((p - q).abs() < 1e-9, "t={t} df={df}: {p} vs {q}");
        }
    }

    #[test]
    fn degenerate_inputs() {
        let a = [0.3, 0.4, 0.5];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p, r.degenerate), (0.0, 1.0, Some(Degenerate::AllZero)));
        assert!(!r.significant_at_05);
        let b = [0.2, 0.3, 0.4];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.degenerate, Some(Degenerate::ZeroVariance));
        assert_eq!(r.p, 0.0);
        assert!(r.t > 0.0 && r.t.is_infinite());
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn significance_follows_threshold() {
        let b = [0.0; 6];
        for scale in [0.01, 0.1, 0.5, 1.0, 3.0] {
            let a: Vec<f64> = [0.3, -0.1, 0.5, 0.2, 0.4, 0.1].iter().map(|x| x + scale * 0.1).collect();
            let r = paired_t_test(&a, &b).unwrap();
            assert_eq!(r.significant_at_05, r.p < 0.05);
            assert!((0.0..=1.0).contains(&r.p));
        }
    }
}
