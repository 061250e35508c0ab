//! Summary statistics and the paired t-test used by the benchmark reports.
//!
//! The Student-t tail probability is computed from the regularized incomplete
//! beta function (continued-fraction form), implemented here directly; the tests
//! pin it against published t-table quantiles and a high-precision evaluation.

use crate::{Error, Result};

/// Mean and standard error (sample standard deviation over √n, n−1 in the
/// denominator). A single observation has standard error 0 by convention.
pub fn mean_stderr(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Stats("mean_stderr of an empty sample".into()));
    }
    let n = xs.len() as f64;
    // Welford's online update: numerically stable single pass.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i as f64 + 1.0);
        m2 += delta * (x - mean);
    }
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = m2 / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tail {
    /// H1: mean(a − b) > 0.
    Greater,
    /// H1: mean(a − b) < 0.
    Less,
    /// H1: mean(a − b) ≠ 0.
    TwoSided,
}

#[derive(Clone, Copy, Debug)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired t-test on equal-length samples. Errors on fewer than two pairs and on
/// zero-variance differences (the statistic is then undefined; callers that want
/// "no change at all" to count as insignificant must special-case it).
pub fn paired_t(a: &[f64], b: &[f64], tail: Tail) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "paired_t: sample sizes differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Stats("paired_t needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|&d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::Stats(
            "paired_t: zero-variance differences, statistic undefined".into(),
        ));
    }
    let t = mean / (var / n).sqrt();
    let df = diffs.len() - 1;
    let p = match tail {
        Tail::Greater => t_sf(t, df as f64),
        Tail::Less => t_sf(-t, df as f64),
        Tail::TwoSided => 2.0 * t_sf(t.abs(), df as f64),
    };
    Ok(TTest { t, df, p })
}

/// Per-comparison significance level after a Bonferroni correction.
pub fn bonferroni(alpha: f64, comparisons: usize) -> f64 {
    assert!(comparisons > 0);
    alpha / comparisons as f64
}

/// P(T_df > t): upper tail of the Student t distribution.
pub fn t_sf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let half = 0.5 * reg_inc_beta(0.5 * df, 0.5, x);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

/// P(T_df ≤ t).
pub fn t_cdf(t: f64, df: f64) -> f64 {
    1.0 - t_sf(t, df)
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction,
/// using the symmetry I_x(a,b) = 1 − I_{1−x}(b,a) where the fraction converges
/// faster.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x must be in [0,1], got {x}");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - (front * beta_cf(b, a, 1.0 - x) / b)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 coefficients), ~1e-15 relative accuracy for
/// the positive arguments used here.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_stderr_worked_example() {
        let (m, se) = mean_stderr(&[0.0, 2.0]).unwrap();
        assert_eq!(m, 1.0);
        assert!((se - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mean_stderr_edge_cases() {
        assert!(mean_stderr(&[]).is_err());
        let (m, se) = mean_stderr(&[3.5]).unwrap();
        assert_eq!((m, se), (3.5, 0.0));
    }

    #[test]
    fn mean_stderr_matches_two_pass_reference() {
        let mut rng = crate::rng::Rng::new(8);
        let xs: Vec<f64> = (0..500).map(|_| rng.normal() * 3.0 + 1.0).collect();
        let (m, se) = mean_stderr(&xs).unwrap();

        let n = xs.len() as f64;
        let ref_mean = xs.iter().sum::<f64>() / n;
        let ref_var = xs.iter().map(|&x| (x - ref_mean) * (x - ref_mean)).sum::<f64>() / (n - 1.0);
        let ref_se = (ref_var / n).sqrt();
        assert!((m - ref_mean).abs() < 1e-12, "{m} vs {ref_mean}");
        assert!((se - ref_se).abs() < 1e-12, "{se} vs {ref_se}");
    }

    #[test]
    fn paired_t_worked_example() {
        // differences {1,2,3,4,5}: t = 3√2 ≈ 4.2426, df = 4, one-tailed p ≈ 0.0066178
        let a = [2.0, 4.0, 6.0, 8.0, 10.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t(&a, &b, Tail::Greater).unwrap();
        assert!((r.t - 3.0 * 2.0f64.sqrt()).abs() < 1e-12, "t = {}", r.t);
        assert_eq!(r.df, 4);
        // value fixed by a 40-digit evaluation of the same tail integral
        assert!((r.p - 0.006617799781841345).abs() < 1e-12, "p = {}", r.p);
        // and the opposite tail is its complement
        let l = paired_t(&a, &b, Tail::Less).unwrap();
        assert!((l.p - (1.0 - r.p)).abs() < 1e-12);
        let two = paired_t(&a, &b, Tail::TwoSided).unwrap();
        assert!((two.p - 2.0 * r.p).abs() < 1e-12);
    }

    #[test]
    fn paired_t_zero_variance_is_degenerate() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 1.0, 2.0]; // all differences exactly 1
        assert!(paired_t(&a, &b, Tail::Greater).is_err());
    }

    #[test]
    fn paired_t_input_validation() {
        assert!(paired_t(&[1.0], &[2.0], Tail::Greater).is_err());
        assert!(paired_t(&[1.0, 2.0], &[1.0], Tail::Greater).is_err());
    }

    #[test]
    fn t_cdf_matches_published_tables() {
        // (df, quantile, cumulative probability) rows from standard t tables
        let rows = [
            (1.0, 6.3138, 0.95),
            (2.0, 4.3027, 0.975),
            (5.0, 2.0150, 0.95),
            (10.0, 1.8125, 0.95),
            (30.0, 1.6973, 0.95),
        ];
        for (df, q, p) in rows {
            let got = t_cdf(q, df);
            assert!((got - p).abs() < 1e-4, "df={df}, q={q}: {got} vs {p}");
        }
    }

    #[test]
    fn t_distribution_symmetry() {
        for &t in &[0.0, 0.5, 1.3, 2.7] {
            for &df in &[1.0, 4.0, 17.0] {
                let s = t_sf(t, df) + t_sf(-t, df);
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bonferroni_divides() {
        assert_eq!(bonferroni(0.05, 2), 0.025);
        assert_eq!(bonferroni(0.05, 24), 0.05 / 24.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        // Γ(1)=1, Γ(2)=1, Γ(5)=24, Γ(0.5)=√π
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!(ln_gamma(2.0).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn inc_beta_complement(a in 0.5f64..20.0, b in 0.5f64..20.0, x in 0.001f64..0.999) {
            let lhs = reg_inc_beta(a, b, x);
            let rhs = 1.0 - reg_inc_beta(b, a, 1.0 - x);
            prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
        }

        #[test]
        fn inc_beta_monotone_in_x(a in 0.5f64..10.0, b in 0.5f64..10.0,
                                  x1 in 0.01f64..0.98) {
            let x2 = x1 + 0.01;
            prop_assert!(reg_inc_beta(a, b, x1) <= reg_inc_beta(a, b, x2) + 1e-12);
        }
    }
}
