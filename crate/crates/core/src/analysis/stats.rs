//! One-way ANOVA over timing samples, with the F-distribution tail computed
//! through the regularized incomplete beta function.

use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Significance level for the `significant` flag.
pub const ALPHA: f64 = 0.05;

/// One-way ANOVA result over two or more duration groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingComparison {
    /// Per-group sample means, in input order (nanoseconds).
    pub means_ns: Vec<f64>,
    /// (last group mean - first group mean) / first group mean * 100.
    pub pct_diff: f64,
    pub f_stat: f64,
    pub p_value: f64,
    /// True iff `p_value < ALPHA`.
    pub significant: bool,
}

/// Standard one-way ANOVA. Requires at least two groups of at least two
/// samples each, with nonzero pooled within-group variance.
pub fn anova(groups: &[Vec<f64>]) -> Result<TimingComparison, AnalysisError> {
    if groups.len() < 2 {
        return Err(AnalysisError::degenerate(format!(
            "need at least 2 groups, got {}",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(AnalysisError::degenerate(format!(
            "every group needs at least 2 samples, got one with {}",
            g.len()
        )));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand: f64 = groups.iter().flatten().sum::<f64>() / n as f64;
    let means: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let ssb: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.len() as f64 * (m - grand).powi(2))
        .sum();
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|x| (x - m).powi(2)).sum::<f64>())
        .sum();
    if ssw == 0.0 {
        return Err(AnalysisError::degenerate(
            "zero within-group variance: all samples in every group are identical",
        ));
    }
    let df_b = (groups.len() - 1) as f64;
    let df_w = (n - groups.len()) as f64;
    let f_stat = ((ssb / df_b) / (ssw / df_w)).max(0.0);
    let p_value = f_tail(f_stat, df_b, df_w);
    Ok(TimingComparison {
        pct_diff: (means[means.len() - 1] - means[0]) / means[0] * 100.0,
        means_ns: means,
        f_stat,
        p_value,
        significant: p_value < ALPHA,
    })
}

/// Mean-latency change from `a` to `b` as a percentage, pooling every timed
/// sample in each block. Requires a positive baseline mean.
pub fn timing_pct_diff(
    a: &crate::exec::TimingBlock,
    b: &crate::exec::TimingBlock,
) -> f64 {
    let mean = |t: &crate::exec::TimingBlock| {
        let samples: Vec<u64> = t.samples.values().flatten().copied().collect();
        samples.iter().sum::<u64>() as f64 / samples.len().max(1) as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    assert!(ma > 0.0, "baseline timing block has no positive mean");
    (mb - ma) / ma * 100.0
}

/// P(F > f) for an F-distribution with (d1, d2) degrees of freedom.
fn f_tail(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// Regularized incomplete beta function I_x(a, b), continued-fraction
/// evaluation with the symmetry split at x = (a+1)/(a+b+2).
pub(crate) fn betainc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
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

/// Lanczos approximation of ln Γ(x) for x > 0, accurate to ~2e-10.
fn ln_gamma(x: f64) -> f64 {
    const COF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        1.208650973866179e-3,
        -5.395239384953e-6,
    ];
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    let mut y = x;
    for c in COF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::TimingBlock;

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1u64..=10 {
            let fact: u64 = (1..n).product::<u64>().max(1);
            let err = (ln_gamma(n as f64) - (fact as f64).ln()).abs();
            assert!(err < 1e-9, "ln_gamma({n}) off by {err}");
        }
        let half = ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln();
        assert!(half.abs() < 1e-9);
    }

    #[test]
    fn betainc_closed_forms() {
        for &(a, x) in &[(1.0, 0.3), (2.0, 0.5), (3.0, 0.8)] {
            let expected = 1.0 - (1.0 - x as f64).powf(a);
            assert!((betainc(1.0, a, x) - expected).abs() < 1e-12);
            assert!((betainc(a, 1.0, x) - (x as f64).powf(a)).abs() < 1e-12);
        }
        assert_eq!(betainc(2.5, 3.5, 0.0), 0.0);
        assert_eq!(betainc(2.5, 3.5, 1.0), 1.0);
        let sym = betainc(2.5, 3.5, 0.4) + betainc(3.5, 2.5, 0.6);
        assert!((sym - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anova_known_case_is_exact() {
        let r = anova(&[vec![1.0, 2.0], vec![3.0, 4.0]]).expect("valid groups");
        assert_eq!(r.f_stat, 8.0);
        assert!((r.p_value - 0.1056).abs() < 1e-3);
        assert!(!r.significant);
        assert_eq!(r.means_ns, vec![1.5, 3.5]);
        assert!((r.pct_diff - 133.333333).abs() < 1e-4);
    }

    #[test]
    fn anova_matches_reference_oracle_table() {
        // (groups, F, p) triples frozen from an independent statistics
        // package.
        let table: [(&[&[f64]], f64, f64); 4] = [
            (
                &[&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]],
                1.5,
                0.2878641347266907,
            ),
            (
                &[&[10.0, 12.0, 11.0], &[15.0, 14.0, 16.0], &[20.0, 19.0, 21.0]],
                61.0,
                0.000102996826171875,
            ),
            (
                &[&[5.0, 5.1, 4.9, 5.2], &[5.0, 5.05, 4.95, 5.1]],
                0.12000000000000162,
                0.7408593546917006,
            ),
            (
                &[
                    &[100.0, 110.0],
                    &[105.0, 115.0],
                    &[95.0, 108.0],
                    &[120.0, 118.0],
                ],
                2.4763181411974977,
                0.2008162897408083,
            ),
        ];
        for (groups, f, p) in table {
            let groups: Vec<Vec<f64>> = groups.iter().map(|g| g.to_vec()).collect();
            let r = anova(&groups).expect("valid groups");
            assert!((r.f_stat - f).abs() < 1e-9, "F {} vs {f}", r.f_stat);
            assert!((r.p_value - p).abs() < 1e-9, "p {} vs {p}", r.p_value);
        }
    }

    #[test]
    fn anova_identical_groups_yield_zero_f() {
        let r = anova(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).expect("valid groups");
        assert_eq!(r.f_stat, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant);
    }

    #[test]
    fn anova_is_scale_invariant() {
        let groups = vec![vec![3.0, 5.0, 4.0], vec![9.0, 7.0, 8.0]];
        let base = anova(&groups).expect("valid");
        for scale in [0.001, 2.0, 1e6] {
            let scaled: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| g.iter().map(|x| x * scale).collect())
                .collect();
            let r = anova(&scaled).expect("valid");
            assert!((r.f_stat - base.f_stat).abs() < 1e-9 * base.f_stat.max(1.0));
            assert!((r.p_value - base.p_value).abs() < 1e-9);
        }
    }

    #[test]
    fn anova_rejects_degenerate_inputs() {
        assert!(matches!(
            anova(&[vec![1.0, 2.0]]),
            Err(AnalysisError::DegenerateGroups { .. })
        ));
        assert!(matches!(
            anova(&[vec![1.0, 2.0], vec![3.0]]),
            Err(AnalysisError::DegenerateGroups { .. })
        ));
        assert!(matches!(
            anova(&[vec![2.0, 2.0], vec![5.0, 5.0]]),
            Err(AnalysisError::DegenerateGroups { .. })
        ));
    }

    fn block(samples: &[(&str, &[u64])]) -> TimingBlock {
        TimingBlock {
            repeats: samples.first().map(|(_, s)| s.len()).unwrap_or(0),
            warmup: 1,
            cold_ns: Default::default(),
            samples: samples
                .iter()
                .map(|(id, s)| (id.to_string(), s.to_vec()))
                .collect(),
            layer_ns: Default::default(),
        }
    }

    #[test]
    fn pct_diff_matches_hand_values() {
        let a = block(&[("i0", &[100, 100]), ("i1", &[100, 100])]);
        let b = block(&[("i0", &[181, 181]), ("i1", &[181, 181])]);
        assert_eq!(timing_pct_diff(&a, &b), 81.0);
        assert_eq!(timing_pct_diff(&a, &a), 0.0);
        let faster = block(&[("i0", &[50, 50]), ("i1", &[50, 50])]);
        assert_eq!(timing_pct_diff(&a, &faster), -50.0);
    }
}
