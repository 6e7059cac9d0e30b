//! Small descriptive and rank statistics used by the analysis harnesses.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Sample (`n − 1`) standard deviation; 0 for fewer than two values.
pub fn sample_std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Excess kurtosis `m4 / m2² − 3`; 0 for a constant input.
pub fn excess_kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = mean(values);
    let (m2, m4) = values.iter().fold((0.0, 0.0), |(a, b), v| {
        let d = (v - m).powi(2);
        (a + d, b + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 == 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

/// Outcome of a one-sided Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedRankTest {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub z: f64,
    /// `P(W⁺ ≥ observed)` under the null, normal approximation with tie and
    /// continuity corrections.
    pub p_value: f64,
    /// Pairs with a non-zero difference.
    pub n: usize,
}

/// Tests whether `x` tends to exceed `y` in paired samples.
pub fn wilcoxon_signed_rank_greater(x: &[f64], y: &[f64]) -> SignedRankTest {
    assert_eq!(x.len(), y.len(), "paired samples must have equal length");
    let mut diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = diffs.len();
    if n == 0 {
        return SignedRankTest {
            w_plus: 0.0,
            z: 0.0,
            p_value: 1.0,
            n,
        };
    }
    let mut w_plus = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for d in &diffs[i..=j] {
            if *d > 0.0 {
                w_plus += rank;
            }
        }
        i = j + 1;
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = if var > 0.0 {
        (w_plus - mean - 0.5) / var.sqrt()
    } else {
        0.0
    };
    let normal = Normal::standard();
    SignedRankTest {
        w_plus,
        z,
        p_value: 1.0 - normal.cdf(z),
        n,
    }
}

/// Least-squares line `y = slope·x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kurtosis_of_two_point_distribution() {
        // symmetric ±1: m4/m2² = 1
        assert!((excess_kurtosis(&[1.0, -1.0, 1.0, -1.0]) + 2.0).abs() < 1e-12);
        assert_eq!(excess_kurtosis(&[3.0; 5]), 0.0);
        // one spike among zeros is heavy-tailed
        let mut spike = vec![0.0; 99];
        spike.push(1.0);
        assert!(excess_kurtosis(&spike) > 90.0);
    }

    #[test]
    fn signed_rank_detects_consistent_shift() {
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let x: Vec<f64> = y.iter().map(|v| v + 1.0 + (v * 0.1).sin()).collect();
        let t = wilcoxon_signed_rank_greater(&x, &y);
        assert_eq!(t.w_plus, 465.0);
        assert!(t.p_value < 1e-5);
        let reverse = wilcoxon_signed_rank_greater(&y, &x);
        assert!(reverse.p_value > 0.99);
    }

    #[test]
    fn signed_rank_small_exact_statistic() {
        // diffs 1, -2, 3 → ranks 1, 2, 3 → W+ = 4
        let t = wilcoxon_signed_rank_greater(&[1.0, 0.0, 3.0], &[0.0, 2.0, 0.0]);
        assert_eq!(t.w_plus, 4.0);
        assert_eq!(t.n, 3);
    }

    #[test]
    fn line_fit_recovers_slope() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let (s, c) = linear_fit(&xs, &ys);
        assert!((s - 2.0).abs() < 1e-12 && (c + 1.0).abs() < 1e-12);
    }
}
