//! Small numeric helpers shared across modules: medians, empirical
//! quantiles, and distribution functions.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

/// Median of an unsorted slice (average of the two middle order statistics
/// for even lengths). Returns None on empty input.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Some(median_sorted(&v))
}

pub fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Empirical quantile by linear interpolation of the empirical distribution
/// function: at h = n*p the quantile is the h-th order statistic, and
/// between integer h values it interpolates linearly (R's type 4).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let n = sorted.len();
    let h = n as f64 * p;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lo = h.floor() as usize; // 1-based order statistic index
    let frac = h - lo as f64;
    let a = sorted[lo - 1];
    let b = sorted[lo];
    a + frac * (b - a)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n-1 denominator).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    debug_assert!(n >= 2);
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("valid t distribution")
        .inverse_cdf(p)
}

pub fn chi_squared_sf(x: f64, dof: f64) -> f64 {
    1.0 - ChiSquared::new(dof).expect("valid chi-squared").cdf(x)
}

/// Survival function of the Kolmogorov distribution,
/// Q(lambda) = 2 * sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_both_parities() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn quantile_hits_mass_point() {
        // 5 of 100 observations sit at -0.10: the 5% quantile is exactly there.
        let mut xs = vec![-0.10f64; 5];
        xs.extend(vec![0.01; 95]);
        xs.sort_by(|a, b| a.total_cmp(b));
        assert_eq!(quantile_sorted(&xs, 0.05), -0.10);
    }

    #[test]
    fn quantile_interpolates_between_order_stats() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        // h = 4*0.375 = 1.5: halfway between the 1st and 2nd order statistic.
        assert!((quantile_sorted(&xs, 0.375) - 1.5).abs() < 1e-12);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
    }

    #[test]
    fn kolmogorov_sf_known_values() {
        // Q(0.828) is approximately 0.5 (the distribution's median).
        assert!((kolmogorov_sf(0.8275) - 0.5).abs() < 1e-3);
        assert!(kolmogorov_sf(0.0) == 1.0);
        assert!(kolmogorov_sf(3.0) < 1e-7);
    }

    #[test]
    fn t_quantile_matches_normal_for_large_dof() {
        let t = student_t_quantile(0.975, 1e6);
        assert!((t - 1.959964).abs() < 1e-3);
    }
}
