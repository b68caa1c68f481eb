//! Small numerical helpers shared across modules.

/// Compensated (Neumaier) summation.
pub(crate) fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `log Σ exp(x_i)`, returning `-inf` for an empty or all `-inf` input.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + neumaier_sum(values.iter().map(|v| (v - max).exp())).ln()
}

/// Mean and unbiased sample variance.
pub(crate) fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = neumaier_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = neumaier_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1.0);
    (mean, var)
}

/// Ordinary least-squares slope and intercept of `y` on `x`.
pub(crate) fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier_sum(x.iter().map(|a| (a - mx).powi(2)));
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(v), 2.0);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn fits() {
        let (m, v) = mean_var(&[1.0, 2.0, 3.0]);
        assert_eq!((m, v), (2.0, 1.0));
        let (s, c) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((s - 2.0).abs() < 1e-14 && (c - 1.0).abs() < 1e-14);
    }
}
