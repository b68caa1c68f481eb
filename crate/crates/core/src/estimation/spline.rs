//! Clamped B-splines of arbitrary degree on a uniform interior knot grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    pub degree: usize,
    pub knots: Vec<f64>,
}

impl BSplineBasis {
    /// Clamped knot vector over `[lo, hi]` with `intervals` equal pieces.
    pub fn clamped(lo: f64, hi: f64, intervals: usize, degree: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || intervals == 0 {
            return Err(Error::InvalidInput(format!("bad spline range [{lo}, {hi}]")));
        }
        let mut knots = vec![lo; degree];
        for i in 0..=intervals {
            knots.push(lo + (hi - lo) * i as f64 / intervals as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree));
        Ok(Self { degree, knots })
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 * self.degree + 2 {
            return Err(Error::InvalidInput("too few knots for the spline degree".into()));
        }
        if self.knots.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::InvalidInput("knots must be non-decreasing and finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.knots.len() - self.degree - 1])
    }

    /// Index `s` of the knot span `[t_s, t_{s+1})` containing `x`, clamped to the range.
    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.len();
        if x >= self.knots[n] {
            return n - 1;
        }
        if x <= self.knots[p] {
            return p;
        }
        // Last index with knots[i] <= x.
        let i = self.knots.partition_point(|&t| t <= x) - 1;
        i.clamp(p, n - 1)
    }

    /// Non-zero basis values at `x` (and their first derivatives), starting at index `span - degree`.
    pub fn eval(&self, x: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let p = self.degree;
        let t = &self.knots;
        let s = self.span(x);
        // Triangular table of lower-degree basis functions, de Boor style.
        let mut table = vec![vec![0.0; p + 1]; p + 1];
        table[0][0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for d in 1..=p {
            left[d] = x - t[s + 1 - d];
            right[d] = t[s + d] - x;
            let mut saved = 0.0;
            for r in 0..d {
                let denom = right[r + 1] + left[d - r];
                let tmp = if denom != 0.0 { table[d - 1][r] / denom } else { 0.0 };
                table[d][r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            table[d][d] = saved;
        }
        let values = table[p].clone();
        let mut derivs = vec![0.0; p + 1];
        if p > 0 {
            // N'_{i,p} = p (N_{i,p-1}/(t_{i+p}-t_i) - N_{i+1,p-1}/(t_{i+p+1}-t_{i+1})).
            let lower = &table[p - 1];
            for (r, d) in derivs.iter_mut().enumerate() {
                let i = s - p + r;
                let a = if r >= 1 {
                    let den = t[i + p] - t[i];
                    if den != 0.0 { lower[r - 1] / den } else { 0.0 }
                } else {
                    0.0
                };
                let b = if r < p {
                    let den = t[i + p + 1] - t[i + 1];
                    if den != 0.0 { lower[r] / den } else { 0.0 }
                } else {
                    0.0
                };
                *d = p as f64 * (a - b);
            }
        }
        (s - p, values, derivs)
    }

    /// Spline value and slope for the given coefficients.
    pub fn evaluate(&self, coefficients: &[f64], x: f64) -> (f64, f64) {
        let (first, values, derivs) = self.eval(x);
        let mut v = 0.0;
        let mut d = 0.0;
        for (k, (b, db)) in values.iter().zip(&derivs).enumerate() {
            v += coefficients[first + k] * b;
            d += coefficients[first + k] * db;
        }
        (v, d)
    }

    /// Dense design matrix of basis values at `xs`.
    pub fn design(&self, xs: &[f64]) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(xs.len(), self.len());
        for (row, &x) in xs.iter().enumerate() {
            let (first, values, _) = self.eval(x);
            for (k, v) in values.into_iter().enumerate() {
                a[(row, first + k)] = v;
            }
        }
        a
    }

    /// Ordinary least-squares coefficients for each column of `ys`.
    pub fn fit(&self, xs: &[f64], ys: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.len() < self.len() {
            return Err(Error::InsufficientData(format!(
                "{} points cannot determine {} spline coefficients",
                xs.len(),
                self.len()
            )));
        }
        let a = self.design(xs);
        let svd = a.svd(true, true);
        let smallest = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        let largest = svd.singular_values.iter().copied().fold(0.0, f64::max);
        if !(smallest > 1e-10 * largest) {
            return Err(Error::InsufficientData(
                "calibration points leave spline coefficients undetermined".into(),
            ));
        }
        ys.iter()
            .map(|y| {
                let b = DVector::from_column_slice(y);
                svd.solve(&b, 0.0)
                    .map(|c| c.iter().copied().collect())
                    .map_err(|e| Error::Estimation(format!("spline solve failed: {e}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn partition_of_unity_and_zero_slope_sum() {
        let b = BSplineBasis::clamped(-0.2, 0.2, 20, 3).unwrap();
        assert_eq!(b.len(), 23);
        for i in 0..=400 {
            let x = -0.2 + 0.4 * i as f64 / 400.0;
            let (_, v, d) = b.eval(x);
            assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-13);
            assert_abs_diff_eq!(d.iter().sum::<f64>(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn reproduces_cubics_and_their_slopes() {
        let b = BSplineBasis::clamped(-1.0, 1.0, 5, 3).unwrap();
        let xs: Vec<f64> = (0..40).map(|i| -1.0 + 2.0 * i as f64 / 39.0).collect();
        let f = |x: f64| 0.3 - x + 2.0 * x * x - 0.5 * x * x * x;
        let df = |x: f64| -1.0 + 4.0 * x - 1.5 * x * x;
        let coef = b.fit(&xs, &[xs.iter().map(|&x| f(x)).collect()]).unwrap();
        for x in [-0.93, -0.2, 0.0, 0.41, 0.999] {
            let (v, d) = b.evaluate(&coef[0], x);
            assert_abs_diff_eq!(v, f(x), epsilon = 1e-10);
            assert_abs_diff_eq!(d, df(x), epsilon = 1e-8);
        }
    }

    #[test]
    fn too_few_points() {
        let b = BSplineBasis::clamped(-0.2, 0.2, 20, 3).unwrap();
        assert!(matches!(
            b.fit(&[0.0, 0.1], &[vec![0.0, 1.0]]),
            Err(Error::InsufficientData(_))
        ));
    }
}
