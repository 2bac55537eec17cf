//! Clamped uniform cubic B-splines on [0, 1].

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

const DEGREE: usize = 3;

/// Clamped (open) uniform cubic B-spline basis on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CubicBasis {
    len: usize,
    knots: Vec<f64>,
}

impl CubicBasis {
    /// Basis with `len` functions, `len >= 4`.
    pub fn new(len: usize) -> Result<Self> {
        if len < DEGREE + 1 {
            return Err(invalid(format!(
                "a cubic basis needs at least 4 functions, got {len}"
            )));
        }
        let spans = len - DEGREE;
        let mut knots = Vec::with_capacity(len + DEGREE + 1);
        knots.extend(std::iter::repeat_n(0.0, DEGREE + 1));
        for i in 1..spans {
            knots.push(i as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, DEGREE + 1));
        Ok(Self { len, knots })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Greville abscissae, one per basis function.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.len)
            .map(|i| (self.knots[i + 1] + self.knots[i + 2] + self.knots[i + 3]) / 3.0)
            .collect()
    }

    fn span(&self, x: f64) -> usize {
        let last = self.len - 1;
        if x >= 1.0 {
            return last;
        }
        // knots[DEGREE..=len] is increasing; find s with knots[s] <= x < knots[s+1]
        let interior = &self.knots[DEGREE..=self.len];
        let pos = interior.partition_point(|&k| k <= x);
        (DEGREE + pos - 1).min(last)
    }

    /// Index of the first nonzero basis function at `x` and the four values.
    pub fn nonzero(&self, x: f64) -> Result<(usize, [f64; 4])> {
        check_coordinate(x)?;
        let s = self.span(x);
        let t = &self.knots;
        let mut n = [0.0; 4];
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((s - DEGREE, n))
    }

    /// Value of basis function `k` at `x`.
    pub fn value(&self, k: usize, x: f64) -> Result<f64> {
        let (first, vals) = self.nonzero(x)?;
        Ok(if k >= first && k < first + 4 {
            vals[k - first]
        } else {
            0.0
        })
    }

    /// Rows index points, columns index basis functions.
    pub fn matrix(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(points.len(), self.len);
        for (row, &x) in points.iter().enumerate() {
            let (first, vals) = self.nonzero(x)?;
            for (j, v) in vals.iter().enumerate() {
                m[(row, first + j)] = *v;
            }
        }
        Ok(m)
    }
}

fn check_coordinate(x: f64) -> Result<()> {
    if !x.is_finite() || !(0.0..=1.0).contains(&x) {
        return Err(invalid(format!("coordinate {x} is outside [0, 1]")));
    }
    Ok(())
}

/// A spatial function `sum_i c_i B_i(x)` on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SplineField {
    basis: CubicBasis,
    coefficients: Vec<f64>,
}

impl SplineField {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if let Some(c) = coefficients.iter().find(|c| !c.is_finite()) {
            return Err(invalid(format!("non-finite spline coefficient {c}")));
        }
        let basis = CubicBasis::new(coefficients.len())?;
        Ok(Self {
            basis,
            coefficients,
        })
    }

    pub fn constant(len: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; len])
    }

    /// Coefficients set to `f` at the Greville abscissae; reproduces linear `f` exactly.
    pub fn from_greville(len: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let basis = CubicBasis::new(len)?;
        let coefficients = basis.greville().into_iter().map(f).collect();
        Self::new(coefficients)
    }

    pub fn basis(&self) -> &CubicBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn with_coefficients(&self, coefficients: &[f64]) -> Result<Self> {
        if coefficients.len() != self.len() {
            return Err(invalid(format!(
                "expected {} coefficients, got {}",
                self.len(),
                coefficients.len()
            )));
        }
        Self::new(coefficients.to_vec())
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let (first, vals) = self.basis.nonzero(x)?;
        Ok(vals
            .iter()
            .zip(&self.coefficients[first..first + 4])
            .map(|(b, c)| b * c)
            .sum())
    }

    pub fn eval_many(&self, points: &[f64]) -> Result<Vec<f64>> {
        points.iter().map(|&x| self.eval(x)).collect()
    }

    pub fn basis_matrix(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        self.basis.matrix(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_coefficients_reproduce_constant() {
        let s = SplineField::constant(20, 1.7).unwrap();
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            assert!((s.eval(x).unwrap() - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn greville_coefficients_reproduce_linear() {
        let s = SplineField::from_greville(20, |x| 3.0 * x - 0.5).unwrap();
        for i in 0..=200 {
            let x = i as f64 / 200.0;
            assert!((s.eval(x).unwrap() - (3.0 * x - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_coefficient_is_bounded() {
        let mut c = vec![0.0; 12];
        c[5] = 2.5;
        let s = SplineField::new(c).unwrap();
        for i in 0..=300 {
            let v = s.eval(i as f64 / 300.0).unwrap();
            assert!((0.0..=2.5).contains(&v));
        }
    }

    #[test]
    fn endpoint_rows() {
        let b = CubicBasis::new(8).unwrap();
        let m = b.matrix(&[0.0, 1.0]).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert!(m.row(0).iter().skip(1).all(|&v| v == 0.0));
        assert_eq!(m[(1, 7)], 1.0);
    }

    #[test]
    fn matrix_times_coefficients_matches_eval() {
        let coeffs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() + 1.2).collect();
        let s = SplineField::new(coeffs.clone()).unwrap();
        let pts: Vec<f64> = (0..=57).map(|i| i as f64 / 57.0).collect();
        let m = s.basis_matrix(&pts).unwrap();
        let v = &m * nalgebra::DVector::from_vec(coeffs);
        for (i, &x) in pts.iter().enumerate() {
            assert!((v[i] - s.eval(x).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(SplineField::new(vec![1.0; 3]).is_err());
        let s = SplineField::constant(5, 1.0).unwrap();
        assert!(s.eval(-0.1).is_err());
        assert!(s.eval(1.0 + 1e-9).is_err());
        assert!(s.eval(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity(len in 4usize..40, x in 0.0f64..=1.0) {
            let b = CubicBasis::new(len).unwrap();
            let row = b.matrix(&[x]).unwrap();
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= -1e-15));
        }
    }
}
