//! Covariance function families, discretization grids and assembly of
//! covariance matrices with closed-form parameter derivatives.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::numerics::{QuadratureRule, SplineField};

/// Ordered points on [0, 1] with positive quadrature weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid1D {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(invalid(format!(
                "grid needs matching nonempty points and weights, got {} and {}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite() || !(0.0..=1.0).contains(x)) {
            return Err(invalid("grid points must lie in [0, 1]"));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("grid points must be strictly increasing"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(invalid("grid weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("grid weights sum to {total}, expected 1")));
        }
        Ok(Self { points, weights })
    }

    /// `n` equally spaced points including both endpoints, equal weights.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("uniform grid needs at least 2 points, got {n}")));
        }
        let points = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Self::new(points, vec![1.0 / n as f64; n])
    }

    /// The nodes and weights of a quadrature rule.
    pub fn from_rule(rule: &QuadratureRule) -> Result<Self> {
        Self::new(rule.nodes().to_vec(), rule.weights().to_vec())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Quadrature inner product of two grid functions.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    SquaredExponential,
    Exponential,
    /// `sigma(x1) sigma(x2) rho(x1, x2)` with squared-exponential `rho`.
    ScaledNonstationary,
}

/// A covariance function. Parameter 0 is the correlation length; for the
/// scaled kind, parameters `1..=n` are the spline coefficients of sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    kind: KernelKind,
    correlation_length: f64,
    scale: Option<SplineField>,
}

fn check_length(l: f64) -> Result<()> {
    if !(l.is_finite() && l > 0.0) {
        return Err(invalid(format!("correlation length must be positive, got {l}")));
    }
    Ok(())
}

impl CovarianceModel {
    pub fn squared_exponential(correlation_length: f64) -> Result<Self> {
        check_length(correlation_length)?;
        Ok(Self {
            kind: KernelKind::SquaredExponential,
            correlation_length,
            scale: None,
        })
    }

    pub fn exponential(correlation_length: f64) -> Result<Self> {
        check_length(correlation_length)?;
        Ok(Self {
            kind: KernelKind::Exponential,
            correlation_length,
            scale: None,
        })
    }

    pub fn scaled(correlation_length: f64, sigma: SplineField) -> Result<Self> {
        check_length(correlation_length)?;
        Ok(Self {
            kind: KernelKind::ScaledNonstationary,
            correlation_length,
            scale: Some(sigma),
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn correlation_length(&self) -> f64 {
        self.correlation_length
    }

    pub fn scale(&self) -> Option<&SplineField> {
        self.scale.as_ref()
    }

    /// The unit-variance correlation model underlying this covariance.
    pub fn unit_variance(&self) -> Self {
        match self.kind {
            KernelKind::Exponential => self.clone(),
            _ => Self {
                kind: KernelKind::SquaredExponential,
                correlation_length: self.correlation_length,
                scale: None,
            },
        }
    }

    pub fn parameter_count(&self) -> usize {
        1 + self.scale.as_ref().map_or(0, SplineField::len)
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p = vec![self.correlation_length];
        if let Some(s) = &self.scale {
            p.extend_from_slice(s.coefficients());
        }
        p
    }

    pub fn with_parameters(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.parameter_count() {
            return Err(invalid(format!(
                "expected {} covariance parameters, got {}",
                self.parameter_count(),
                p.len()
            )));
        }
        check_length(p[0])?;
        let scale = match &self.scale {
            Some(s) => Some(s.with_coefficients(&p[1..])?),
            None => None,
        };
        Ok(Self {
            kind: self.kind,
            correlation_length: p[0],
            scale,
        })
    }

    /// Unit-variance correlation `rho(x1, x2)`.
    pub fn correlation(&self, x1: f64, x2: f64) -> f64 {
        let d = x1 - x2;
        let l = self.correlation_length;
        match self.kind {
            KernelKind::Exponential => (-d.abs() / l).exp(),
            _ => (-d * d / (2.0 * l * l)).exp(),
        }
    }

    fn sigma_at(&self, x: f64) -> Result<f64> {
        match &self.scale {
            Some(s) => s.eval(x),
            None => Ok(1.0),
        }
    }

    fn sigma_on(&self, grid: &Grid1D) -> Result<Vec<f64>> {
        grid.points().iter().map(|&x| self.sigma_at(x)).collect()
    }

    fn correlation_matrix(&self, grid: &Grid1D) -> DMatrix<f64> {
        let x = grid.points();
        let n = x.len();
        let mut r = DMatrix::zeros(n, n);
        for i in 0..n {
            r[(i, i)] = 1.0;
            for j in 0..i {
                let v = self.correlation(x[i], x[j]);
                r[(i, j)] = v;
                r[(j, i)] = v;
            }
        }
        r
    }
}

/// Covariance `C(x1, x2)`.
pub fn eval_kernel(model: &CovarianceModel, x1: f64, x2: f64) -> Result<f64> {
    for x in [x1, x2] {
        if !x.is_finite() || !(0.0..=1.0).contains(&x) {
            return Err(invalid(format!("coordinate {x} is outside [0, 1]")));
        }
    }
    let rho = model.correlation(x1, x2);
    Ok(match model.kind {
        KernelKind::ScaledNonstationary => model.sigma_at(x1)? * model.sigma_at(x2)? * rho,
        _ => rho,
    })
}

/// Dense covariance matrix over a grid.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    grid: Grid1D,
}

impl CovarianceMatrix {
    /// Wrap an explicit symmetric matrix.
    pub fn from_entries(entries: DMatrix<f64>, grid: Grid1D) -> Result<Self> {
        if entries.nrows() != grid.len() || entries.ncols() != grid.len() {
            return Err(invalid(format!(
                "covariance is {}x{} but the grid has {} points",
                entries.nrows(),
                entries.ncols(),
                grid.len()
            )));
        }
        crate::numerics::check_symmetric(&entries)?;
        Ok(Self { entries, grid })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }
}

pub fn assemble_covariance(model: &CovarianceModel, grid: &Grid1D) -> Result<CovarianceMatrix> {
    let mut c = model.correlation_matrix(grid);
    if model.kind == KernelKind::ScaledNonstationary {
        let s = model.sigma_on(grid)?;
        let n = grid.len();
        for j in 0..n {
            for i in 0..n {
                c[(i, j)] *= s[i] * s[j];
            }
        }
    }
    Ok(CovarianceMatrix {
        entries: c,
        grid: grid.clone(),
    })
}

/// Closed-form derivative of the assembled covariance with respect to one
/// parameter (see [`CovarianceModel`] for the indexing).
pub fn covariance_param_derivative(
    model: &CovarianceModel,
    grid: &Grid1D,
    param_index: usize,
) -> Result<DMatrix<f64>> {
    if param_index >= model.parameter_count() {
        return Err(invalid(format!(
            "parameter index {param_index} out of range for {} parameters",
            model.parameter_count()
        )));
    }
    if model.kind == KernelKind::Exponential {
        return Err(Error::Unsupported(
            "the exponential kernel is not differentiable and has no sensitivities".into(),
        ));
    }
    let x = grid.points();
    let n = x.len();
    let l = model.correlation_length;
    let rho = model.correlation_matrix(grid);
    let sigma = model.sigma_on(grid)?;
    let mut d = DMatrix::zeros(n, n);
    if param_index == 0 {
        let l3 = l * l * l;
        for j in 0..n {
            for i in 0..n {
                let dist = x[i] - x[j];
                d[(i, j)] = sigma[i] * sigma[j] * rho[(i, j)] * dist * dist / l3;
            }
        }
    } else {
        let k = param_index - 1;
        let basis = model
            .scale
            .as_ref()
            .expect("parameter_count > 1 implies a scale field")
            .basis();
        let b: Vec<f64> = x
            .iter()
            .map(|&xi| basis.value(k, xi))
            .collect::<Result<_>>()?;
        for j in 0..n {
            for i in 0..n {
                d[(i, j)] = (b[i] * sigma[j] + sigma[i] * b[j]) * rho[(i, j)];
            }
        }
    }
    Ok(d)
}
