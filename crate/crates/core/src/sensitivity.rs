//! Pathwise derivatives of field realizations with respect to mean and
//! covariance parameters.
//!
//! Draws are held fixed while parameters move. Covariance parameters are
//! handled either through eigenvalue/eigenvector perturbation of the K-L
//! expansion, or, when a parameter only scales the standard deviation of a
//! unit-variance field, by differentiating `e = sigma * e_unit` directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::kl::{KLBasis, RealizationSet};
use crate::numerics::{ordered_mean, spectral_pseudoinverse_apply, CubicBasis, SymEigen};

/// Modes whose eigenvalue is below this fraction of the largest do not
/// contribute to covariance path sensitivities.
pub const NEGLIGIBLE_MODE_RELATIVE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityMethod {
    EigenPerturbation,
    ScaledField,
    MeanShift,
}

/// Which parameter a derivative refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParameterId {
    /// Coefficient `k` of the mean spline.
    Mean(usize),
    /// Covariance parameter `k`.
    Covariance(usize),
}

/// Derivatives of the retained eigenpairs with respect to one parameter.
#[derive(Debug, Clone)]
pub struct EigenDerivatives {
    pub dlambda: DVector<f64>,
    /// Column `i` is the derivative of mode `i` on the grid.
    pub dmodes: DMatrix<f64>,
}

/// `d e_n(x) / d p` for every sample (rows) and grid point (columns).
#[derive(Debug, Clone)]
pub struct PathSensitivities {
    pub dpaths: DMatrix<f64>,
    pub parameter: ParameterId,
    pub method: SensitivityMethod,
}

/// Sensitivity to a mean coefficient: the basis function itself, for every sample.
pub fn mean_path_sensitivity(
    parameter: ParameterId,
    mean_basis: &CubicBasis,
    grid_points: &[f64],
    n_samples: usize,
) -> Result<PathSensitivities> {
    let k = match parameter {
        ParameterId::Mean(k) if k < mean_basis.len() => k,
        ParameterId::Mean(k) => {
            return Err(invalid(format!(
                "mean coefficient {k} out of range for {} coefficients",
                mean_basis.len()
            )))
        }
        ParameterId::Covariance(_) => {
            return Err(invalid("mean sensitivity requested for a covariance parameter"))
        }
    };
    let row: Vec<f64> = grid_points
        .iter()
        .map(|&x| mean_basis.value(k, x))
        .collect::<Result<_>>()?;
    let dpaths = DMatrix::from_fn(n_samples, row.len(), |_, j| row[j]);
    Ok(PathSensitivities {
        dpaths,
        parameter,
        method: SensitivityMethod::MeanShift,
    })
}

/// First-order perturbation of the leading `n_modes` eigenpairs of a
/// symmetric matrix whose derivative is `dm`.
pub fn perturb_eigenpairs(
    eig: &SymEigen,
    dm: &DMatrix<f64>,
    n_modes: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = eig.len();
    if dm.nrows() != n || dm.ncols() != n {
        return Err(invalid(format!(
            "derivative is {}x{}, expected {n}x{n}",
            dm.nrows(),
            dm.ncols()
        )));
    }
    if n_modes > n {
        return Err(invalid(format!("{n_modes} modes requested from {n}")));
    }
    let mut dlambda = DVector::zeros(n_modes);
    let mut dvec = DMatrix::zeros(n, n_modes);
    for i in 0..n_modes {
        let v = eig.vectors.column(i).into_owned();
        let dv = dm * &v;
        dlambda[i] = v.dot(&dv);
        let d = -spectral_pseudoinverse_apply(eig, i, &dv)?;
        dvec.set_column(i, &d);
    }
    Ok((dlambda, dvec))
}

/// Eigenvalue and mode derivatives of a K-L basis for a covariance
/// derivative `dc` (on the grid, unweighted).
pub fn eigen_derivatives(basis: &KLBasis, dc: &DMatrix<f64>) -> Result<EigenDerivatives> {
    let spectrum = basis.spectrum();
    let sw = spectrum.sqrt_weights();
    let n = sw.len();
    if dc.nrows() != n || dc.ncols() != n {
        return Err(invalid("covariance derivative does not match the grid"));
    }
    let da = DMatrix::from_fn(n, n, |i, j| dc[(i, j)] * sw[i] * sw[j]);
    let (dlambda, dpsi) = perturb_eigenpairs(spectrum.eigen(), &da, basis.truncation_level())?;
    let mut dmodes = dpsi;
    for mut col in dmodes.column_iter_mut() {
        col.component_div_assign(sw);
    }
    Ok(EigenDerivatives { dlambda, dmodes })
}

/// Multiply each column of `new` by +-1 so it is closer to the matching
/// column of `reference`. Exact ties keep the sign.
pub fn align_signs(reference: &DMatrix<f64>, new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if reference.shape() != new.shape() {
        return Err(invalid(format!(
            "mode shapes differ: {:?} vs {:?}",
            reference.shape(),
            new.shape()
        )));
    }
    let mut out = new.clone();
    for (mut col, r) in out.column_iter_mut().zip(reference.column_iter()) {
        let minus = (&col - r).norm();
        let plus = (&col + r).norm();
        if plus < minus {
            col.neg_mut();
        }
    }
    Ok(out)
}

/// Per-mode path coefficients `phi_i dlambda_i / (2 sqrt(lambda_i)) + sqrt(lambda_i) dphi_i`
/// (columns), so that `d e_n / d p = sum_i coeff_i xi_{n,i}`.
pub fn covariance_sensitivity_modes(
    basis: &KLBasis,
    ed: &EigenDerivatives,
) -> Result<DMatrix<f64>> {
    let k = basis.truncation_level();
    if ed.dlambda.len() != k || ed.dmodes.ncols() != k {
        return Err(invalid("eigen derivatives do not match the expansion"));
    }
    let lambda = basis.eigenvalues();
    let cutoff = NEGLIGIBLE_MODE_RELATIVE * lambda[0];
    let mut out = DMatrix::zeros(basis.grid().len(), k);
    for i in 0..k {
        let l = lambda[i];
        if l <= 0.0 {
            return Err(Error::SingularMode {
                mode: i,
                eigenvalue: l,
            });
        }
        if l < cutoff {
            continue;
        }
        let s = l.sqrt();
        let col = basis.modes().column(i) * (ed.dlambda[i] / (2.0 * s)) + ed.dmodes.column(i) * s;
        out.set_column(i, &col);
    }
    Ok(out)
}

/// Path sensitivities to a covariance parameter from eigen derivatives.
pub fn covariance_path_sensitivity(
    basis: &KLBasis,
    ed: &EigenDerivatives,
    draws: &RealizationSet,
    parameter: ParameterId,
) -> Result<PathSensitivities> {
    if draws.n_modes() != basis.truncation_level() {
        return Err(invalid("draws do not match the expansion"));
    }
    let coeff = covariance_sensitivity_modes(basis, ed)?;
    Ok(PathSensitivities {
        dpaths: draws.draws() * coeff.transpose(),
        parameter,
        method: SensitivityMethod::EigenPerturbation,
    })
}

/// Sensitivity of `e_n = sigma * e_unit_n` to a sigma coefficient whose basis
/// function takes the values `basis_column` on the grid.
pub fn scaled_path_sensitivity(
    unit_paths: &DMatrix<f64>,
    basis_column: &[f64],
    parameter: ParameterId,
) -> Result<PathSensitivities> {
    if unit_paths.ncols() != basis_column.len() {
        return Err(invalid(format!(
            "paths have {} grid points but the basis column has {}",
            unit_paths.ncols(),
            basis_column.len()
        )));
    }
    let mut dpaths = unit_paths.clone();
    for (j, mut col) in dpaths.column_iter_mut().enumerate() {
        col.scale_mut(basis_column[j]);
    }
    Ok(PathSensitivities {
        dpaths,
        parameter,
        method: SensitivityMethod::ScaledField,
    })
}

/// Sample mean of per-sample derivatives in a fixed summation order.
pub fn pathwise_gradient(per_sample: &[f64]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(invalid("no samples"));
    }
    if let Some((n, v)) = per_sample.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NumericalDomain {
            value: *v,
            context: format!("in derivative of sample {n}"),
        });
    }
    Ok(ordered_mean(per_sample))
}
