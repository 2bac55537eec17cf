//! Sample average approximation: fixed realizations turn expectations of
//! path functionals into deterministic functions of the field parameters.
//!
//! The parameter vector is laid out as `[mean coefficients..., covariance
//! parameters...]`. Covariance parameters index into the
//! [`CovarianceModel`] parameter list (0 is the correlation length,
//! `1..` the sigma spline coefficients).

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::kl::{
    build_kl, draw_realizations, sample_paths, KLBasis, NystromSpectrum, RealizationSet,
};
use crate::numerics::{ordered_mean, sym_eigendecompose, SplineField};
use crate::randomfield::{
    assemble_covariance, covariance_param_derivative, CovarianceModel, Grid1D, KernelKind,
};
use crate::sensitivity::{covariance_sensitivity_modes, eigen_derivatives, SensitivityMethod};

/// Default confidence level of reported intervals.
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Central difference step for the Hessian fallback.
pub const HESSIAN_FD_STEP: f64 = 1e-4;

/// A scalar output `F(e)` of one field realization tabulated on the grid.
///
/// Pathwise gradients are unbiased only when differentiation and expectation
/// can be interchanged. Implementors are expected to satisfy, for the
/// parameter range of interest:
///
/// - sample paths are almost surely differentiable in the parameters
///   (smooth covariance dependence, simple retained eigenvalues);
/// - `F` is almost surely continuous and differentiable except on a set of
///   probability zero;
/// - `F` is almost surely Lipschitz in the path, with an integrable
///   Lipschitz constant.
///
/// Discontinuous outputs such as failure indicators `1{F >= c}` violate
/// these conditions and must not be registered. Nothing here checks it.
pub trait PathFunctional: Send + Sync {
    fn value(&self, path: &[f64]) -> Result<f64>;

    /// `dF/de_j` at every grid node.
    fn path_gradient(&self, path: &[f64], out: &mut [f64]) -> Result<()>;

    /// Diagonal of `d2F/de2` when `F` is a pointwise-local integral.
    fn path_hessian_diagonal(&self, _path: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// A deterministic objective term added to every sample, such as a cost
/// depending only on the parameters.
pub trait DeterministicTerm: Send + Sync {
    fn value_and_gradient(&self, p: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    fn hessian(&self, _p: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// How the field depends on the parameters.
#[derive(Debug, Clone)]
pub struct FieldParameterization {
    pub grid: Grid1D,
    /// Mean spline; its coefficients are the leading parameters. `None` means zero mean.
    pub mean: Option<SplineField>,
    /// Covariance model; must be differentiable (not the exponential kernel).
    pub covariance: CovarianceModel,
    /// Covariance parameters exposed to the optimizer.
    pub covariance_params: Vec<usize>,
}

impl FieldParameterization {
    /// Mean coefficients (if any) followed by the chosen covariance parameters.
    pub fn initial_parameters(&self) -> DVector<f64> {
        let mut p: Vec<f64> = self
            .mean
            .as_ref()
            .map_or_else(Vec::new, |m| m.coefficients().to_vec());
        let cov = self.covariance.parameters();
        p.extend(self.covariance_params.iter().map(|&k| cov[k]));
        DVector::from_vec(p)
    }

    pub fn mean_len(&self) -> usize {
        self.mean.as_ref().map_or(0, SplineField::len)
    }

    pub fn len(&self) -> usize {
        self.mean_len() + self.covariance_params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Monte Carlo value and gradient with per-sample contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SAAEstimate {
    pub parameters: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub per_sample_values: Vec<f64>,
    /// Row `n` is the gradient of sample `n`.
    pub per_sample_gradients: DMatrix<f64>,
}

impl SAAEstimate {
    pub fn n_samples(&self) -> usize {
        self.per_sample_values.len()
    }

    /// `gamma^2`: sample variance of the per-sample values.
    pub fn value_variance(&self) -> f64 {
        let n = self.n_samples();
        if n < 2 {
            return 0.0;
        }
        let m = self.value;
        let dev: Vec<f64> = self.per_sample_values.iter().map(|v| (v - m).powi(2)).collect();
        ordered_mean(&dev) * n as f64 / (n - 1) as f64
    }

    /// Standard error of each gradient component.
    pub fn gradient_std_errors(&self) -> DVector<f64> {
        let n = self.n_samples();
        DVector::from_fn(self.gradient.len(), |k, _| {
            let m = self.gradient[k];
            let dev: Vec<f64> = self
                .per_sample_gradients
                .column(k)
                .iter()
                .map(|v| (v - m).powi(2))
                .collect();
            (ordered_mean(&dev) * n as f64 / (n - 1).max(1) as f64 / n as f64).sqrt()
        })
    }
}

/// A stochastic objective made deterministic by fixing its realizations.
pub struct SAAProblem {
    field: FieldParameterization,
    functional: Box<dyn PathFunctional>,
    deterministic: Option<Box<dyn DeterministicTerm>>,
    method: SensitivityMethod,
    draws: RealizationSet,
    mean_basis: Option<DMatrix<f64>>,
    sigma_basis: Option<DMatrix<f64>>,
    /// Unit-variance realizations, one column per sample (scaled route).
    unit_paths: Option<DMatrix<f64>>,
    /// Modes of the last evaluated expansion (eigen route), for sign alignment.
    reference: Mutex<Option<DMatrix<f64>>>,
}

impl std::fmt::Debug for SAAProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SAAProblem")
            .field("field", &self.field)
            .field("method", &self.method)
            .field("n_samples", &self.draws.n_samples())
            .field("n_modes", &self.draws.n_modes())
            .finish_non_exhaustive()
    }
}

impl SAAProblem {
    /// Problem with draws generated from `seed`. The truncation level is
    /// chosen from `threshold` at the initial parameters and then frozen.
    pub fn with_seed(
        field: FieldParameterization,
        functional: Box<dyn PathFunctional>,
        deterministic: Option<Box<dyn DeterministicTerm>>,
        method: SensitivityMethod,
        seed: u64,
        n_samples: usize,
        threshold: f64,
    ) -> Result<Self> {
        let base = match method {
            SensitivityMethod::ScaledField => field.covariance.unit_variance(),
            _ => field.covariance.clone(),
        };
        let cov = assemble_covariance(&base, &field.grid)?;
        let n_modes = build_kl(&cov, None, threshold)?.truncation_level();
        let draws = draw_realizations(seed, n_samples, n_modes)?;
        Self::new(field, functional, deterministic, method, draws)
    }

    pub fn new(
        field: FieldParameterization,
        functional: Box<dyn PathFunctional>,
        deterministic: Option<Box<dyn DeterministicTerm>>,
        method: SensitivityMethod,
        draws: RealizationSet,
    ) -> Result<Self> {
        let model = &field.covariance;
        if model.kind() == KernelKind::Exponential {
            return Err(Error::Unsupported(
                "the exponential kernel has no pathwise sensitivities".into(),
            ));
        }
        let n_cov = model.parameter_count();
        if let Some(&k) = field.covariance_params.iter().find(|&&k| k >= n_cov) {
            return Err(invalid(format!(
                "covariance parameter {k} out of range for {n_cov} parameters"
            )));
        }
        let points = field.grid.points();
        let mean_basis = field
            .mean
            .as_ref()
            .map(|m| m.basis_matrix(points))
            .transpose()?;
        let sigma_basis = model.scale().map(|s| s.basis_matrix(points)).transpose()?;
        let unit_paths = match method {
            SensitivityMethod::ScaledField => {
                if model.kind() != KernelKind::ScaledNonstationary {
                    return Err(invalid("the scaled-field route needs a scaled covariance model"));
                }
                if field.covariance_params.contains(&0) {
                    return Err(invalid(
                        "the scaled-field route cannot differentiate the correlation length",
                    ));
                }
                let unit = assemble_covariance(&model.unit_variance(), &field.grid)?;
                let spectrum = NystromSpectrum::new(&unit)?;
                let basis = KLBasis::from_spectrum(
                    spectrum,
                    DVector::zeros(field.grid.len()),
                    draws.n_modes(),
                    field.grid.clone(),
                )?;
                Some(sample_paths(&basis, &draws)?.transpose())
            }
            SensitivityMethod::EigenPerturbation => None,
            SensitivityMethod::MeanShift => {
                return Err(invalid(
                    "choose a covariance sensitivity route; mean shifts are always included",
                ))
            }
        };
        Ok(Self {
            field,
            functional,
            deterministic,
            method,
            draws,
            mean_basis,
            sigma_basis,
            unit_paths,
            reference: Mutex::new(None),
        })
    }

    pub fn field(&self) -> &FieldParameterization {
        &self.field
    }

    pub fn method(&self) -> SensitivityMethod {
        self.method
    }

    pub fn draws(&self) -> &RealizationSet {
        &self.draws
    }

    pub fn n_samples(&self) -> usize {
        self.draws.n_samples()
    }

    pub fn n_parameters(&self) -> usize {
        self.field.len()
    }

    pub fn initial_parameters(&self) -> DVector<f64> {
        self.field.initial_parameters()
    }

    /// Forget the stored reference modes of the eigen route.
    pub fn reset_reference(&self) {
        *self.reference.lock().expect("reference lock poisoned") = None;
    }

    fn split(&self, p: &DVector<f64>) -> Result<(DVector<f64>, CovarianceModel)> {
        if p.len() != self.n_parameters() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.n_parameters(),
                p.len()
            )));
        }
        if let Some(v) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain {
                value: *v,
                context: "in parameter vector".into(),
            });
        }
        let nm = self.field.mean_len();
        let mean = match &self.mean_basis {
            Some(b) => b * p.rows(0, nm),
            None => DVector::zeros(self.field.grid.len()),
        };
        let mut cov = self.field.covariance.parameters();
        for (slot, &k) in self.field.covariance_params.iter().enumerate() {
            cov[k] = p[nm + slot];
        }
        Ok((mean, self.field.covariance.with_parameters(&cov)?))
    }

    fn eigen_basis(&self, model: &CovarianceModel, mean: DVector<f64>) -> Result<KLBasis> {
        let cov = assemble_covariance(model, &self.field.grid)?;
        let mut spectrum = NystromSpectrum::new(&cov)?;
        let mut reference = self.reference.lock().expect("reference lock poisoned");
        if let Some(r) = reference.as_ref() {
            spectrum.align_to(r)?;
        }
        let k = self.draws.n_modes();
        *reference = Some(spectrum.eigen().vectors.columns(0, k).into_owned());
        KLBasis::from_spectrum(spectrum, mean, k, self.field.grid.clone())
    }

    /// Realizations at `p`, one column per sample.
    fn paths(&self, p: &DVector<f64>) -> Result<(DMatrix<f64>, Option<KLBasis>)> {
        let (mean, model) = self.split(p)?;
        match self.method {
            SensitivityMethod::ScaledField => {
                let unit = self.unit_paths.as_ref().expect("scaled route keeps unit paths");
                let sigma_basis = self.sigma_basis.as_ref().expect("scaled model has sigma");
                let sigma = sigma_basis
                    * DVector::from_column_slice(&model.parameters()[1..]);
                let mut e = unit.clone();
                for (j, mut row) in e.row_iter_mut().enumerate() {
                    row.scale_mut(sigma[j]);
                    row.add_scalar_mut(mean[j]);
                }
                Ok((e, None))
            }
            _ => {
                let basis = self.eigen_basis(&model, mean)?;
                let e = sample_paths(&basis, &self.draws)?.transpose();
                Ok((e, Some(basis)))
            }
        }
    }

    /// Realizations at `p`, one row per sample.
    pub fn realizations(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.paths(p)?.0.transpose())
    }

    fn per_sample(&self, paths: &DMatrix<f64>, with_gradient: bool) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n_grid = paths.nrows();
        let results: Vec<Result<(f64, Vec<f64>)>> = (0..paths.ncols())
            .into_par_iter()
            .map(|n| {
                let path = paths.column(n);
                let path = path.as_slice();
                let wrap = |e: Error| Error::SampleFailure {
                    sample: n,
                    source: Box::new(e),
                };
                let v = self.functional.value(path).map_err(wrap)?;
                if !v.is_finite() {
                    return Err(wrap(Error::NumericalDomain {
                        value: v,
                        context: "in functional value".into(),
                    }));
                }
                let mut g = Vec::new();
                if with_gradient {
                    g = vec![0.0; n_grid];
                    self.functional.path_gradient(path, &mut g).map_err(wrap)?;
                }
                Ok((v, g))
            })
            .collect();
        let mut values = Vec::with_capacity(results.len());
        let mut grads = DMatrix::zeros(if with_gradient { n_grid } else { 0 }, results.len());
        for (n, r) in results.into_iter().enumerate() {
            let (v, g) = r?;
            values.push(v);
            if with_gradient {
                grads.column_mut(n).copy_from_slice(&g);
            }
        }
        Ok((values, grads))
    }

    /// Monte Carlo value only.
    pub fn value(&self, p: &DVector<f64>) -> Result<f64> {
        let (paths, _) = self.paths(p)?;
        let (mut values, _) = self.per_sample(&paths, false)?;
        if let Some(d) = &self.deterministic {
            let (v, _) = d.value_and_gradient(p)?;
            values.iter_mut().for_each(|x| *x += v);
        }
        Ok(ordered_mean(&values))
    }

    /// Monte Carlo value and pathwise gradient.
    pub fn evaluate(&self, p: &DVector<f64>) -> Result<SAAEstimate> {
        let (paths, basis) = self.paths(p)?;
        let (mut values, g_t) = self.per_sample(&paths, true)?;
        let n = values.len();
        let nm = self.field.mean_len();
        let np = self.n_parameters();
        let mut jac = DMatrix::zeros(n, np);

        if let Some(bm) = &self.mean_basis {
            jac.columns_mut(0, nm).copy_from(&(g_t.transpose() * bm));
        }
        let cov_params = &self.field.covariance_params;
        match self.method {
            SensitivityMethod::ScaledField => {
                let unit = self.unit_paths.as_ref().expect("scaled route keeps unit paths");
                let sb = self.sigma_basis.as_ref().expect("scaled model has sigma");
                let weighted = g_t.component_mul(unit).transpose() * sb;
                for (slot, &k) in cov_params.iter().enumerate() {
                    jac.set_column(nm + slot, &weighted.column(k - 1));
                }
            }
            _ => {
                let basis = basis.expect("eigen route builds a basis");
                let (_, model) = self.split(p)?;
                let gt = g_t.transpose();
                for (slot, &k) in cov_params.iter().enumerate() {
                    let dc = covariance_param_derivative(&model, &self.field.grid, k)?;
                    let ed = eigen_derivatives(&basis, &dc)?;
                    let coeff = covariance_sensitivity_modes(&basis, &ed)?;
                    let h = (&gt * coeff).component_mul(self.draws.draws());
                    let col = DVector::from_iterator(n, h.row_iter().map(|r| r.sum()));
                    jac.set_column(nm + slot, &col);
                }
            }
        }

        if let Some(d) = &self.deterministic {
            let (v, g) = d.value_and_gradient(p)?;
            values.iter_mut().for_each(|x| *x += v);
            for mut row in jac.row_iter_mut() {
                row += g.transpose();
            }
        }
        let value = ordered_mean(&values);
        let mut gradient = DVector::zeros(np);
        for k in 0..np {
            gradient[k] = crate::sensitivity::pathwise_gradient(jac.column(k).as_slice())?;
        }
        Ok(SAAEstimate {
            parameters: p.clone(),
            value,
            gradient,
            per_sample_values: values,
            per_sample_gradients: jac,
        })
    }

    /// Estimate of the Hessian `B = E[d2F]` at `p`.
    ///
    /// Closed form when paths are linear in the parameters (scaled route) and
    /// the functional is pointwise local; otherwise central differences of the
    /// SAA gradient with step [`HESSIAN_FD_STEP`].
    pub fn hessian_estimate(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        if self.method == SensitivityMethod::ScaledField {
            if let Some(h) = self.closed_form_hessian(p)? {
                return Ok(h);
            }
        }
        self.fd_hessian(p, HESSIAN_FD_STEP)
    }

    fn closed_form_hessian(&self, p: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        let (paths, _) = self.paths(p)?;
        let n = paths.ncols();
        let n_grid = paths.nrows();
        let mut diag = DMatrix::zeros(n_grid, n);
        for s in 0..n {
            match self.functional.path_hessian_diagonal(paths.column(s).as_slice()) {
                Some(h) => diag.column_mut(s).copy_from_slice(&h),
                None => return Ok(None),
            }
        }
        let unit = self.unit_paths.as_ref().expect("scaled route keeps unit paths");
        let node_mean = |f: &dyn Fn(usize, usize) -> f64| -> DVector<f64> {
            DVector::from_fn(n_grid, |j, _| {
                let v: Vec<f64> = (0..n).map(|s| f(j, s)).collect();
                ordered_mean(&v)
            })
        };
        let a = node_mean(&|j, s| diag[(j, s)]);
        let b = node_mean(&|j, s| diag[(j, s)] * unit[(j, s)]);
        let c = node_mean(&|j, s| diag[(j, s)] * unit[(j, s)] * unit[(j, s)]);

        let nm = self.field.mean_len();
        let np = self.n_parameters();
        // jacobian rows per node: [B_m(x_j), e_unit * B_sigma(x_j)]
        let sb = self.sigma_basis.as_ref().expect("scaled model has sigma");
        let cols: Vec<usize> = self.field.covariance_params.iter().map(|k| k - 1).collect();
        let mut h = DMatrix::zeros(np, np);
        let weighted = |w: &DVector<f64>, left: &DMatrix<f64>, right: &DMatrix<f64>| {
            let mut lw = left.clone();
            for (j, mut row) in lw.row_iter_mut().enumerate() {
                row.scale_mut(w[j]);
            }
            lw.transpose() * right
        };
        let sel = DMatrix::from_fn(n_grid, cols.len(), |j, c| sb[(j, cols[c])]);
        h.view_mut((nm, nm), (cols.len(), cols.len()))
            .copy_from(&weighted(&c, &sel, &sel));
        if let Some(bm) = &self.mean_basis {
            h.view_mut((0, 0), (nm, nm)).copy_from(&weighted(&a, bm, bm));
            let cross = weighted(&b, bm, &sel);
            h.view_mut((0, nm), (nm, cols.len())).copy_from(&cross);
            h.view_mut((nm, 0), (cols.len(), nm)).copy_from(&cross.transpose());
        }
        if let Some(d) = &self.deterministic {
            match d.hessian(p) {
                Some(dh) => h += dh,
                None => h += fd_jacobian(|q| Ok(d.value_and_gradient(q)?.1), p, HESSIAN_FD_STEP)?,
            }
        }
        Ok(Some(h))
    }

    /// Central differences of the SAA gradient, symmetrized.
    pub fn fd_hessian(&self, p: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
        fd_jacobian(|q| Ok(self.evaluate(q)?.gradient), p, step)
    }
}

fn fd_jacobian(
    grad: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    p: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = p.len();
    let mut h = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut plus = p.clone();
        plus[k] += step;
        let mut minus = p.clone();
        minus[k] -= step;
        let col = (grad(&plus)? - grad(&minus)?) / (2.0 * step);
        h.set_column(k, &col);
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Where the Hessian used for inference comes from.
#[derive(Debug, Clone)]
pub enum HessianSource {
    /// Already averaged over samples.
    Mean(DMatrix<f64>),
    /// One Hessian per sample.
    PerSample(Vec<DMatrix<f64>>),
}

/// Asymptotic inference at an SAA optimum.
#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub parameters: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian_estimate: DMatrix<f64>,
    pub gradient_covariance: DMatrix<f64>,
    /// Asymptotic covariance of the solution, `B^-1 Sigma B^-1 / N`.
    pub solution_covariance: DMatrix<f64>,
    pub standard_errors: DVector<f64>,
    pub objective_variance: f64,
    pub confidence_level: f64,
    pub z: f64,
}

impl InferenceReport {
    pub fn ci_low(&self) -> DVector<f64> {
        &self.parameters - &self.standard_errors * self.z
    }

    pub fn ci_high(&self) -> DVector<f64> {
        &self.parameters + &self.standard_errors * self.z
    }

    /// Standard errors of linear functionals `rows * p` (e.g. a spline on
    /// an evaluation grid).
    pub fn linear_std_errors(&self, rows: &DMatrix<f64>) -> DVector<f64> {
        let cov = rows * &self.solution_covariance * rows.transpose();
        DVector::from_fn(rows.nrows(), |i, _| cov[(i, i)].max(0.0).sqrt())
    }

    /// Per-parameter JSON entries.
    pub fn to_json(&self) -> serde_json::Value {
        let lo = self.ci_low();
        let hi = self.ci_high();
        let params: Vec<serde_json::Value> = (0..self.parameters.len())
            .map(|k| {
                serde_json::json!({
                    "value": self.parameters[k],
                    "gradient": self.gradient[k],
                    "std_err": self.standard_errors[k],
                    "ci_low": lo[k],
                    "ci_high": hi[k],
                })
            })
            .collect();
        serde_json::json!({
            "objective": self.value,
            "objective_variance": self.objective_variance,
            "confidence_level": self.confidence_level,
            "parameters": params,
        })
    }
}

fn normal_quantile(confidence: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    if (confidence - DEFAULT_CONFIDENCE).abs() < 1e-15 {
        return 1.96;
    }
    Normal::standard().inverse_cdf(0.5 + confidence / 2.0)
}

fn symmetric_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym_eigendecompose(&sym)?;
    let scale = eig.scale();
    if scale == 0.0 || eig.values.iter().any(|v| v.abs() <= 1e-12 * scale) {
        return Err(Error::InferenceFailure(format!(
            "Hessian estimate is singular (eigenvalues {:?})",
            eig.values.as_slice()
        )));
    }
    let inv_vals = eig.values.map(|v| 1.0 / v);
    Ok(&eig.vectors * DMatrix::from_diagonal(&inv_vals) * eig.vectors.transpose())
}

/// Hessian, gradient covariance and standard errors of an SAA solution.
///
/// With `constraint_null_space = Some(Z)` (columns spanning the directions
/// left free by active constraints) the sandwich is formed in the reduced
/// coordinates and mapped back.
pub fn inference(
    estimate: &SAAEstimate,
    hessian: &HessianSource,
    constraint_null_space: Option<&DMatrix<f64>>,
    confidence_level: f64,
) -> Result<InferenceReport> {
    if !(confidence_level > 0.0 && confidence_level < 1.0) {
        return Err(invalid(format!("confidence level must be in (0, 1), got {confidence_level}")));
    }
    let n = estimate.n_samples();
    let np = estimate.gradient.len();
    if n == 0 {
        return Err(invalid("estimate has no samples"));
    }
    let b = match hessian {
        HessianSource::Mean(m) => m.clone(),
        HessianSource::PerSample(hs) => {
            if hs.len() != n {
                return Err(invalid(format!("{} Hessians for {n} samples", hs.len())));
            }
            DMatrix::from_fn(np, np, |i, j| {
                let v: Vec<f64> = hs.iter().map(|h| h[(i, j)]).collect();
                ordered_mean(&v)
            })
        }
    };
    if b.shape() != (np, np) {
        return Err(invalid("Hessian shape does not match the parameters"));
    }
    let jac = &estimate.per_sample_gradients;
    let mut sigma = DMatrix::from_fn(np, np, |i, j| {
        let v: Vec<f64> = jac.column(i).iter().zip(jac.column(j).iter()).map(|(a, c)| a * c).collect();
        ordered_mean(&v)
    });
    sigma = (&sigma + sigma.transpose()) * 0.5;

    let solution_covariance = match constraint_null_space {
        Some(z) if z.ncols() == 0 => DMatrix::zeros(np, np),
        Some(z) => {
            let br = z.transpose() * &b * z;
            let sr = z.transpose() * &sigma * z;
            let bi = symmetric_inverse(&br)?;
            z * &bi * sr * &bi * z.transpose() / n as f64
        }
        None => {
            let bi = symmetric_inverse(&b)?;
            &bi * &sigma * &bi / n as f64
        }
    };
    let standard_errors =
        DVector::from_fn(np, |k, _| solution_covariance[(k, k)].max(0.0).sqrt());
    Ok(InferenceReport {
        parameters: estimate.parameters.clone(),
        value: estimate.value,
        gradient: estimate.gradient.clone(),
        hessian_estimate: b,
        gradient_covariance: sigma,
        solution_covariance,
        standard_errors,
        objective_variance: estimate.value_variance(),
        confidence_level,
        z: normal_quantile(confidence_level),
    })
}

/// Least-squares slope of `log(std)` against `log(N)` over replicated errors.
pub fn optimality_asymptotics_check(replicates: &[(usize, Vec<f64>)]) -> Result<f64> {
    let mut distinct: Vec<usize> = replicates.iter().map(|(n, _)| *n).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(invalid("need at least two distinct sample sizes"));
    }
    if let Some((n, r)) = replicates.iter().find(|(_, r)| r.len() < 30) {
        return Err(invalid(format!(
            "sample size {n} has {} replications, need at least 30",
            r.len()
        )));
    }
    let points: Vec<(f64, f64)> = replicates
        .iter()
        .map(|(n, r)| ((*n as f64).ln(), sample_std(r).ln()))
        .collect();
    let mx = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = ordered_mean(v);
    let dev: Vec<f64> = v.iter().map(|x| (x - m).powi(2)).collect();
    (ordered_mean(&dev) * n / (n - 1.0)).sqrt()
}

/// Sample skewness `m3 / m2^(3/2)`.
pub fn sample_skewness(v: &[f64]) -> f64 {
    let m = ordered_mean(v);
    let m2 = ordered_mean(&v.iter().map(|x| (x - m).powi(2)).collect::<Vec<_>>());
    let m3 = ordered_mean(&v.iter().map(|x| (x - m).powi(3)).collect::<Vec<_>>());
    m3 / m2.powf(1.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic_toy() {
        // F = (p - xi)^2 / 2 evaluated at p = mean(xi)
        let xi = [0.3, -1.2, 0.8, 2.1, -0.4, 0.9];
        let p = xi.iter().sum::<f64>() / xi.len() as f64;
        let grads: Vec<f64> = xi.iter().map(|x| p - x).collect();
        let est = SAAEstimate {
            parameters: DVector::from_element(1, p),
            value: ordered_mean(&grads.iter().map(|g| g * g / 2.0).collect::<Vec<_>>()),
            gradient: DVector::from_element(1, ordered_mean(&grads)),
            per_sample_values: grads.iter().map(|g| g * g / 2.0).collect(),
            per_sample_gradients: DMatrix::from_column_slice(xi.len(), 1, &grads),
        };
        let hs = vec![DMatrix::from_element(1, 1, 1.0); xi.len()];
        let r = inference(&est, &HessianSource::PerSample(hs), None, 0.95).unwrap();
        let var = xi.iter().map(|x| (x - p).powi(2)).sum::<f64>() / xi.len() as f64;
        assert_eq!(r.hessian_estimate[(0, 0)], 1.0);
        assert!((r.gradient_covariance[(0, 0)] - var).abs() < 1e-15);
        assert!((r.standard_errors[0] - (var / xi.len() as f64).sqrt()).abs() < 1e-15);
        assert!((r.ci_high()[0] - p - 1.96 * r.standard_errors[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_zero_errors() {
        let est = SAAEstimate {
            parameters: DVector::from_vec(vec![1.0, 2.0]),
            value: 0.0,
            gradient: DVector::zeros(2),
            per_sample_values: vec![0.0; 5],
            per_sample_gradients: DMatrix::zeros(5, 2),
        };
        let r = inference(&est, &HessianSource::Mean(DMatrix::identity(2, 2)), None, 0.95).unwrap();
        assert_eq!(r.gradient_covariance.amax(), 0.0);
        assert_eq!(r.standard_errors.amax(), 0.0);
        let singular = HessianSource::Mean(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(
            inference(&est, &singular, None, 0.95),
            Err(Error::InferenceFailure(_))
        ));
    }

    #[test]
    fn slope_examples() {
        let exact: Vec<(usize, Vec<f64>)> = [100usize, 400, 1600]
            .iter()
            .map(|&n| {
                let s = 1.0 / (n as f64).sqrt();
                (n, (0..40).map(|i| if i % 2 == 0 { s } else { -s }).collect())
            })
            .collect();
        assert!((optimality_asymptotics_check(&exact).unwrap() + 0.5).abs() < 1e-12);
        let flat: Vec<(usize, Vec<f64>)> = [10usize, 1000]
            .iter()
            .map(|&n| (n, (0..30).map(|i| (i % 3) as f64).collect()))
            .collect();
        assert!(optimality_asymptotics_check(&flat).unwrap().abs() < 1e-12);
        assert!(optimality_asymptotics_check(&exact[..1]).is_err());
        let short = vec![(10usize, vec![1.0; 29]), (20usize, vec![1.0; 40])];
        assert!(optimality_asymptotics_check(&short).is_err());
    }
}
