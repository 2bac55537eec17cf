//! Concrete problems: the variance model problem with its closed-form
//! optimum, and a tolerance problem with a variability budget.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kl::build_kl;
use crate::numerics::{QuadratureRule, SplineField};
use crate::randomfield::{assemble_covariance, CovarianceModel, Grid1D};
use crate::saa::{DeterministicTerm, FieldParameterization, PathFunctional, SAAProblem};
use crate::sensitivity::SensitivityMethod;
use crate::sqp::{Bounds, LinearEqualities, OptimizationSpec, Tolerances};

/// Scatter threshold used to truncate the expansion in the built-in problems.
pub const PROBLEM_KL_THRESHOLD: f64 = 0.999_999;

/// A positive weight function on [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weight {
    /// `offset + amplitude * sin(2 pi x)`.
    Sine { offset: f64, amplitude: f64 },
    Constant { value: f64 },
    /// `base + amplitude * exp(-(x - center)^2 / (2 width^2))`.
    Gaussian {
        base: f64,
        amplitude: f64,
        center: f64,
        width: f64,
    },
}

impl Weight {
    /// `2 + sin(2 pi x)`.
    pub fn model() -> Self {
        Self::Sine {
            offset: 2.0,
            amplitude: 1.0,
        }
    }

    /// `1 + 9 exp(-x^2 / (2 * 0.05^2))`, concentrated near `x = 0`.
    pub fn leading_edge() -> Self {
        Self::Gaussian {
            base: 1.0,
            amplitude: 9.0,
            center: 0.0,
            width: 0.05,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Sine { offset, amplitude } => offset + amplitude * (2.0 * PI * x).sin(),
            Self::Constant { value } => value,
            Self::Gaussian {
                base,
                amplitude,
                center,
                width,
            } => base + amplitude * (-(x - center).powi(2) / (2.0 * width * width)).exp(),
        }
    }

    /// Fails unless the weight is positive at every point of a fine grid.
    pub fn validate(&self) -> Result<()> {
        if let Self::Gaussian { width, .. } = self {
            if !(*width > 0.0) {
                return Err(invalid("Gaussian weight width must be positive"));
            }
        }
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let v = self.eval(x);
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("weight is {v} at x = {x}; it must be positive")));
            }
        }
        Ok(())
    }
}

/// `sum_q w_q W(x_q) e(x_q)^2`: quadrature of `e^2 W` for a path on the nodes.
pub fn f1_per_sample(path: &[f64], weight: &[f64], rule: &QuadratureRule) -> f64 {
    debug_assert_eq!(path.len(), weight.len());
    path.iter()
        .zip(weight)
        .zip(rule.weights())
        .map(|((e, w), q)| q * w * e * e)
        .sum()
}

/// `integral e^2 W` as a path functional on quadrature nodes.
#[derive(Debug, Clone)]
pub struct WeightedSquare {
    /// Quadrature weight times `W` at each node.
    coefficients: Vec<f64>,
}

impl WeightedSquare {
    pub fn new(weight: &Weight, rule: &QuadratureRule) -> Self {
        let coefficients = rule
            .nodes()
            .iter()
            .zip(rule.weights())
            .map(|(&x, q)| q * weight.eval(x))
            .collect();
        Self { coefficients }
    }
}

impl PathFunctional for WeightedSquare {
    fn value(&self, path: &[f64]) -> Result<f64> {
        if path.len() != self.coefficients.len() {
            return Err(invalid("path does not match the quadrature nodes"));
        }
        Ok(path.iter().zip(&self.coefficients).map(|(e, c)| c * e * e).sum())
    }

    fn path_gradient(&self, path: &[f64], out: &mut [f64]) -> Result<()> {
        for ((o, e), c) in out.iter_mut().zip(path).zip(&self.coefficients) {
            *o = 2.0 * c * e;
        }
        Ok(())
    }

    fn path_hessian_diagonal(&self, _path: &[f64]) -> Option<Vec<f64>> {
        Some(self.coefficients.iter().map(|c| 2.0 * c).collect())
    }
}

fn sigma_on_nodes(sigma: &SplineField, rule: &QuadratureRule, sigma_min: f64) -> Result<Vec<f64>> {
    let values = sigma.eval_many(rule.nodes())?;
    for (node, (&s, &x)) in values.iter().zip(rule.nodes()).enumerate() {
        if !(s >= sigma_min) {
            return Err(Error::BoundViolation {
                node,
                x,
                sigma: s,
                min: sigma_min,
            });
        }
    }
    Ok(values)
}

/// `integral 1/sigma` and its gradient in the spline coefficients.
pub fn f2(sigma: &SplineField, rule: &QuadratureRule, sigma_min: f64) -> Result<(f64, DVector<f64>)> {
    let values = sigma_on_nodes(sigma, rule, sigma_min)?;
    let basis = sigma.basis_matrix(rule.nodes())?;
    let mut value = 0.0;
    let mut grad = DVector::zeros(sigma.len());
    for (q, (&s, &w)) in values.iter().zip(rule.weights()).enumerate() {
        value += w / s;
        grad.axpy(-w / (s * s), &basis.row(q).transpose(), 1.0);
    }
    Ok((value, grad))
}

/// Pointwise minimizer of `integral sigma^2 w + 1/sigma`.
pub fn analytic_optimum(w: f64) -> f64 {
    (1.0 / (2.0 * w)).cbrt()
}

/// Exact expectation `integral sigma^2 w` of the zero-mean variance term.
pub fn exact_f1(sigma: &SplineField, weight: &Weight, rule: &QuadratureRule) -> Result<f64> {
    rule.integrate(|x| sigma.eval(x).map_or(f64::NAN, |s| s * s * weight.eval(x)))
}

/// Gradient of [`exact_f1`]: component `k` is `integral 2 sigma w B_k`.
pub fn analytic_f1_gradient(
    sigma: &SplineField,
    weight: &Weight,
    rule: &QuadratureRule,
) -> Result<DVector<f64>> {
    let values = sigma.eval_many(rule.nodes())?;
    let basis = sigma.basis_matrix(rule.nodes())?;
    let mut grad = DVector::zeros(sigma.len());
    for (q, ((&s, &w), &x)) in values.iter().zip(rule.weights()).zip(rule.nodes()).enumerate() {
        grad.axpy(2.0 * w * s * weight.eval(x), &basis.row(q).transpose(), 1.0);
    }
    Ok(grad)
}

/// Total variability `V = integral sigma` and its (constant) gradient.
pub fn variability_metric(sigma: &SplineField, rule: &QuadratureRule) -> Result<(f64, DVector<f64>)> {
    let basis = sigma.basis_matrix(rule.nodes())?;
    let grad = basis.transpose() * DVector::from_column_slice(rule.weights());
    let value = grad.dot(&DVector::from_column_slice(sigma.coefficients()));
    Ok((value, grad))
}

/// `integral 1/sigma` as a deterministic term acting on the sigma block of
/// the parameter vector.
#[derive(Debug, Clone)]
pub struct InverseSigmaCost {
    template: SplineField,
    rule: QuadratureRule,
    sigma_min: f64,
    offset: usize,
    n_params: usize,
}

impl InverseSigmaCost {
    fn sigma(&self, p: &DVector<f64>) -> Result<SplineField> {
        self.template
            .with_coefficients(&p.as_slice()[self.offset..self.offset + self.template.len()])
    }
}

impl DeterministicTerm for InverseSigmaCost {
    fn value_and_gradient(&self, p: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (v, g) = f2(&self.sigma(p)?, &self.rule, self.sigma_min)?;
        let mut full = DVector::zeros(self.n_params);
        full.rows_mut(self.offset, g.len()).copy_from(&g);
        Ok((v, full))
    }

    fn hessian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let sigma = self.sigma(p).ok()?;
        let values = sigma.eval_many(self.rule.nodes()).ok()?;
        let basis = sigma.basis_matrix(self.rule.nodes()).ok()?;
        let scale = DVector::from_fn(values.len(), |q, _| {
            2.0 * self.rule.weights()[q] / values[q].powi(3)
        });
        let mut weighted = basis.clone();
        for (q, mut row) in weighted.row_iter_mut().enumerate() {
            row.scale_mut(scale[q]);
        }
        let block = basis.transpose() * weighted;
        let mut full = DMatrix::zeros(self.n_params, self.n_params);
        full.view_mut((self.offset, self.offset), (block.nrows(), block.ncols()))
            .copy_from(&block);
        Some(full)
    }
}

/// The variance model problem: minimize `E[integral e^2 w] + integral 1/sigma`
/// over the standard deviation spline of a zero-mean field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceProblem {
    pub weight: Weight,
    pub n_sigma: usize,
    pub intervals: usize,
    pub nodes_per_interval: usize,
    pub correlation_length: f64,
    pub sigma_min: f64,
    pub initial_sigma: f64,
    /// Coefficients of an optional mean spline (0 means a zero-mean field).
    pub n_mean: usize,
    pub kl_threshold: f64,
}

impl Default for VarianceProblem {
    fn default() -> Self {
        Self {
            weight: Weight::model(),
            n_sigma: 20,
            intervals: 20,
            nodes_per_interval: 2,
            correlation_length: 0.1,
            sigma_min: 0.2,
            initial_sigma: 1.0,
            n_mean: 0,
            kl_threshold: PROBLEM_KL_THRESHOLD,
        }
    }
}

impl VarianceProblem {
    pub fn validate(&self) -> Result<()> {
        self.weight.validate()?;
        if self.n_sigma < 4 {
            return Err(invalid("n_sigma must be at least 4"));
        }
        if self.n_mean != 0 && self.n_mean < 4 {
            return Err(invalid("n_mean must be 0 or at least 4"));
        }
        if !(self.sigma_min > 0.0) {
            return Err(invalid("sigma_min must be positive"));
        }
        if !(self.initial_sigma >= self.sigma_min) {
            return Err(invalid("initial_sigma must be at least sigma_min"));
        }
        if !(self.correlation_length > 0.0) {
            return Err(invalid("correlation_length must be positive"));
        }
        if !(self.kl_threshold > 0.0 && self.kl_threshold <= 1.0) {
            return Err(invalid("kl_threshold must be in (0, 1]"));
        }
        self.rule().map(|_| ())
    }

    pub fn rule(&self) -> Result<QuadratureRule> {
        QuadratureRule::composite_gauss(self.intervals, self.nodes_per_interval)
    }

    /// Closed-form optimum at `x`.
    pub fn sigma_star(&self, x: f64) -> f64 {
        analytic_optimum(self.weight.eval(x))
    }
}

/// Bound and constraint data for a problem plus its objective.
pub struct ProblemSetup {
    pub saa: Option<Arc<SAAProblem>>,
    pub bounds: Bounds,
    pub equalities: LinearEqualities,
    pub initial: DVector<f64>,
    /// Position of the sigma coefficients in the parameter vector.
    pub sigma_offset: usize,
    pub sigma_template: SplineField,
    objective: SharedObjective,
}

impl std::fmt::Debug for ProblemSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSetup")
            .field("saa", &self.saa)
            .field("bounds", &self.bounds)
            .field("equalities", &self.equalities)
            .field("initial", &self.initial)
            .field("sigma_offset", &self.sigma_offset)
            .finish_non_exhaustive()
    }
}

impl ProblemSetup {
    pub fn objective(&self, p: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (self.objective)(p)
    }

    pub fn optimization_spec(&self, tolerances: Tolerances) -> OptimizationSpec<'_> {
        OptimizationSpec::new(|p: &DVector<f64>| self.objective(p), self.initial.clone())
            .with_bounds(self.bounds.clone())
            .with_equalities(self.equalities.clone())
            .with_tolerances(tolerances)
    }

    pub fn n_parameters(&self) -> usize {
        self.initial.len()
    }

    /// The sigma spline encoded in `p`.
    pub fn sigma(&self, p: &DVector<f64>) -> Result<SplineField> {
        let n = self.sigma_template.len();
        self.sigma_template
            .with_coefficients(&p.as_slice()[self.sigma_offset..self.sigma_offset + n])
    }

    /// Rows mapping the full parameter vector to sigma at `points`.
    pub fn sigma_rows(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let b = self.sigma_template.basis_matrix(points)?;
        let mut rows = DMatrix::zeros(points.len(), self.n_parameters());
        rows.view_mut((0, self.sigma_offset), (b.nrows(), b.ncols()))
            .copy_from(&b);
        Ok(rows)
    }
}

type SharedObjective = Arc<dyn Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + Send + Sync>;

fn saa_objective(saa: Arc<SAAProblem>) -> SharedObjective {
    Arc::new(move |p: &DVector<f64>| {
        let est = saa.evaluate(p)?;
        Ok((est.value, est.gradient))
    })
}

/// SAA version of the variance problem with `n_samples` draws from `seed`.
///
/// The expansion is built on the quadrature nodes. Its truncation level is
/// fixed from the initial `sigma` and kept for the whole run.
pub fn build_variance_saa(
    problem: &VarianceProblem,
    seed: u64,
    n_samples: usize,
    method: SensitivityMethod,
) -> Result<ProblemSetup> {
    problem.validate()?;
    if n_samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let rule = problem.rule()?;
    let grid = Grid1D::from_rule(&rule)?;
    let sigma = SplineField::constant(problem.n_sigma, problem.initial_sigma)?;
    let covariance = CovarianceModel::scaled(problem.correlation_length, sigma.clone())?;
    let mean = if problem.n_mean > 0 {
        Some(SplineField::constant(problem.n_mean, 0.0)?)
    } else {
        None
    };
    let field = FieldParameterization {
        grid,
        mean,
        covariance,
        covariance_params: (1..=problem.n_sigma).collect(),
    };
    let offset = field.mean_len();
    let n_params = field.len();
    let cost = InverseSigmaCost {
        template: sigma.clone(),
        rule: rule.clone(),
        sigma_min: problem.sigma_min,
        offset,
        n_params,
    };
    let saa = Arc::new(SAAProblem::with_seed(
        field,
        Box::new(WeightedSquare::new(&problem.weight, &rule)),
        Some(Box::new(cost)),
        method,
        seed,
        n_samples,
        problem.kl_threshold,
    )?);
    let mut lower = DVector::from_element(n_params, f64::NEG_INFINITY);
    lower.rows_mut(offset, problem.n_sigma).fill(problem.sigma_min);
    Ok(ProblemSetup {
        initial: saa.initial_parameters(),
        saa: Some(saa.clone()),
        bounds: Bounds::new(lower, DVector::from_element(n_params, f64::INFINITY))?,
        equalities: LinearEqualities::none(n_params),
        sigma_offset: offset,
        sigma_template: sigma,
        objective: saa_objective(saa),
    })
}

/// Tolerance problem: minimize a surrogate loss `E[integral e^2 w_t]`
/// subject to a fixed total variability `integral sigma = V_b` and
/// `sigma <= sigma_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceProblem {
    pub weight: Weight,
    pub n_sigma: usize,
    pub intervals: usize,
    pub nodes_per_interval: usize,
    pub correlation_length: f64,
    /// Uniform baseline standard deviation.
    pub sigma_base: f64,
    pub budget: f64,
    pub sigma_max: f64,
    /// Lower bound as a fraction of the baseline.
    pub sigma_min_fraction: f64,
    pub kl_threshold: f64,
}

impl Default for ToleranceProblem {
    fn default() -> Self {
        Self {
            weight: Weight::leading_edge(),
            n_sigma: 20,
            intervals: 20,
            nodes_per_interval: 2,
            correlation_length: 0.1,
            sigma_base: 1.0,
            budget: 0.9,
            sigma_max: 0.95,
            sigma_min_fraction: 0.1,
            kl_threshold: PROBLEM_KL_THRESHOLD,
        }
    }
}

impl ToleranceProblem {
    pub fn sigma_min(&self) -> f64 {
        self.sigma_min_fraction * self.sigma_base
    }

    pub fn rule(&self) -> Result<QuadratureRule> {
        QuadratureRule::composite_gauss(self.intervals, self.nodes_per_interval)
    }

    pub fn validate(&self) -> Result<()> {
        self.weight.validate()?;
        if self.n_sigma < 4 {
            return Err(invalid("n_sigma must be at least 4"));
        }
        if !(self.correlation_length > 0.0) {
            return Err(invalid("correlation_length must be positive"));
        }
        if !(self.sigma_base > 0.0) {
            return Err(invalid("sigma_base must be positive"));
        }
        if !(self.sigma_min_fraction > 0.0 && self.sigma_min_fraction < 1.0) {
            return Err(invalid("sigma_min_fraction must be in (0, 1)"));
        }
        if !(self.kl_threshold > 0.0 && self.kl_threshold <= 1.0) {
            return Err(invalid("kl_threshold must be in (0, 1]"));
        }
        self.rule()?;
        // V is the domain average for a uniform field, so these are the
        // budgets reachable inside the bounds
        let base = self.sigma_base;
        if !(self.budget <= base) {
            return Err(invalid(format!(
                "budget {} exceeds the baseline variability {base}",
                self.budget
            )));
        }
        if !(self.sigma_max >= self.sigma_min()) {
            return Err(invalid("sigma_max is below the lower bound"));
        }
        if !(self.budget >= self.sigma_min() && self.budget <= self.sigma_max) {
            return Err(invalid(format!(
                "budget {} is not reachable with sigma in [{}, {}]",
                self.budget,
                self.sigma_min(),
                self.sigma_max
            )));
        }
        Ok(())
    }

    /// Baseline scaled uniformly so that `V = V_b`.
    pub fn uniform_scaling(&self) -> Result<SplineField> {
        let base = SplineField::constant(self.n_sigma, self.sigma_base)?;
        let (v, _) = variability_metric(&base, &self.rule()?)?;
        SplineField::constant(self.n_sigma, self.sigma_base * self.budget / v)
    }

    fn constraints(&self, template: &SplineField) -> Result<(Bounds, LinearEqualities)> {
        let rule = self.rule()?;
        let (_, grad) = variability_metric(template, &rule)?;
        let n = self.n_sigma;
        let bounds = Bounds::new(
            DVector::from_element(n, self.sigma_min()),
            DVector::from_element(n, self.sigma_max),
        )?;
        let eq = LinearEqualities::new(
            DMatrix::from_row_slice(1, n, grad.as_slice()),
            DVector::from_element(1, self.budget),
        )?;
        Ok((bounds, eq))
    }

    /// Unit-variance field model on the quadrature nodes and its truncation level.
    fn unit_expansion(&self) -> Result<crate::kl::KLBasis> {
        let grid = Grid1D::from_rule(&self.rule()?)?;
        let unit = CovarianceModel::squared_exponential(self.correlation_length)?;
        build_kl(&assemble_covariance(&unit, &grid)?, None, self.kl_threshold)
    }
}

/// SAA version of the tolerance problem, using the scaled-field route.
pub fn build_tolerance_saa(problem: &ToleranceProblem, seed: u64, n_samples: usize) -> Result<ProblemSetup> {
    problem.validate()?;
    if n_samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let rule = problem.rule()?;
    let start = problem.uniform_scaling()?;
    let (bounds, equalities) = problem.constraints(&start)?;
    let field = FieldParameterization {
        grid: Grid1D::from_rule(&rule)?,
        mean: None,
        covariance: CovarianceModel::scaled(problem.correlation_length, start.clone())?,
        covariance_params: (1..=problem.n_sigma).collect(),
    };
    let saa = Arc::new(SAAProblem::with_seed(
        field,
        Box::new(WeightedSquare::new(&problem.weight, &rule)),
        None,
        SensitivityMethod::ScaledField,
        seed,
        n_samples,
        problem.kl_threshold,
    )?);
    Ok(ProblemSetup {
        initial: DVector::from_column_slice(start.coefficients()),
        saa: Some(saa.clone()),
        bounds,
        equalities,
        sigma_offset: 0,
        sigma_template: start,
        objective: saa_objective(saa),
    })
}

/// The tolerance problem with the expectation taken exactly:
/// `integral sigma^2 w_t v` with `v` the variance of the truncated
/// unit-variance expansion. No sampling noise.
pub fn build_tolerance_expected(problem: &ToleranceProblem) -> Result<ProblemSetup> {
    problem.validate()?;
    let rule = problem.rule()?;
    let start = problem.uniform_scaling()?;
    let (bounds, equalities) = problem.constraints(&start)?;
    let variance = problem.unit_expansion()?.pointwise_variance();
    let basis = start.basis_matrix(rule.nodes())?;
    let c = DVector::from_fn(rule.len(), |q, _| {
        rule.weights()[q] * problem.weight.eval(rule.nodes()[q]) * variance[q]
    });
    let objective = Arc::new(move |p: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let s = &basis * p;
        let cs = c.component_mul(&s);
        Ok((cs.dot(&s), basis.transpose() * cs * 2.0))
    });
    Ok(ProblemSetup {
        initial: DVector::from_column_slice(start.coefficients()),
        saa: None,
        bounds,
        equalities,
        sigma_offset: 0,
        sigma_template: start,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kl::standard_normal;

    fn rule() -> QuadratureRule {
        QuadratureRule::composite_gauss(20, 2).unwrap()
    }

    #[test]
    fn f1_examples() {
        let r = rule();
        let w: Vec<f64> = r.nodes().iter().map(|&x| Weight::model().eval(x)).collect();
        assert_eq!(f1_per_sample(&vec![0.0; r.len()], &w, &r), 0.0);
        assert!((f1_per_sample(&vec![1.0; r.len()], &w, &r) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn f2_examples() {
        let r = rule();
        let (v1, _) = f2(&SplineField::constant(20, 1.0).unwrap(), &r, 0.2).unwrap();
        let (v2, _) = f2(&SplineField::constant(20, 2.0).unwrap(), &r, 0.2).unwrap();
        assert!((v1 - 1.0).abs() < 1e-14);
        assert!((v2 - 0.5).abs() < 1e-14);
        let low = SplineField::constant(20, 0.1).unwrap();
        assert!(matches!(f2(&low, &r, 0.2), Err(Error::BoundViolation { node: 0, .. })));
    }

    fn random_sigma(seed: u64) -> SplineField {
        SplineField::new((0..20).map(|k| 0.8 + 0.3 * standard_normal(seed, 0, k).tanh()).collect())
            .unwrap()
    }

    fn fd<F: Fn(&SplineField) -> f64>(f: F, s: &SplineField, k: usize, h: f64) -> f64 {
        let mut c = s.coefficients().to_vec();
        c[k] += h;
        let plus = f(&s.with_coefficients(&c).unwrap());
        c[k] -= 2.0 * h;
        let minus = f(&s.with_coefficients(&c).unwrap());
        (plus - minus) / (2.0 * h)
    }

    #[test]
    fn f2_gradient_matches_fd() {
        let r = rule();
        for seed in 0..5 {
            let s = random_sigma(seed);
            let (_, g) = f2(&s, &r, 0.2).unwrap();
            for k in 0..20 {
                let d = fd(|t| f2(t, &r, 0.2).unwrap().0, &s, k, 1e-5);
                assert!((d - g[k]).abs() <= 1e-8 * g[k].abs().max(1e-3), "k={k}");
            }
        }
    }

    #[test]
    fn analytic_optimum_examples() {
        assert!((analytic_optimum(2.0) - 0.629_960_524_947_436_6).abs() < 1e-12);
        assert!((analytic_optimum(3.0) - 0.550_321_208_149_104).abs() < 1e-12);
        assert!((analytic_optimum(1.0) - 0.793_700_525_984_1).abs() < 1e-12);
        let w = Weight::model();
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let (wx, s) = (w.eval(x), analytic_optimum(w.eval(x)));
            assert!((2.0 * s * wx - 1.0 / (s * s)).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_gradient_examples() {
        let r = rule();
        let w = Weight::model();
        let zero = SplineField::constant(20, 0.0).unwrap();
        assert_eq!(analytic_f1_gradient(&zero, &w, &r).unwrap().amax(), 0.0);
        // partition of unity: the coefficient sum is the derivative along sigma = 1
        let one = SplineField::constant(20, 1.0).unwrap();
        let g = analytic_f1_gradient(&one, &w, &r).unwrap();
        assert!((g.sum() - 4.0).abs() < 1e-12);
        let s = random_sigma(9);
        let g = analytic_f1_gradient(&s, &w, &r).unwrap();
        for k in 0..20 {
            let d = fd(|t| exact_f1(t, &w, &r).unwrap(), &s, k, 1e-5);
            assert!((d - g[k]).abs() <= 1e-8 * g[k].abs().max(1e-3));
        }
    }

    #[test]
    fn variability_examples() {
        let r = rule();
        let one = SplineField::constant(20, 1.0).unwrap();
        assert!((variability_metric(&one, &r).unwrap().0 - 1.0).abs() < 1e-14);
        let (s1, s2) = (random_sigma(1), random_sigma(2));
        let (a, b) = (0.7, -1.3);
        let comb: Vec<f64> = s1
            .coefficients()
            .iter()
            .zip(s2.coefficients())
            .map(|(x, y)| a * x + b * y)
            .collect();
        let v = |s: &SplineField| variability_metric(s, &r).unwrap().0;
        let lhs = v(&s1.with_coefficients(&comb).unwrap());
        assert!((lhs - (a * v(&s1) + b * v(&s2))).abs() < 1e-14);
        let (_, g) = variability_metric(&s1, &r).unwrap();
        for k in 0..20 {
            assert!((fd(v, &s1, k, 1e-4) - g[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_sigma_hessian_matches_fd() {
        let r = rule();
        let cost = InverseSigmaCost {
            template: SplineField::constant(20, 1.0).unwrap(),
            rule: r,
            sigma_min: 0.2,
            offset: 0,
            n_params: 20,
        };
        let p = DVector::from_column_slice(random_sigma(4).coefficients());
        let h = cost.hessian(&p).unwrap();
        for k in 0..20 {
            let mut plus = p.clone();
            plus[k] += 1e-5;
            let mut minus = p.clone();
            minus[k] -= 1e-5;
            let col = (cost.value_and_gradient(&plus).unwrap().1
                - cost.value_and_gradient(&minus).unwrap().1)
                / 2e-5;
            assert!((col - h.column(k)).amax() < 1e-6);
        }
    }

    #[test]
    fn weight_validation() {
        assert!(Weight::Sine { offset: 0.5, amplitude: 1.0 }.validate().is_err());
        assert!(Weight::model().validate().is_ok());
        assert!(Weight::leading_edge().validate().is_ok());
    }

    #[test]
    fn tolerance_budget_validation() {
        let ok = ToleranceProblem::default();
        assert!(ok.validate().is_ok());
        let over = ToleranceProblem {
            budget: 1.2,
            ..ToleranceProblem::default()
        };
        assert!(over.validate().is_err());
        let unreachable = ToleranceProblem {
            sigma_max: 0.8,
            ..ToleranceProblem::default()
        };
        assert!(unreachable.validate().is_err());
    }
}
