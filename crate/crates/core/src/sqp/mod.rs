//! SQP with damped BFGS, an l1 merit line search, linear equality
//! constraints and box bounds.
//!
//! Iterates stay feasible: the start is moved onto the constraint set once,
//! and every QP step preserves the linear constraints.

mod bfgs;
mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use bfgs::{bfgs_update, DAMPING_THRESHOLD};
pub use qp::{feasible_point, solve_qp, Bounds, LinearEqualities, QpSolution, BOUND_TOL};

pub const ARMIJO_C1: f64 = 1e-4;
pub const BACKTRACK_FACTOR: f64 = 0.5;
pub const MAX_BACKTRACKS: usize = 40;

/// Objective callback returning value and gradient.
pub type Objective<'a> = Box<dyn FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)> + 'a>;

/// A general constraint `c(p) <= 0` with its gradient. Accepted by the
/// problem description but rejected by [`minimize`].
pub type NonlinearConstraint<'a> = Box<dyn Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)> + 'a>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub kkt_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            step_tol: 1e-10,
            max_iter: 200,
        }
    }
}

pub struct OptimizationSpec<'a> {
    pub objective: Objective<'a>,
    pub equalities: LinearEqualities,
    pub bounds: Bounds,
    pub initial: DVector<f64>,
    pub tolerances: Tolerances,
    pub nonlinear_constraints: Vec<NonlinearConstraint<'a>>,
}

impl<'a> OptimizationSpec<'a> {
    /// Unconstrained problem from `initial`.
    pub fn new(
        objective: impl FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)> + 'a,
        initial: DVector<f64>,
    ) -> Self {
        let n = initial.len();
        Self {
            objective: Box::new(objective),
            equalities: LinearEqualities::none(n),
            bounds: Bounds::unbounded(n),
            initial,
            tolerances: Tolerances::default(),
            nonlinear_constraints: Vec::new(),
        }
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_equalities(mut self, equalities: LinearEqualities) -> Self {
        self.equalities = equalities;
        self
    }

    pub fn with_tolerances(mut self, tolerances: Tolerances) -> Self {
        self.tolerances = tolerances;
        self
    }
}

impl std::fmt::Debug for OptimizationSpec<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OptimizationSpec")
            .field("equalities", &self.equalities)
            .field("bounds", &self.bounds)
            .field("initial", &self.initial)
            .field("tolerances", &self.tolerances)
            .field("nonlinear_constraints", &self.nonlinear_constraints.len())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Converged,
    StepTolerance,
    IterationLimit,
    LineSearchFailure,
}

impl ConvergenceStatus {
    pub fn is_success(self) -> bool {
        matches!(self, Self::Converged | Self::StepTolerance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub f: f64,
    pub step_norm: f64,
    pub kkt: f64,
    pub backtracks: usize,
    pub merit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub solution: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: ConvergenceStatus,
    pub history: Vec<IterationRecord>,
    pub equality_multipliers: DVector<f64>,
    pub lower_multipliers: DVector<f64>,
    pub upper_multipliers: DVector<f64>,
    pub equality_residual: f64,
    pub bound_violation: f64,
}

impl OptimizationResult {
    /// Indices of variables held at a bound at the solution.
    pub fn active_bounds(&self, bounds: &Bounds) -> Vec<usize> {
        (0..self.solution.len())
            .filter(|&i| {
                (self.solution[i] - bounds.lower[i]).abs() <= BOUND_TOL
                    || (bounds.upper[i] - self.solution[i]).abs() <= BOUND_TOL
            })
            .collect()
    }
}

/// `|P(p - g) - p|_inf` with `P` the projection onto the constraint set;
/// zero exactly at first-order KKT points.
pub fn kkt_residual(
    g: &DVector<f64>,
    eq: &LinearEqualities,
    bounds: &Bounds,
    p: &DVector<f64>,
) -> Result<(f64, QpSolution)> {
    let n = p.len();
    let s = solve_qp(&DMatrix::identity(n, n), g, eq, bounds, p)?;
    Ok((s.step.amax(), s))
}

fn initial_scale(f: f64, g: &DVector<f64>) -> f64 {
    (f.abs() / g.norm_squared().max(1.0)).clamp(1e-4, 1e4)
}

/// Minimize the objective. Iteration or line-search exhaustion is a
/// status, not an error.
pub fn minimize(mut spec: OptimizationSpec<'_>) -> Result<OptimizationResult> {
    if !spec.nonlinear_constraints.is_empty() {
        return Err(Error::Unsupported(
            "nonlinear constraints are not supported; only linear equalities and bounds".into(),
        ));
    }
    let n = spec.initial.len();
    if spec.bounds.len() != n || spec.equalities.a.ncols() != n {
        return Err(invalid("constraint dimensions do not match the initial point"));
    }
    if spec.initial.iter().any(|v| !v.is_finite()) {
        return Err(invalid("initial point is not finite"));
    }
    let eq = spec.equalities.clone();
    let bounds = spec.bounds.clone();
    let tol = spec.tolerances;

    let mut p = feasible_point(&eq, &bounds, &spec.initial)?;
    let mut call = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let wrap = |e: Error| Error::CallbackFailure {
            iterate: x.iter().copied().collect(),
            source: Box::new(e),
        };
        let (f, g) = (spec.objective)(x).map_err(wrap)?;
        if !f.is_finite() || g.len() != x.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(wrap(Error::NumericalDomain {
                value: f,
                context: "objective value or gradient is not finite".into(),
            }));
        }
        Ok((f, g))
    };
    let (mut f, mut g) = call(&p)?;
    let mut h = DMatrix::identity(n, n) * initial_scale(f, &g);
    let mut penalty: f64 = 1.0;
    let merit_of = |f: f64, x: &DVector<f64>, penalty: f64| -> f64 {
        if eq.is_empty() {
            f
        } else {
            f + penalty * (&eq.a * x - &eq.b).abs().sum()
        }
    };

    let (mut kkt, mut proj) = kkt_residual(&g, &eq, &bounds, &p)?;
    let mut history = vec![IterationRecord {
        iter: 0,
        f,
        step_norm: 0.0,
        kkt,
        backtracks: 0,
        merit: merit_of(f, &p, penalty),
    }];
    let mut status = ConvergenceStatus::IterationLimit;
    let mut iterations = 0;

    if kkt <= tol.kkt_tol {
        status = ConvergenceStatus::Converged;
    } else {
        for iter in 1..=tol.max_iter {
            iterations = iter;
            let sub = solve_qp(&h, &g, &eq, &bounds, &p)?;
            let d = sub.step.clone();
            if !sub.equality_multipliers.is_empty() {
                penalty = penalty.max(2.0 * sub.equality_multipliers.amax() + 1.0);
            }
            let merit = merit_of(f, &p, penalty);
            let infeas = if eq.is_empty() {
                0.0
            } else {
                (&eq.a * &p - &eq.b).abs().sum()
            };
            let slope = g.dot(&d) - penalty * infeas;

            let mut alpha = 1.0;
            let mut backtracks = 0;
            let mut accepted = None;
            loop {
                let trial = bounds.project(&(&p + &d * alpha));
                let (ft, gt) = call(&trial)?;
                let mt = merit_of(ft, &trial, penalty);
                if mt <= merit + ARMIJO_C1 * alpha * slope {
                    accepted = Some((trial, ft, gt, mt));
                    break;
                }
                if backtracks == MAX_BACKTRACKS {
                    break;
                }
                backtracks += 1;
                alpha *= BACKTRACK_FACTOR;
            }
            let Some((next, f_next, g_next, m_next)) = accepted else {
                history.push(IterationRecord {
                    iter,
                    f,
                    step_norm: 0.0,
                    kkt,
                    backtracks,
                    merit,
                });
                status = ConvergenceStatus::LineSearchFailure;
                break;
            };
            debug_assert!(m_next <= merit);
            let s = &next - &p;
            let y = &g_next - &g;
            h = bfgs_update(&h, &s, &y);
            let step_norm = s.amax();
            p = next;
            f = f_next;
            g = g_next;
            (kkt, proj) = kkt_residual(&g, &eq, &bounds, &p)?;
            history.push(IterationRecord {
                iter,
                f,
                step_norm,
                kkt,
                backtracks,
                merit: m_next,
            });
            if kkt <= tol.kkt_tol {
                status = ConvergenceStatus::Converged;
                break;
            }
            if step_norm <= tol.step_tol * (1.0 + p.amax()) {
                status = ConvergenceStatus::StepTolerance;
                break;
            }
        }
    }

    // multipliers of the first-order conditions at the final point
    let (lower, upper) = (proj.lower_multipliers.clone(), proj.upper_multipliers.clone());
    Ok(OptimizationResult {
        equality_residual: eq.residual(&p),
        bound_violation: bounds.violation(&p),
        solution: p,
        value: f,
        gradient: g,
        kkt_residual: kkt,
        iterations,
        status,
        history,
        equality_multipliers: proj.equality_multipliers,
        lower_multipliers: lower,
        upper_multipliers: upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let spec = OptimizationSpec::new(
            |p: &DVector<f64>| Ok(((p - &c).norm_squared(), (p - &c) * 2.0)),
            DVector::zeros(4),
        );
        let r = minimize(spec).unwrap();
        assert_eq!(r.status, ConvergenceStatus::Converged);
        assert!((&r.solution - &c).amax() < 1e-8);
        assert!(r.iterations <= 30);
    }

    #[test]
    fn constraint_determined() {
        let spec = OptimizationSpec::new(
            |p: &DVector<f64>| Ok((p[0] + p[1], DVector::from_element(2, 1.0))),
            DVector::from_vec(vec![0.0, 0.0]),
        )
        .with_equalities(
            LinearEqualities::new(
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                DVector::from_element(1, 1.0),
            )
            .unwrap(),
        )
        .with_bounds(Bounds::new(DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap());
        let r = minimize(spec).unwrap();
        assert_eq!(r.status, ConvergenceStatus::Converged);
        assert!((r.value - 1.0).abs() < 1e-10);
        assert!(r.equality_residual <= 1e-10);
        assert!(r.bound_violation <= 1e-12);
    }

    fn rosenbrock(p: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (x, y) = (p[0], p[1]);
        let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
        let g = DVector::from_vec(vec![
            -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
            200.0 * (y - x * x),
        ]);
        Ok((f, g))
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let spec = OptimizationSpec::new(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]))
            .with_tolerances(Tolerances {
                kkt_tol: 1e-10,
                ..Tolerances::default()
            });
        let r = minimize(spec).unwrap();
        assert!(r.status.is_success(), "{:?}", r.status);
        assert!((r.solution[0] - 1.0).abs() < 1e-6 && (r.solution[1] - 1.0).abs() < 1e-6);
        // merit never increases across accepted steps
        assert!(r.history.windows(2).all(|w| w[1].merit <= w[0].merit));
    }

    #[test]
    fn bound_constrained_and_deterministic() {
        let run = || {
            let spec = OptimizationSpec::new(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]))
                .with_bounds(
                    Bounds::new(
                        DVector::from_element(2, f64::NEG_INFINITY),
                        DVector::from_vec(vec![0.5, f64::INFINITY]),
                    )
                    .unwrap(),
                );
            minimize(spec).unwrap()
        };
        let a = run();
        assert_eq!(a.status, ConvergenceStatus::Converged);
        assert!((a.solution[0] - 0.5).abs() < 1e-12);
        assert!((a.solution[1] - 0.25).abs() < 1e-6);
        assert!(a.upper_multipliers[0] > 0.0);
        assert_eq!(a, run());
    }

    #[test]
    fn callback_failure_carries_iterate() {
        let spec = OptimizationSpec::new(
            |p: &DVector<f64>| {
                if p[0] > 0.5 {
                    Err(Error::NumericalDomain {
                        value: p[0],
                        context: "test".into(),
                    })
                } else {
                    Ok(((p[0] - 2.0).powi(2), DVector::from_element(1, 2.0 * (p[0] - 2.0))))
                }
            },
            DVector::zeros(1),
        );
        match minimize(spec) {
            Err(Error::CallbackFailure { iterate, .. }) => assert!(iterate[0] > 0.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonlinear_constraints_rejected() {
        let mut spec = OptimizationSpec::new(
            |p: &DVector<f64>| Ok((p[0] * p[0], p * 2.0)),
            DVector::zeros(1),
        );
        spec.nonlinear_constraints.push(Box::new(|p: &DVector<f64>| Ok((p[0], DVector::from_element(1, 1.0)))));
        assert!(matches!(minimize(spec), Err(Error::Unsupported(_))));
    }

    #[test]
    fn iteration_limit_is_a_status() {
        let spec = OptimizationSpec::new(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]))
            .with_tolerances(Tolerances {
                max_iter: 3,
                ..Tolerances::default()
            });
        let r = minimize(spec).unwrap();
        assert_eq!(r.status, ConvergenceStatus::IterationLimit);
        assert_eq!(r.iterations, 3);
    }
}
