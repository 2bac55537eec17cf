//! Dense convex QP with linear equalities and box bounds, solved by a
//! primal active-set method on the bounds with the equalities eliminated
//! through a null-space basis.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::numerics::{min_norm_solve, null_space};

/// Feasibility slack on bounds.
pub const BOUND_TOL: f64 = 1e-12;

const PHASE1_MAX_ITER: usize = 100_000;

/// Linear equality constraints `a x = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEqualities {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearEqualities {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(invalid(format!(
                "{} constraint rows but {} right-hand sides",
                a.nrows(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn none(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// `max |a x - b|`.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (&self.a * x - &self.b).amax()
    }
}

/// Box bounds; infinite entries mean no bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(invalid("lower and upper bounds differ in length"));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i]) || lower[i].is_nan()) {
            return Err(invalid(format!(
                "bound {i}: lower {} exceeds upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    /// Largest bound violation of `x`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (0..x.len())
            .map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    fn shifted(&self, p: &DVector<f64>) -> Self {
        Self {
            lower: &self.lower - p,
            upper: &self.upper - p,
        }
    }
}

/// Step and multipliers of a QP subproblem.
///
/// At the solution `H d + g + A' nu - mu_lower + mu_upper = 0` with
/// `mu_lower, mu_upper >= 0` and complementary to the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub step: DVector<f64>,
    pub equality_multipliers: DVector<f64>,
    pub lower_multipliers: DVector<f64>,
    pub upper_multipliers: DVector<f64>,
    pub iterations: usize,
}

impl QpSolution {
    /// Stationarity residual `|H d + g + A' nu - mu_l + mu_u|_inf`.
    pub fn stationarity(&self, h: &DMatrix<f64>, g: &DVector<f64>, eq: &LinearEqualities) -> f64 {
        let mut r = h * &self.step + g - &self.lower_multipliers + &self.upper_multipliers;
        if !eq.is_empty() {
            r += eq.a.transpose() * &self.equality_multipliers;
        }
        r.amax()
    }
}

/// A point satisfying `eq` and `bounds`, found by Dykstra's alternating
/// projections from `start` followed by an exact equality correction on
/// the variables away from their bounds.
pub fn feasible_point(
    eq: &LinearEqualities,
    bounds: &Bounds,
    start: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = bounds.len();
    if start.len() != n || eq.a.ncols() != n {
        return Err(invalid("constraint dimensions do not match the variables"));
    }
    let mut x = bounds.project(start);
    if eq.is_empty() {
        return Ok(x);
    }
    let scale = 1.0 + eq.b.amax();
    let least = min_norm_solve(&eq.a, &eq.b)?;
    if eq.residual(&least) > 1e-10 * scale {
        return Err(Error::InfeasibleSubproblem(
            "linear equality constraints are inconsistent".into(),
        ));
    }
    if eq.residual(&x) <= 1e-12 * scale {
        return Ok(x);
    }
    let pinv = eq
        .a
        .clone()
        .pseudo_inverse(1e-12 * eq.a.amax().max(f64::MIN_POSITIVE))
        .map_err(|e| invalid(e.to_string()))?;
    let project_affine = |v: &DVector<f64>| v - &pinv * (&eq.a * v - &eq.b);
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    let mut y = x.clone();
    for _ in 0..PHASE1_MAX_ITER {
        let y_next = project_affine(&(&x + &p));
        p = &x + &p - &y_next;
        let x_next = bounds.project(&(&y_next + &q));
        q = &y_next + &q - &x_next;
        let change = (&x_next - &x).amax().max((&y_next - &y).amax());
        x = x_next;
        y = y_next;
        if change <= 1e-15 * (1.0 + x.amax()) {
            break;
        }
    }
    // exact correction on the free variables
    let free: Vec<usize> = (0..n)
        .filter(|&i| x[i] > bounds.lower[i] + BOUND_TOL && x[i] < bounds.upper[i] - BOUND_TOL)
        .collect();
    if !free.is_empty() {
        let af = DMatrix::from_fn(eq.len(), free.len(), |r, c| eq.a[(r, free[c])]);
        let delta = min_norm_solve(&af, &(&eq.b - &eq.a * &x))?;
        for (c, &i) in free.iter().enumerate() {
            x[i] += delta[c];
        }
    }
    if eq.residual(&x) > 1e-10 * scale || bounds.violation(&x) > BOUND_TOL {
        return Err(Error::InfeasibleSubproblem(format!(
            "no point satisfies the equalities within the bounds (residual {:e}, bound violation {:e})",
            eq.residual(&x),
            bounds.violation(&x)
        )));
    }
    Ok(bounds.project(&x))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Fixed {
    Free,
    Lower,
    Upper,
}

/// Minimize `0.5 d'Hd + g'd` subject to `A d = b - A p` and
/// `lower <= p + d <= upper`.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq: &LinearEqualities,
    bounds: &Bounds,
    p: &DVector<f64>,
) -> Result<QpSolution> {
    let n = g.len();
    if h.shape() != (n, n) || p.len() != n || bounds.len() != n || eq.a.ncols() != n {
        return Err(invalid("QP dimensions are inconsistent"));
    }
    let rhs = if eq.is_empty() {
        DVector::zeros(0)
    } else {
        &eq.b - &eq.a * p
    };
    let shifted_eq = LinearEqualities {
        a: eq.a.clone(),
        b: rhs,
    };
    let box_d = bounds.shifted(p);
    let mut d = feasible_point(&shifted_eq, &box_d, &DVector::zeros(n))?;

    let mut state: Vec<Fixed> = (0..n)
        .map(|i| {
            if box_d.lower[i] == box_d.upper[i] || d[i] <= box_d.lower[i] {
                Fixed::Lower
            } else if d[i] >= box_d.upper[i] {
                Fixed::Upper
            } else {
                Fixed::Free
            }
        })
        .collect();

    let scale = 1.0 + h.amax() + g.amax();
    let max_iter = 20 * (n + eq.len()) + 100;
    // set after a full unblocked step: d minimizes over the current working set
    let mut stationary = false;
    for iteration in 1..=max_iter {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == Fixed::Free).collect();
        let grad = h * &d + g;
        let af = DMatrix::from_fn(eq.len(), free.len(), |r, c| eq.a[(r, free[c])]);
        let z = null_space(&af)?;
        let mut delta = DVector::zeros(n);
        if z.ncols() > 0 && !stationary {
            let hff = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
            let gf = DVector::from_fn(free.len(), |r, _| grad[free[r]]);
            let reduced = z.transpose() * &hff * &z;
            let reduced = (&reduced + reduced.transpose()) * 0.5;
            let chol = reduced.cholesky().ok_or_else(|| {
                invalid("QP Hessian is not positive definite on the feasible subspace")
            })?;
            let u = chol.solve(&(-(z.transpose() * gf)));
            let df = &z * u;
            for (c, &i) in free.iter().enumerate() {
                delta[i] = df[c];
            }
        }

        if stationary || delta.amax() <= 1e-14 * (1.0 + d.amax()) {
            stationary = false;
            // multipliers from the free rows
            let gf = DVector::from_fn(free.len(), |r, _| grad[free[r]]);
            let nu = if eq.is_empty() {
                DVector::zeros(0)
            } else {
                min_norm_solve(&af.transpose(), &(-gf))?
            };
            let mut r = grad.clone();
            if !eq.is_empty() {
                r += eq.a.transpose() * &nu;
            }
            let mut lower = DVector::zeros(n);
            let mut upper = DVector::zeros(n);
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let mu = match state[i] {
                    Fixed::Free => continue,
                    Fixed::Lower => {
                        lower[i] = r[i];
                        r[i]
                    }
                    Fixed::Upper => {
                        upper[i] = -r[i];
                        -r[i]
                    }
                };
                let pinned = box_d.lower[i] == box_d.upper[i];
                if !pinned && mu < -1e-12 * scale && worst.is_none_or(|(_, m)| mu < m) {
                    worst = Some((i, mu));
                }
            }
            match worst {
                Some((i, _)) => state[i] = Fixed::Free,
                None => {
                    // pinned variables take whichever sign the residual has
                    for i in 0..n {
                        if box_d.lower[i] == box_d.upper[i] && lower[i] < 0.0 {
                            upper[i] = -lower[i];
                            lower[i] = 0.0;
                        }
                    }
                    return Ok(QpSolution {
                        step: d,
                        equality_multipliers: nu,
                        lower_multipliers: lower,
                        upper_multipliers: upper,
                        iterations: iteration,
                    });
                }
            }
            continue;
        }

        // ratio test
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Fixed)> = None;
        for &i in &free {
            if delta[i] < 0.0 && box_d.lower[i].is_finite() {
                let t = (box_d.lower[i] - d[i]) / delta[i];
                if t < alpha {
                    alpha = t.max(0.0);
                    blocking = Some((i, Fixed::Lower));
                }
            } else if delta[i] > 0.0 && box_d.upper[i].is_finite() {
                let t = (box_d.upper[i] - d[i]) / delta[i];
                if t < alpha {
                    alpha = t.max(0.0);
                    blocking = Some((i, Fixed::Upper));
                }
            }
        }
        d.axpy(alpha, &delta, 1.0);
        if let Some((i, side)) = blocking {
            d[i] = if side == Fixed::Lower {
                box_d.lower[i]
            } else {
                box_d.upper[i]
            };
            state[i] = side;
        } else {
            stationary = true;
        }
    }
    Err(Error::InfeasibleSubproblem(format!(
        "active-set QP did not terminate in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kl::standard_normal;
    use proptest::prelude::*;

    #[test]
    fn unconstrained_newton_step() {
        let n = 3;
        let mut g = DVector::zeros(n);
        g[0] = -1.0;
        let s = solve_qp(
            &DMatrix::identity(n, n),
            &g,
            &LinearEqualities::none(n),
            &Bounds::unbounded(n),
            &DVector::zeros(n),
        )
        .unwrap();
        assert!((s.step[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.step[1], 0.0);
    }

    #[test]
    fn equality_projection() {
        let n = 3;
        let eq = LinearEqualities::new(
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        let s = solve_qp(
            &DMatrix::identity(n, n),
            &DVector::zeros(n),
            &eq,
            &Bounds::unbounded(n),
            &DVector::zeros(n),
        )
        .unwrap();
        assert!((&s.step - DVector::from_vec(vec![2.0, 0.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn inconsistent_equalities() {
        let eq = LinearEqualities::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        let r = solve_qp(
            &DMatrix::identity(2, 2),
            &DVector::zeros(2),
            &eq,
            &Bounds::unbounded(2),
            &DVector::zeros(2),
        );
        assert!(matches!(r, Err(Error::InfeasibleSubproblem(_))));
    }

    #[test]
    fn budget_outside_box_is_infeasible() {
        let eq = LinearEqualities::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 3.0),
        )
        .unwrap();
        let bounds = Bounds::new(DVector::zeros(2), DVector::from_element(2, 1.0)).unwrap();
        assert!(matches!(
            feasible_point(&eq, &bounds, &DVector::zeros(2)),
            Err(Error::InfeasibleSubproblem(_))
        ));
    }

    #[test]
    fn active_bound() {
        // min 0.5|d|^2 - 2 d_0 with d_0 <= 1
        let bounds = Bounds::new(
            DVector::from_element(2, f64::NEG_INFINITY),
            DVector::from_vec(vec![1.0, f64::INFINITY]),
        )
        .unwrap();
        let g = DVector::from_vec(vec![-2.0, 0.0]);
        let h = DMatrix::identity(2, 2);
        let eq = LinearEqualities::none(2);
        let s = solve_qp(&h, &g, &eq, &bounds, &DVector::zeros(2)).unwrap();
        assert!((s.step[0] - 1.0).abs() < 1e-15);
        assert!((s.upper_multipliers[0] - 1.0).abs() < 1e-12);
        assert!(s.stationarity(&h, &g, &eq) < 1e-12);
    }

    fn random_problem(seed: u64, n: usize, m: usize) -> (DMatrix<f64>, DVector<f64>, LinearEqualities, Bounds, DVector<f64>) {
        let r = |a: usize, b: usize| standard_normal(seed, a, b);
        let f = DMatrix::from_fn(n, n, r);
        let h = &f * f.transpose() + DMatrix::identity(n, n);
        let g = DVector::from_fn(n, |i, _| 3.0 * r(100, i));
        let p = DVector::from_fn(n, |i, _| r(200, i));
        let lower = DVector::from_fn(n, |i, _| p[i] - 0.5 - r(300, i).abs());
        let upper = DVector::from_fn(n, |i, _| p[i] + 0.5 + r(400, i).abs());
        let a = DMatrix::from_fn(m, n, |i, j| r(500 + i, j));
        // rhs keeps p + d = p feasible
        let b = &a * &p;
        (h, g, LinearEqualities::new(a, b).unwrap(), Bounds::new(lower, upper).unwrap(), p)
    }

    fn kkt_residual(
        s: &QpSolution,
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        eq: &LinearEqualities,
        bounds: &Bounds,
        p: &DVector<f64>,
    ) -> f64 {
        let x = p + &s.step;
        let mut worst = s.stationarity(h, g, eq);
        worst = worst.max(eq.residual(&x)).max(bounds.violation(&x));
        for i in 0..x.len() {
            worst = worst.max(-s.lower_multipliers[i]).max(-s.upper_multipliers[i]);
            worst = worst.max((s.lower_multipliers[i] * (x[i] - bounds.lower[i])).abs());
            worst = worst.max((s.upper_multipliers[i] * (bounds.upper[i] - x[i])).abs());
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_feasible_problems_satisfy_kkt(seed in 0u64..10_000, n in 2usize..8, m in 0usize..3) {
            let m = m.min(n - 1);
            let (h, g, eq, bounds, p) = random_problem(seed, n, m);
            let s = solve_qp(&h, &g, &eq, &bounds, &p).unwrap();
            let res = kkt_residual(&s, &h, &g, &eq, &bounds, &p);
            prop_assert!(res <= 1e-8, "KKT residual {res:e}");
        }
    }
}
