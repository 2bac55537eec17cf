use nalgebra::{DMatrix, DVector};

/// Curvature fraction below which Powell damping kicks in.
pub const DAMPING_THRESHOLD: f64 = 0.2;

/// Damped BFGS update of a symmetric positive definite Hessian approximation.
///
/// When `s'y < 0.2 s'Hs` the gradient change is replaced by
/// `r = theta y + (1 - theta) H s` with `s'r = 0.2 s'Hs`, which keeps the
/// update positive definite. A zero step leaves `h` unchanged.
pub fn bfgs_update(h: &DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    if s.norm() == 0.0 || !s.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return h.clone();
    }
    let hs = h * s;
    let shs = s.dot(&hs);
    if shs <= 0.0 {
        return h.clone();
    }
    let sy = s.dot(y);
    let r = if sy < DAMPING_THRESHOLD * shs {
        let theta = (1.0 - DAMPING_THRESHOLD) * shs / (shs - sy);
        y * theta + &hs * (1.0 - theta)
    } else {
        y.clone()
    };
    let sr = s.dot(&r);
    let updated = h - &hs * hs.transpose() / shs + &r * r.transpose() / sr;
    (&updated + updated.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sym_eigendecompose;
    use proptest::prelude::*;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |i, j| crate::kl::standard_normal(seed, i, j));
        &m * m.transpose() + DMatrix::identity(n, n) * n as f64
    }

    #[test]
    fn secant_already_satisfied() {
        let h = spd(4, 1);
        let s = DVector::from_vec(vec![0.3, -1.0, 0.2, 0.7]);
        let y = &h * &s;
        assert!((bfgs_update(&h, &s, &y) - &h).amax() < 1e-12);
    }

    #[test]
    fn zero_step_skipped() {
        let h = spd(3, 2);
        let out = bfgs_update(&h, &DVector::zeros(3), &DVector::from_element(3, 1.0));
        assert_eq!(out, h);
    }

    #[test]
    fn recovers_quadratic_hessian_after_conjugate_steps() {
        let n = 5;
        let diag = DVector::from_vec(vec![1.0, 1.5, 2.0, 3.0, 4.5]);
        let rot = sym_eigendecompose(&spd(n, 7)).unwrap().vectors;
        let q = &rot * DMatrix::from_diagonal(&diag) * rot.transpose();
        let q = (&q + q.transpose()) * 0.5;
        // Q-conjugate directions by Gram-Schmidt in the Q inner product
        let mut dirs: Vec<DVector<f64>> = Vec::new();
        for k in 0..n {
            let mut v = DVector::from_fn(n, |i, _| crate::kl::standard_normal(11, k, i));
            for d in &dirs {
                let c = v.dot(&(&q * d)) / d.dot(&(&q * d));
                v -= d * c;
            }
            dirs.push(v);
        }
        let mut h = DMatrix::identity(n, n);
        for s in &dirs {
            h = bfgs_update(&h, s, &(&q * s));
        }
        assert!((&h - &q).amax() < 1e-6, "{}", (&h - &q).amax());
    }

    proptest! {
        #[test]
        fn stays_positive_definite(seed in 0u64..500, scale in -5.0f64..5.0) {
            let n = 4;
            let h = spd(n, seed);
            let s = DVector::from_fn(n, |i, _| crate::kl::standard_normal(seed + 1000, 0, i));
            let mut y = DVector::from_fn(n, |i, _| crate::kl::standard_normal(seed + 2000, 0, i));
            // force a negative curvature pair
            if s.dot(&y) > 0.0 {
                y = -y;
            }
            y *= scale.exp();
            let out = bfgs_update(&h, &s, &y);
            prop_assert!((&out - out.transpose()).amax() < 1e-9);
            let eig = sym_eigendecompose(&out).unwrap();
            prop_assert!(eig.values[n - 1] > 0.0);
        }
    }
}
