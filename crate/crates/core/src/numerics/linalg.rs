//! Dense symmetric eigendecomposition and spectral helpers.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Relative symmetry tolerance accepted by [`sym_eigendecompose`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalue gaps below this fraction of the largest eigenvalue magnitude
/// are treated as collisions.
pub const GAP_FLOOR_RELATIVE: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
/// Column `i` of `vectors` belongs to `values[i]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest eigenvalue magnitude.
    pub fn scale(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn gap_floor(&self) -> f64 {
        GAP_FLOOR_RELATIVE * self.scale()
    }
}

pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(invalid(format!(
            "matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some(v) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalDomain {
            value: *v,
            context: "in symmetric matrix".into(),
        });
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if d > SYMMETRY_TOL * scale {
                return Err(invalid(format!(
                    "matrix is not symmetric: entries ({i},{j}) and ({j},{i}) differ by {d:e}"
                )));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn sym_eigendecompose(m: &DMatrix<f64>) -> Result<SymEigen> {
    check_symmetric(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    // symmetrize exactly so the solver sees one triangle's values
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    Ok(SymEigen { values, vectors })
}

/// Action of `(M - lambda_i I)^+` on `v`, i.e.
/// `sum_{j != i} phi_j (phi_j^T v) / (lambda_j - lambda_i)`.
pub fn spectral_pseudoinverse_apply(
    eig: &SymEigen,
    i: usize,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = eig.len();
    if i >= n {
        return Err(invalid(format!("mode index {i} out of range for {n} modes")));
    }
    if v.len() != eig.vectors.nrows() {
        return Err(invalid(format!(
            "vector has length {}, expected {}",
            v.len(),
            eig.vectors.nrows()
        )));
    }
    let floor = eig.gap_floor();
    let li = eig.values[i];
    let mut out = DVector::zeros(v.len());
    for j in 0..n {
        if j == i {
            continue;
        }
        let gap = eig.values[j] - li;
        if gap.abs() <= floor {
            return Err(Error::DegenerateEigenvalue {
                i: i.min(j),
                j: i.max(j),
                gap: gap.abs(),
                floor,
            });
        }
        let phi = eig.vectors.column(j);
        let c = phi.dot(v) / gap;
        out.axpy(c, &phi, 1.0);
    }
    Ok(out)
}

/// Orthonormal basis (columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let gram = a.transpose() * a;
    let eig = sym_eigendecompose(&gram)?;
    let tol = 1e-10 * eig.scale().max(f64::MIN_POSITIVE);
    let cols: Vec<usize> = (0..n).filter(|&k| eig.values[k] <= tol).collect();
    let mut z = DMatrix::zeros(n, cols.len());
    for (c, &k) in cols.iter().enumerate() {
        z.set_column(c, &eig.vectors.column(k));
    }
    Ok(z)
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(a.ncols()));
    }
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(b, eps).map_err(|e| invalid(e.to_string()))
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Mean computed in a canonical order (sorted, then pairwise summation), so
/// the result does not depend on the input order or on thread scheduling.
pub fn ordered_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    pairwise_sum(&sorted) / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = DMatrix::from_fn(n, n, |_, _| next());
        &a + a.transpose()
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eigendecompose(&DMatrix::identity(3, 3)).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn diagonal_crossing_example_ordering() {
        let p: f64 = 2.0;
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![p, p * p]));
        let e = sym_eigendecompose(&m).unwrap();
        assert_eq!(e.values.as_slice(), &[4.0, 2.0]);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_orthonormal_and_reconstruction() {
        let m = random_symmetric(8, 3);
        let e = sym_eigendecompose(&m).unwrap();
        let gram = e.vectors.transpose() * &e.vectors;
        assert!((gram - DMatrix::identity(8, 8)).amax() < 1e-10);
        let rec = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
        assert!((rec - &m).norm() <= 1e-10 * m.norm());
        for w in e.values.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn rejects_nonsymmetric() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 2)] = 0.1;
        assert!(matches!(
            sym_eigendecompose(&m),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pseudoinverse_annihilates_own_mode() {
        let e = sym_eigendecompose(&random_symmetric(6, 11)).unwrap();
        let v = e.vectors.column(2).into_owned();
        let r = spectral_pseudoinverse_apply(&e, 2, &v).unwrap();
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn pseudoinverse_diagonal_example() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0]));
        let e = sym_eigendecompose(&m).unwrap();
        let r = spectral_pseudoinverse_apply(&e, 0, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(r[0].abs() < 1e-15);
        assert!((r[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn pseudoinverse_range_and_residual() {
        let m = random_symmetric(6, 5);
        let e = sym_eigendecompose(&m).unwrap();
        let v = DVector::from_fn(6, |i, _| (i as f64 * 0.7).cos());
        for i in 0..6 {
            let r = spectral_pseudoinverse_apply(&e, i, &v).unwrap();
            let phi = e.vectors.column(i);
            assert!(phi.dot(&r).abs() < 1e-10);
            let lhs = (&m - DMatrix::identity(6, 6) * e.values[i]) * &r;
            let rhs = &v - phi * phi.dot(&v);
            assert!((lhs - &rhs).norm() <= 1e-8 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn pseudoinverse_reports_collision() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.5]));
        let e = sym_eigendecompose(&m).unwrap();
        let err = spectral_pseudoinverse_apply(&e, 0, &DVector::from_element(3, 1.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateEigenvalue { i: 0, j: 1, .. }));
    }

    #[test]
    fn null_space_of_single_row() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let z = null_space(&a).unwrap();
        assert_eq!(z.ncols(), 2);
        assert!((&a * &z).amax() < 1e-12);
    }

    #[test]
    fn ordered_mean_examples() {
        assert_eq!(ordered_mean(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(ordered_mean(&[0.3; 17]), pairwise_sum(&[0.3; 17]) / 17.0);
    }

    proptest! {
        #[test]
        fn ordered_mean_is_permutation_invariant(
            mut v in proptest::collection::vec(-1e6f64..1e6, 1..200),
            seed in any::<u64>(),
        ) {
            let a = ordered_mean(&v);
            // deterministic shuffle
            let mut s = seed | 1;
            for i in (1..v.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                v.swap(i, (s % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(a.to_bits(), ordered_mean(&v).to_bits());
        }

        #[test]
        fn reconstruction_residual(seed in any::<u64>(), n in 2usize..24) {
            let m = random_symmetric(n, seed);
            let e = sym_eigendecompose(&m).unwrap();
            for i in 0..n {
                let phi = e.vectors.column(i);
                let r = &m * phi - phi * e.values[i];
                prop_assert!(r.norm() <= 1e-10 * e.scale().max(1e-300));
            }
        }
    }
}
