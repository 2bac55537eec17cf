//! Truncated Karhunen-Loeve expansions built with the Nystrom method, and
//! field realizations from fixed standard normal draws.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::numerics::{sym_eigendecompose, SplineField, SymEigen};
use crate::randomfield::{CovarianceMatrix, Grid1D};

/// Negative eigenvalues down to this fraction of the largest are rounding
/// noise and are clamped to zero.
pub const PSD_FLOOR_RELATIVE: f64 = 1e-10;

/// Default retained-scatter threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.99;

/// Eigenpairs of the weight-symmetrized covariance `W^1/2 C W^1/2`,
/// non-negative and in descending order, with a fixed sign convention.
#[derive(Debug, Clone)]
pub struct NystromSpectrum {
    eig: SymEigen,
    sqrt_weights: DVector<f64>,
}

impl NystromSpectrum {
    pub fn new(cov: &CovarianceMatrix) -> Result<Self> {
        let grid = cov.grid();
        let sqrt_weights = DVector::from_iterator(grid.len(), grid.weights().iter().map(|w| w.sqrt()));
        let a = symmetrize(cov.entries(), &sqrt_weights);
        let mut eig = sym_eigendecompose(&a)?;
        let top = eig.values.get(0).copied().unwrap_or(0.0);
        let floor = PSD_FLOOR_RELATIVE * top.max(0.0);
        for v in eig.values.iter_mut() {
            if *v < 0.0 {
                if *v < -floor {
                    return Err(Error::NotPositiveSemidefinite {
                        eigenvalue: *v,
                        floor,
                    });
                }
                *v = 0.0;
            }
        }
        if top <= 0.0 {
            return Err(Error::DegenerateCovariance);
        }
        let mut spectrum = Self { eig, sqrt_weights };
        spectrum.fix_signs();
        Ok(spectrum)
    }

    /// Make the largest-magnitude grid value of every mode positive.
    fn fix_signs(&mut self) {
        let n = self.sqrt_weights.len();
        for k in 0..self.eig.len() {
            let mut best = 0;
            let mut best_abs = -1.0;
            for i in 0..n {
                let a = (self.eig.vectors[(i, k)] / self.sqrt_weights[i]).abs();
                if a > best_abs {
                    best_abs = a;
                    best = i;
                }
            }
            if self.eig.vectors[(best, k)] < 0.0 {
                self.eig.vectors.column_mut(k).neg_mut();
            }
        }
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eig
    }

    pub fn sqrt_weights(&self) -> &DVector<f64> {
        &self.sqrt_weights
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eig.values
    }

    pub fn total(&self) -> f64 {
        self.eig.values.sum()
    }

    /// `S_k` for `k = 1..=n`.
    pub fn partial_scatter(&self) -> Vec<f64> {
        partial_scatter(self.eig.values.as_slice())
    }

    /// Smallest `k` whose partial scatter reaches `threshold`.
    pub fn truncation_for(&self, threshold: f64) -> usize {
        let s = self.partial_scatter();
        s.iter()
            .position(|&v| v + 1e-15 >= threshold)
            .map_or(s.len(), |k| k + 1)
    }

    /// Mode `k` on the grid, orthonormal under the quadrature inner product.
    pub fn mode(&self, k: usize) -> DVector<f64> {
        self.eig.vectors.column(k).component_div(&self.sqrt_weights)
    }

    /// Flip modes so each is closest to the corresponding reference mode.
    pub fn align_to(&mut self, reference: &DMatrix<f64>) -> Result<()> {
        let k = reference.ncols().min(self.eig.len());
        let aligned = crate::sensitivity::align_signs(
            &reference.columns(0, k).into_owned(),
            &self.eig.vectors.columns(0, k).into_owned(),
        )?;
        self.eig.vectors.columns_mut(0, k).copy_from(&aligned);
        Ok(())
    }
}

fn symmetrize(c: &DMatrix<f64>, sqrt_w: &DVector<f64>) -> DMatrix<f64> {
    let n = c.nrows();
    let mut a = c.clone();
    for j in 0..n {
        for i in 0..n {
            a[(i, j)] *= sqrt_w[i] * sqrt_w[j];
        }
    }
    a
}

/// Weight-symmetrized form of any grid matrix, `W^1/2 M W^1/2`.
pub fn symmetrize_weighted(m: &DMatrix<f64>, grid: &Grid1D) -> DMatrix<f64> {
    let sqrt_w = DVector::from_iterator(grid.len(), grid.weights().iter().map(|w| w.sqrt()));
    symmetrize(m, &sqrt_w)
}

/// `S_k = sum_{i<=k} lambda_i / sum_i lambda_i` for every `k`.
pub fn partial_scatter(eigenvalues: &[f64]) -> Vec<f64> {
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    eigenvalues
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect()
}

/// A truncated K-L expansion on a grid.
#[derive(Debug, Clone)]
pub struct KLBasis {
    grid: Grid1D,
    spectrum: NystromSpectrum,
    eigenvalues: DVector<f64>,
    modes: DMatrix<f64>,
    mean: DVector<f64>,
    truncation_level: usize,
    partial_scatter: f64,
}

fn mean_on_grid(mean: Option<&SplineField>, grid: &Grid1D) -> Result<DVector<f64>> {
    match mean {
        Some(m) => Ok(DVector::from_vec(m.eval_many(grid.points())?)),
        None => Ok(DVector::zeros(grid.len())),
    }
}

/// Expansion truncated at the smallest level whose partial scatter reaches `threshold`.
pub fn build_kl(cov: &CovarianceMatrix, mean: Option<&SplineField>, threshold: f64) -> Result<KLBasis> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid(format!("scatter threshold must be in (0, 1], got {threshold}")));
    }
    let spectrum = NystromSpectrum::new(cov)?;
    let k = spectrum.truncation_for(threshold);
    KLBasis::from_spectrum(spectrum, mean_on_grid(mean, cov.grid())?, k, cov.grid().clone())
}

/// Expansion with a fixed number of retained modes.
pub fn build_kl_with_modes(
    cov: &CovarianceMatrix,
    mean: Option<&SplineField>,
    n_modes: usize,
) -> Result<KLBasis> {
    let spectrum = NystromSpectrum::new(cov)?;
    KLBasis::from_spectrum(spectrum, mean_on_grid(mean, cov.grid())?, n_modes, cov.grid().clone())
}

impl KLBasis {
    pub fn from_spectrum(
        spectrum: NystromSpectrum,
        mean: DVector<f64>,
        n_modes: usize,
        grid: Grid1D,
    ) -> Result<Self> {
        let n = grid.len();
        if n_modes == 0 || n_modes > n {
            return Err(invalid(format!(
                "number of modes must be in 1..={n}, got {n_modes}"
            )));
        }
        if mean.len() != n {
            return Err(invalid("mean field does not match the grid"));
        }
        let eigenvalues = spectrum.eigenvalues().rows(0, n_modes).into_owned();
        let mut modes = DMatrix::zeros(n, n_modes);
        for k in 0..n_modes {
            modes.set_column(k, &spectrum.mode(k));
        }
        let partial_scatter = spectrum.partial_scatter()[n_modes - 1];
        Ok(Self {
            grid,
            spectrum,
            eigenvalues,
            modes,
            mean,
            truncation_level: n_modes,
            partial_scatter,
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn spectrum(&self) -> &NystromSpectrum {
        &self.spectrum
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Retained modes as columns, on the grid.
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn truncation_level(&self) -> usize {
        self.truncation_level
    }

    pub fn partial_scatter(&self) -> f64 {
        self.partial_scatter
    }

    /// Pointwise variance of the truncated field, `sum_i lambda_i phi_i(x)^2`.
    pub fn pointwise_variance(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.grid.len());
        for k in 0..self.truncation_level {
            let phi = self.modes.column(k);
            v += phi.component_mul(&phi) * self.eigenvalues[k];
        }
        v
    }
}

/// Fixed `N x N_KL` matrix of standard normal draws.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationSet {
    draws: DMatrix<f64>,
    seed: Option<u64>,
}

impl RealizationSet {
    /// Wrap explicit draws (no seed).
    pub fn from_draws(draws: DMatrix<f64>) -> Result<Self> {
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(invalid("draws must be finite"));
        }
        Ok(Self { draws, seed: None })
    }

    pub fn draws(&self) -> &DMatrix<f64> {
        &self.draws
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn n_samples(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.draws.ncols()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in (0, 1) keyed by (seed, sample, mode).
fn counter_uniform(seed: u64, sample: u64, mode: u64) -> f64 {
    let mut h = mix64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    h = mix64(h ^ sample.wrapping_mul(0xD1B5_4A32_D192_ED03));
    h = mix64(h ^ mode.wrapping_mul(0xABC9_8388_FB8F_AC03));
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal draw `(sample, mode)` of the stream identified by `seed`.
pub fn standard_normal(seed: u64, sample: usize, mode: usize) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf(counter_uniform(seed, sample as u64, mode as u64))
}

pub fn draw_realizations(seed: u64, n_samples: usize, n_modes: usize) -> Result<RealizationSet> {
    if n_samples == 0 || n_modes == 0 {
        return Err(invalid(format!(
            "need at least one sample and one mode, got {n_samples} x {n_modes}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|n| (0..n_modes).map(|i| standard_normal(seed, n, i)).collect())
        .collect();
    let draws = DMatrix::from_fn(n_samples, n_modes, |n, i| rows[n][i]);
    Ok(RealizationSet {
        draws,
        seed: Some(seed),
    })
}

/// Realizations `mean + sum_i sqrt(lambda_i) phi_i xi_{n,i}`, one row per sample.
pub fn sample_paths(basis: &KLBasis, draws: &RealizationSet) -> Result<DMatrix<f64>> {
    if draws.n_modes() != basis.truncation_level() {
        return Err(invalid(format!(
            "draws have {} modes but the expansion keeps {}",
            draws.n_modes(),
            basis.truncation_level()
        )));
    }
    let scaled = scaled_modes(basis);
    let mut paths = draws.draws() * scaled.transpose();
    for mut row in paths.row_iter_mut() {
        row += basis.mean().transpose();
    }
    Ok(paths)
}

/// Modes multiplied by `sqrt(lambda_i)`.
pub fn scaled_modes(basis: &KLBasis) -> DMatrix<f64> {
    let mut m = basis.modes().clone();
    for k in 0..basis.truncation_level() {
        let s = basis.eigenvalues()[k].sqrt();
        m.column_mut(k).scale_mut(s);
    }
    m
}
