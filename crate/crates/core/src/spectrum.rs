//! Spectral quantities of a dataset: the input second moment `A = E[x xᵀ]`,
//! its positive eigenpairs `(P_A, Φ)`, the whitened cross-moment
//! `Z = E[y x̃ᵀ]` with `x̃ = Φ^{-1/2} P_Aᵀ x`, and the SVD `Z = F Σ_Z Gᵀ`.
//!
//! All expectations are empirical averages over the samples given.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, full_svd, symmetric_eigen_desc};

/// Relative cut used for eigenvalues of `A` and singular values of `Z`.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSpectrum {
    /// Rank of `A`: number of eigenvalues kept (`d0`).
    pub rank: usize,
    /// Ambient input dimension (`D0`).
    pub input_dim: usize,
    /// Target dimension (`d2`).
    pub output_dim: usize,
    /// Eigenvectors of `A` for the kept eigenvalues, `D0 × d0`.
    pub p_a: DMatrix<f64>,
    /// Kept eigenvalues of `A`, non-increasing.
    pub phi: Vec<f64>,
    /// Whitened cross-moment, `d2 × d0`.
    pub z: DMatrix<f64>,
    /// Left singular vectors of `Z`, `d2 × d2` orthogonal.
    pub f: DMatrix<f64>,
    /// Right singular vectors of `Z`, `d0 × d0` orthogonal.
    pub g: DMatrix<f64>,
    /// Singular values of `Z`, `min(d0, d2)` of them, non-increasing. Values
    /// at or below `tol` are stored as exact zeros.
    pub zeta: Vec<f64>,
    /// Number of non-zero `zeta`.
    pub d_hat_star: usize,
    /// Absolute cutoff applied to `zeta`.
    pub tol: f64,
    /// `E‖y‖²`.
    pub y_energy: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveCounts {
    pub d_star: usize,
    pub d_hat_star: usize,
    pub d_hat_1: usize,
}

pub fn compute_spectrum(ds: &Dataset, rel_tol: f64) -> Result<DataSpectrum> {
    let n = ds.n() as f64;
    let mut warnings = Vec::new();
    if !ds.centered {
        warnings.push(
            "dataset is not centered; moments are raw second moments (enable biases or center first)"
                .to_string(),
        );
    }

    let a = ds.x.transpose() * &ds.x / n;
    let (eigvals, eigvecs) = symmetric_eigen_desc(&a);
    let top = eigvals.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return Err(Error::DegenerateInput(
            "input second moment is zero (all eigenvalues vanish)".into(),
        ));
    }
    let cut = rel_tol * top;
    let rank = eigvals.iter().filter(|&&v| v > cut).count();
    let p_a = eigvecs.columns(0, rank).into_owned();
    let phi: Vec<f64> = eigvals.iter().take(rank).copied().collect();

    let inv_root = DVector::from_iterator(rank, phi.iter().map(|v| 1.0 / v.sqrt()));
    let whitened = &ds.x * &p_a * DMatrix::from_diagonal(&inv_root);
    let z = ds.y.transpose() * whitened / n;
    let y_energy = frobenius_sq(&ds.y) / n;

    let spectrum = from_parts(ds.d0(), p_a, phi, z, y_energy, rel_tol, warnings);
    let mut spectrum = spectrum;
    if spectrum.d_hat_star == 0 {
        spectrum
            .warnings
            .push("cross-moment Z vanishes: every singular value is zero".to_string());
    }
    Ok(spectrum)
}

fn from_parts(
    input_dim: usize,
    p_a: DMatrix<f64>,
    phi: Vec<f64>,
    z: DMatrix<f64>,
    y_energy: f64,
    rel_tol: f64,
    warnings: Vec<String>,
) -> DataSpectrum {
    let (f, mut zeta, g) = full_svd(&z);
    let top = zeta.first().copied().unwrap_or(0.0);
    let tol = rel_tol * top;
    for v in zeta.iter_mut() {
        if *v <= tol {
            *v = 0.0;
        }
    }
    let d_hat_star = zeta.iter().filter(|&&v| v > tol).count();
    DataSpectrum {
        rank: phi.len(),
        input_dim,
        output_dim: z.nrows(),
        p_a,
        phi,
        z,
        f,
        g,
        zeta,
        d_hat_star,
        tol,
        y_energy,
        warnings,
    }
}

impl DataSpectrum {
    /// A spectrum with whitened coordinates equal to the ambient ones
    /// (`A = I`, `P_A = I`) and `Z` rectangular-diagonal with the given
    /// singular values. `E‖y‖² = Σζ²`, i.e. `y` is a linear function of `x`.
    pub fn from_singular_values(zeta: &[f64], d0: usize, d2: usize) -> Result<Self> {
        let d_star = d0.min(d2);
        if zeta.len() > d_star {
            return Err(Error::Shape(format!(
                "{} singular values given but min(d0, d2) = {d_star}",
                zeta.len()
            )));
        }
        if zeta.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("singular values must be finite and non-negative".into()));
        }
        if zeta.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Domain("singular values must be non-increasing".into()));
        }
        if d0 == 0 {
            return Err(Error::DegenerateInput("d0 must be at least 1".into()));
        }
        let mut z = DMatrix::zeros(d2, d0);
        for (i, &v) in zeta.iter().enumerate() {
            z[(i, i)] = v;
        }
        let y_energy = zeta.iter().map(|v| v * v).sum();
        Ok(from_parts(
            d0,
            DMatrix::identity(d0, d0),
            vec![1.0; d0],
            z,
            y_energy,
            DEFAULT_REL_TOL,
            Vec::new(),
        ))
    }

    /// `min(d0, d2)`.
    pub fn d_star(&self) -> usize {
        self.zeta.len()
    }

    /// `ζ_i` (0-based) with the convention `ζ_i = 0` beyond `d*`.
    pub fn zeta_at(&self, i: usize) -> f64 {
        self.zeta.get(i).copied().unwrap_or(0.0)
    }

    /// `Σ ζ_i²` over all modes, equal to `‖Z‖²_F`.
    pub fn zeta_energy(&self) -> f64 {
        self.zeta.iter().map(|v| v * v).sum()
    }

    /// `E‖y‖² − ‖Z‖²_F`: target energy no linear map of `x` can explain.
    pub fn unexplained_energy(&self) -> f64 {
        (self.y_energy - self.zeta_energy()).max(0.0)
    }

    /// `V = Φ^{1/2} P_Aᵀ W`.
    pub fn v_from_w(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let root = DVector::from_iterator(self.rank, self.phi.iter().map(|v| v.sqrt()));
        DMatrix::from_diagonal(&root) * self.p_a.transpose() * w
    }

    /// Minimum-norm `W` with `Φ^{1/2} P_Aᵀ W = V`, i.e. `W = P_A Φ^{-1/2} V`.
    pub fn w_from_v(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let inv_root = DVector::from_iterator(self.rank, self.phi.iter().map(|v| 1.0 / v.sqrt()));
        &self.p_a * DMatrix::from_diagonal(&inv_root) * v
    }

    /// Input second moment reconstructed from the kept eigenpairs.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let phi = DVector::from_row_slice(&self.phi);
        &self.p_a * DMatrix::from_diagonal(&phi) * self.p_a.transpose()
    }

    /// Rectangular-diagonal `Σ_Z` (d2×d0).
    pub fn sigma_z(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.output_dim, self.rank);
        for (i, &v) in self.zeta.iter().enumerate() {
            s[(i, i)] = v;
        }
        s
    }
}

pub fn effective_counts(sp: &DataSpectrum, d1: usize) -> EffectiveCounts {
    let nonzero = |v: &&f64| **v > sp.tol;
    EffectiveCounts {
        d_star: sp.d_star(),
        d_hat_star: sp.zeta.iter().filter(nonzero).count(),
        d_hat_1: sp.zeta.iter().take(d1).filter(nonzero).count(),
    }
}
