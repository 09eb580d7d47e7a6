//! Exact global minima of the linear latent-variable objective
//!
//! ```text
//! L(U, W, Σ) = 1/(2η_dec²) [ E‖U Wᵀx − y‖² + Tr(U Σ Uᵀ) + β η_dec²/η_enc² Tr(Wᵀ A W) ]
//!              + Σ_i β/2 (σ_i²/η_enc² − 1 − log σ_i²/η_enc²)
//! ```
//!
//! With `V = Φ^{1/2} P_Aᵀ W` the data-dependent part becomes the regularized
//! factorization `‖U Vᵀ − Z‖² + Tr(U Σ Uᵀ) + ρ ‖V‖²` (ρ = β η_dec²/η_enc²),
//! whose minimizer is a soft threshold of the singular values of `Z`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;
use crate::spectrum::DataSpectrum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// `σ_i = η_enc` for every latent dimension.
    Fixed,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecVarMode {
    Fixed,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub beta: f64,
    pub eta_enc: f64,
    pub eta_dec: f64,
    /// Latent dimension `d1`.
    pub d1: usize,
    pub sigma_mode: SigmaMode,
    pub decvar_mode: DecVarMode,
}

impl Hyperparams {
    pub fn new(beta: f64, d1: usize) -> Self {
        Hyperparams {
            beta,
            eta_enc: 1.0,
            eta_dec: 1.0,
            d1,
            sigma_mode: SigmaMode::Learnable,
            decvar_mode: DecVarMode::Fixed,
        }
    }

    pub fn with_etas(mut self, eta_enc: f64, eta_dec: f64) -> Self {
        self.eta_enc = eta_enc;
        self.eta_dec = eta_dec;
        self
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self
    }

    pub fn with_decvar_mode(mut self, mode: DecVarMode) -> Self {
        self.decvar_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("eta_enc", self.eta_enc), ("eta_dec", self.eta_dec)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidHyperparams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.d1 == 0 {
            return Err(Error::InvalidHyperparams("d1 must be at least 1".into()));
        }
        Ok(())
    }

    /// `β η_dec²`: the level every `ζ_i²` is compared against.
    pub fn collapse_level(&self) -> f64 {
        self.beta * self.eta_dec * self.eta_dec
    }

    /// Ridge coefficient `β η_dec² / η_enc²` on `V`.
    pub fn ridge(&self) -> f64 {
        self.collapse_level() / (self.eta_enc * self.eta_enc)
    }
}

/// Singular values `λ_i` of `U*` and `θ_i` of `V*`, one per latent dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
}

impl Factors {
    /// Singular values of `U* V*ᵀ`.
    pub fn products(&self) -> Vec<f64> {
        self.lambda.iter().zip(&self.theta).map(|(l, t)| l * t).collect()
    }
}

/// The reduced factorization problem for a fixed diagonal encoder variance.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub z: DMatrix<f64>,
    /// Diagonal of `Σ` (variances `σ_i²`).
    pub sigma_sq: Vec<f64>,
    pub ridge: f64,
}

impl ReducedProblem {
    /// `‖U Vᵀ − Z‖² + Tr(U Σ Uᵀ) + ρ ‖V‖²`.
    pub fn value(&self, u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
        let fit = frobenius_sq(&(u * v.transpose() - &self.z));
        let noise: f64 = u
            .column_iter()
            .zip(&self.sigma_sq)
            .map(|(c, s)| s * c.norm_squared())
            .sum();
        fit + noise + self.ridge * frobenius_sq(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalMinimum {
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
    /// Encoder standard deviations `σ_i*` (all `η_enc` in fixed-σ mode).
    pub sigma: Vec<f64>,
    /// `U* = F Λ P`, `d2 × d1`.
    pub u: DMatrix<f64>,
    /// Minimum-norm `W*` with `Φ^{1/2} P_Aᵀ W* = G Θ P`, `D0 × d1`.
    pub w: DMatrix<f64>,
    /// Value of the full objective at the minimum, including the
    /// `E‖y‖² − ‖Z‖²` energy that no linear model explains.
    pub predicted_loss: f64,
    /// `true` where latent mode `i` has collapsed (`λ_i = θ_i = 0`).
    pub collapse_flags: Vec<bool>,
}

fn check_sigma(hp: &Hyperparams, sigma: &[f64]) -> Result<()> {
    if sigma.len() != hp.d1 {
        return Err(Error::Shape(format!("expected {} encoder std devs, got {}", hp.d1, sigma.len())));
    }
    if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Domain(format!("encoder std devs must be positive, got {bad}")));
    }
    Ok(())
}

pub fn reduce_to_factorization(
    sp: &DataSpectrum,
    hp: &Hyperparams,
    sigma: &[f64],
) -> Result<ReducedProblem> {
    hp.validate()?;
    check_sigma(hp, sigma)?;
    Ok(ReducedProblem {
        z: sp.z.clone(),
        sigma_sq: sigma.iter().map(|s| s * s).collect(),
        ridge: hp.ridge(),
    })
}

/// Optimal `(λ, θ)` of the reduced problem for given encoder std devs.
/// Mode `i` pairs `ζ_i` with `σ_i`; `ζ_i = 0` past `min(d0, d2)`.
pub fn optimal_factors_given_sigma(
    sp: &DataSpectrum,
    hp: &Hyperparams,
    sigma: &[f64],
) -> Result<Factors> {
    hp.validate()?;
    check_sigma(hp, sigma)?;
    let k = hp.beta.sqrt() * hp.eta_dec / hp.eta_enc;
    let mut lambda = Vec::with_capacity(hp.d1);
    let mut theta = Vec::with_capacity(hp.d1);
    for (i, &s) in sigma.iter().enumerate() {
        let gap = sp.zeta_at(i) - k * s;
        if gap > 0.0 {
            lambda.push((k / s * gap).sqrt());
            theta.push((s / k * gap).sqrt());
        } else {
            lambda.push(0.0);
            theta.push(0.0);
        }
    }
    Ok(Factors { lambda, theta })
}

/// Optimal factors when the encoder variance is pinned to the prior,
/// `σ_i = η_enc`.
pub fn fixed_sigma_factors(sp: &DataSpectrum, hp: &Hyperparams) -> Result<Factors> {
    optimal_factors_given_sigma(sp, hp, &vec![hp.eta_enc; hp.d1])
}

/// Optimal encoder std devs: `√β η_dec η_enc / ζ_i` while `β η_dec² < ζ_i²`,
/// otherwise the prior value `η_enc` (this includes every `ζ_i = 0` mode).
pub fn optimal_sigma(sp: &DataSpectrum, hp: &Hyperparams) -> Result<Vec<f64>> {
    hp.validate()?;
    let level = hp.collapse_level();
    Ok((0..hp.d1)
        .map(|i| {
            let z = sp.zeta_at(i);
            if level < z * z {
                hp.beta.sqrt() * hp.eta_dec * hp.eta_enc / z
            } else {
                hp.eta_enc
            }
        })
        .collect())
}

/// Per-latent-mode collapse predicate `ζ_i² ≤ β η_dec²`. Equality counts as
/// collapsed.
pub fn collapse_flags(sp: &DataSpectrum, hp: &Hyperparams) -> Vec<bool> {
    let level = hp.collapse_level();
    (0..hp.d1)
        .map(|i| {
            let z = sp.zeta_at(i);
            z * z <= level
        })
        .collect()
}

fn learnable_sigma_factors(sp: &DataSpectrum, hp: &Hyperparams) -> Factors {
    let level = hp.collapse_level();
    let mut lambda = Vec::with_capacity(hp.d1);
    let mut theta = Vec::with_capacity(hp.d1);
    for i in 0..hp.d1 {
        let z = sp.zeta_at(i);
        let excess = z * z - level;
        if z > 0.0 && excess > 0.0 {
            let root = excess.sqrt();
            lambda.push(root / hp.eta_enc);
            theta.push(hp.eta_enc / z * root);
        } else {
            lambda.push(0.0);
            theta.push(0.0);
        }
    }
    Factors { lambda, theta }
}

/// Closed-form global minimum for a fixed decoder variance.
///
/// `p` is the free orthogonal `d1 × d1` factor (identity when `None`). With a
/// learnable σ the loss is invariant only under `P` that commute with
/// `diag(σ*)`; any other `P` moves the point off the minimum.
pub fn global_minimum(
    sp: &DataSpectrum,
    hp: &Hyperparams,
    p: Option<&DMatrix<f64>>,
) -> Result<GlobalMinimum> {
    hp.validate()?;
    if hp.decvar_mode == DecVarMode::Learnable {
        return Err(Error::InvalidHyperparams(
            "global_minimum needs a fixed decoder variance; solve for it first".into(),
        ));
    }
    let d1 = hp.d1;
    if let Some(p) = p {
        if p.shape() != (d1, d1) {
            return Err(Error::Shape(format!("P must be {d1}x{d1}, got {:?}", p.shape())));
        }
    }

    let (factors, sigma, reduced_min) = match hp.sigma_mode {
        SigmaMode::Fixed => {
            let sigma = vec![hp.eta_enc; d1];
            let factors = fixed_sigma_factors(sp, hp)?;
            let value = min_factorization_value(sp, hp, &sigma)?;
            (factors, sigma, value / (2.0 * hp.eta_dec * hp.eta_dec))
        }
        SigmaMode::Learnable => (
            learnable_sigma_factors(sp, hp),
            optimal_sigma(sp, hp)?,
            min_vae_value(sp, hp)?,
        ),
    };

    let d2 = sp.output_dim;
    let d0 = sp.rank;
    let mut lam = DMatrix::zeros(d2, d1);
    for i in 0..d2.min(d1) {
        lam[(i, i)] = factors.lambda[i];
    }
    let mut th = DMatrix::zeros(d0, d1);
    for i in 0..d0.min(d1) {
        th[(i, i)] = factors.theta[i];
    }
    let identity = DMatrix::identity(d1, d1);
    let p = p.unwrap_or(&identity);
    let u = &sp.f * lam * p;
    let w = sp.w_from_v(&(&sp.g * th * p));

    let predicted_loss =
        reduced_min + sp.unexplained_energy() / (2.0 * hp.eta_dec * hp.eta_dec);
    Ok(GlobalMinimum {
        lambda: factors.lambda,
        theta: factors.theta,
        sigma,
        u,
        w,
        predicted_loss,
        collapse_flags: collapse_flags(sp, hp),
    })
}

/// `min_{U,V}` of the reduced factorization for fixed encoder std devs.
pub fn min_factorization_value(sp: &DataSpectrum, hp: &Hyperparams, sigma: &[f64]) -> Result<f64> {
    hp.validate()?;
    check_sigma(hp, sigma)?;
    let k = hp.beta.sqrt() * hp.eta_dec / hp.eta_enc;
    let mut total = 0.0;
    for (i, &s) in sigma.iter().enumerate() {
        let z = sp.zeta_at(i);
        let shrink = k * s;
        total += if z > shrink {
            // ζ² − (ζ − kσ)², written without the cancellation
            shrink * (2.0 * z - shrink)
        } else {
            z * z
        };
    }
    total += sp.zeta.iter().skip(hp.d1).map(|z| z * z).sum::<f64>();
    Ok(total)
}

/// Minimal objective over `(U, W, Σ)` for a fixed decoder variance, not
/// counting the `E‖y‖² − ‖Z‖²` energy outside the reach of any linear model.
pub fn min_vae_value(sp: &DataSpectrum, hp: &Hyperparams) -> Result<f64> {
    hp.validate()?;
    let level = hp.collapse_level();
    let mut total = sp.zeta_energy();
    for i in 0..hp.d1.min(sp.d_star()) {
        let z2 = sp.zeta[i] * sp.zeta[i];
        if z2 > level {
            let r = level / z2;
            total -= z2 * (1.0 + r * (r.ln() - 1.0));
        }
    }
    Ok(total / (2.0 * hp.eta_dec * hp.eta_dec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_spectrum(zeta: &[f64]) -> DataSpectrum {
        DataSpectrum::from_singular_values(zeta, zeta.len(), zeta.len()).unwrap()
    }

    #[test]
    fn ridge_is_one_for_unit_hyperparams() {
        let hp = Hyperparams::new(1.0, 2).with_sigma_mode(SigmaMode::Fixed);
        let sp = diag_spectrum(&[2.0, 1.0]);
        let red = reduce_to_factorization(&sp, &hp, &[1.0, 1.0]).unwrap();
        assert_eq!(red.ridge, 1.0);
    }

    #[test]
    fn zero_target_collapses_everything() {
        let sp = diag_spectrum(&[0.0, 0.0, 0.0]);
        let hp = Hyperparams::new(0.5, 3);
        let f = optimal_factors_given_sigma(&sp, &hp, &[1.0; 3]).unwrap();
        assert!(f.lambda.iter().chain(&f.theta).all(|&v| v == 0.0));
        let gm = global_minimum(&sp, &hp, None).unwrap();
        assert!(gm.u.iter().chain(gm.w.iter()).all(|&v| v == 0.0));
        assert_eq!(min_factorization_value(&sp, &hp, &[1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn unit_instance_factors() {
        let sp = diag_spectrum(&[2.0]);
        let hp = Hyperparams::new(1.0, 1);
        let f = optimal_factors_given_sigma(&sp, &hp, &[1.0]).unwrap();
        assert!((f.lambda[0] - 1.0).abs() < 1e-15);
        assert!((f.theta[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn modes_past_d_star_are_zero() {
        let sp = diag_spectrum(&[3.0, 2.0]);
        let hp = Hyperparams::new(0.1, 4);
        let f = fixed_sigma_factors(&sp, &hp).unwrap();
        assert_eq!(&f.lambda[2..], &[0.0, 0.0]);
        assert_eq!(&f.theta[2..], &[0.0, 0.0]);
        assert!(f.lambda[1] > 0.0);
    }

    #[test]
    fn fixed_sigma_two_mode_example() {
        let sp = diag_spectrum(&[3.0, 1.0]);
        let hp = Hyperparams::new(4.0, 2);
        let f = fixed_sigma_factors(&sp, &hp).unwrap();
        assert!((f.lambda[0] - 2f64.sqrt()).abs() < 1e-14);
        assert!((f.theta[0] - 0.5f64.sqrt()).abs() < 1e-14);
        assert_eq!((f.lambda[1], f.theta[1]), (0.0, 0.0));
    }

    #[test]
    fn complete_collapse_when_top_mode_below_level() {
        let sp = diag_spectrum(&[1.5, 1.0]);
        let hp = Hyperparams::new(2.25, 2).with_sigma_mode(SigmaMode::Fixed);
        let f = fixed_sigma_factors(&sp, &hp).unwrap();
        assert!(f.lambda.iter().all(|&v| v == 0.0));
        let gm = global_minimum(&sp, &hp.with_sigma_mode(SigmaMode::Learnable), None).unwrap();
        assert!(gm.collapse_flags.iter().all(|&c| c));
        assert!(gm.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma_branches() {
        let sp = diag_spectrum(&[2.0, 0.5]);
        let hp = Hyperparams::new(1.0, 3);
        let s = optimal_sigma(&sp, &hp).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert_eq!(s[1], 1.0);
        assert_eq!(s[2], 1.0);
    }

    #[test]
    fn boundary_counts_as_collapsed() {
        let sp = diag_spectrum(&[2.0]);
        let hp = Hyperparams::new(4.0, 1);
        assert_eq!(collapse_flags(&sp, &hp), vec![true]);
        let gm = global_minimum(&sp, &hp, None).unwrap();
        assert_eq!(gm.lambda[0], 0.0);
    }

    #[test]
    fn complete_collapse_value() {
        let sp = diag_spectrum(&[1.0, 0.5]);
        let hp = Hyperparams::new(3.0, 2).with_etas(1.0, 2.0);
        let v = min_vae_value(&sp, &hp).unwrap();
        assert!((v - 1.25 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparams() {
        let sp = diag_spectrum(&[1.0]);
        assert!(optimal_sigma(&sp, &Hyperparams::new(0.0, 1)).is_err());
        assert!(optimal_sigma(&sp, &Hyperparams::new(1.0, 0)).is_err());
        assert!(optimal_factors_given_sigma(&sp, &Hyperparams::new(1.0, 1), &[0.0]).is_err());
    }
}
