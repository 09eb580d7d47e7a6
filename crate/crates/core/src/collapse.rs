//! Posterior-collapse prediction: per-mode thresholds, the curvature of the
//! objective at the origin, and β sweeps.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::{collapse_flags, global_minimum, DecVarMode, Hyperparams, SigmaMode};
use crate::decoder_variance::{solve_decoder_variance, DecVarOptimum, DecVarSolution};
use crate::error::{Error, Result};
use crate::spectrum::DataSpectrum;
use crate::trainer::{eval_loss, ModelParams, Moments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseRegime {
    None,
    Partial,
    Complete,
}

impl CollapseRegime {
    fn from_flags(flags: &[bool]) -> Self {
        if flags.iter().all(|&f| f) {
            CollapseRegime::Complete
        } else if flags.iter().any(|&f| f) {
            CollapseRegime::Partial
        } else {
            CollapseRegime::None
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseReport {
    /// β at which mode `i` collapses, one per singular value of `Z`.
    pub mode_thresholds: Vec<f64>,
    /// Per latent mode at the queried β.
    pub collapse_flags: Vec<bool>,
    pub regime: CollapseRegime,
    pub hessian_psd: bool,
    pub min_hessian_quadratic: f64,
    /// Decoder variance the prediction was made at (`None` when it tends to 0).
    pub decoder_variance: Option<f64>,
    /// Present when the decoder variance is learned.
    pub learned_decoder_variance: Option<DecVarSolution>,
}

/// Collapse prediction. With a fixed decoder variance, mode `i` collapses iff
/// `ζ_i² ≤ β η_dec²`; with a learnable one the optimal variance is solved
/// first and thresholds are the β values where each mode stops surviving.
pub fn predict(sp: &DataSpectrum, hp: &Hyperparams) -> Result<CollapseReport> {
    hp.validate()?;
    if hp.decvar_mode == DecVarMode::Fixed {
        let (hessian_psd, min_hessian_quadratic) = hessian_origin_test(sp, hp);
        let flags = collapse_flags(sp, hp);
        let eta2 = hp.eta_dec * hp.eta_dec;
        return Ok(CollapseReport {
            mode_thresholds: sp.zeta.iter().map(|z| z * z / eta2).collect(),
            regime: CollapseRegime::from_flags(&flags),
            collapse_flags: flags,
            hessian_psd,
            min_hessian_quadratic,
            decoder_variance: Some(eta2),
            learned_decoder_variance: None,
        });
    }

    let sol = solve_decoder_variance(sp, hp)?;
    let flags: Vec<bool> = (0..hp.d1).map(|i| i >= sol.surviving_modes).collect();
    let mut mode_thresholds = sol.thresholds.clone();
    mode_thresholds.resize(sp.d_star(), 0.0);
    let s = match sol.optimum {
        DecVarOptimum::Point { s } => Some(s),
        DecVarOptimum::Interval { hi } => Some(0.5 * hi),
        DecVarOptimum::TendsToZero => None,
    };
    let (hessian_psd, min_hessian_quadratic) = hessian_at(sp, hp.eta_enc, hp.beta * s.unwrap_or(0.0));
    Ok(CollapseReport {
        mode_thresholds,
        regime: CollapseRegime::from_flags(&flags),
        collapse_flags: flags,
        hessian_psd,
        min_hessian_quadratic,
        decoder_variance: s,
        learned_decoder_variance: Some(sol),
    })
}

fn hessian_at(sp: &DataSpectrum, eta_enc: f64, level: f64) -> (bool, f64) {
    let sigma2 = eta_enc * eta_enc;
    let c = level / sigma2;
    let z = sp.zeta_at(0);
    let root = ((sigma2 - c).powi(2) + 4.0 * z * z).sqrt();
    // σ² + c − root, rationalized so its sign is that of β η_dec² − ζ_max²
    let min_q = 4.0 * (level - z * z) / (sigma2 + c + root);
    (min_q >= 0.0, min_q)
}

/// Smallest second directional derivative of the reduced factorization
/// objective at `U = V = 0` over unit directions, with `σ_i = η_enc`:
/// `σ² + ρ − sqrt((σ² − ρ)² + 4 ζ_max²)`. Returns `(psd, min_quadratic)`.
pub fn hessian_origin_test(sp: &DataSpectrum, hp: &Hyperparams) -> (bool, f64) {
    hessian_at(sp, hp.eta_enc, hp.collapse_level())
}

/// Finite-difference curvature of the objective at the origin, in the
/// reduced `(U, V)` coordinates and with `σ_i = η_enc`.
///
/// Samples `n_directions` random unit directions and also the exact minimum
/// over the plane spanned by the top singular pair `(F_1 e_1ᵀ, G_1 e_1ᵀ)`,
/// built from finite differences alone. Returns the smallest value found.
pub fn numeric_hessian_check(sp: &DataSpectrum, hp: &Hyperparams, n_directions: usize, seed: u64) -> Result<f64> {
    hp.validate()?;
    if n_directions == 0 {
        return Err(Error::InvalidHyperparams("need at least one direction".into()));
    }
    let fixed = Hyperparams { sigma_mode: SigmaMode::Fixed, decvar_mode: DecVarMode::Fixed, ..*hp };
    let mom = Moments::from_spectrum(sp);
    let (d2, d0, d1) = (sp.output_dim, sp.rank, hp.d1);
    let sigma = vec![hp.eta_enc; d1];
    let scale = 2.0 * hp.eta_dec * hp.eta_dec;
    let value = |du: &DMatrix<f64>, dv: &DMatrix<f64>, t: f64| -> Result<f64> {
        let p = ModelParams::from_factors(du * t, sp.w_from_v(&(dv * t)), &sigma);
        Ok(scale * eval_loss(&p, &mom, &fixed)?)
    };
    let t = 1e-3;
    let base = value(&DMatrix::zeros(d2, d1), &DMatrix::zeros(d0, d1), 0.0)?;
    let curvature = |du: &DMatrix<f64>, dv: &DMatrix<f64>| -> Result<f64> {
        Ok((value(du, dv, t)? - 2.0 * base + value(du, dv, -t)?) / (t * t))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for _ in 0..n_directions {
        let du = DMatrix::<f64>::from_fn(d2, d1, |_, _| StandardNormal.sample(&mut rng));
        let dv = DMatrix::<f64>::from_fn(d0, d1, |_, _| StandardNormal.sample(&mut rng));
        let norm = (du.norm_squared() + dv.norm_squared()).sqrt();
        best = best.min(curvature(&(du / norm), &(dv / norm))?);
    }

    let mut ua = DMatrix::zeros(d2, d1);
    ua.set_column(0, &sp.f.column(0));
    let mut vb = DMatrix::zeros(d0, d1);
    vb.set_column(0, &sp.g.column(0));
    let zu = DMatrix::zeros(d2, d1);
    let zv = DMatrix::zeros(d0, d1);
    let haa = curvature(&ua, &zv)?;
    let hbb = curvature(&zu, &vb)?;
    let hab = 0.5 * (curvature(&ua, &vb)? - haa - hbb);
    let plane = DMatrix::from_row_slice(2, 2, &[haa, hab, hab, hbb]);
    let plane_min = plane.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    Ok(best.min(plane_min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    /// Minimal objective; with a learned decoder variance this includes
    /// `(d2/2) log s*` and is `-inf` when `s* → 0`.
    pub loss: f64,
    /// Number of surviving latent modes.
    pub rank: usize,
    pub regime: String,
    /// Optimal encoder std devs, sorted descending.
    pub sigma: Vec<f64>,
    pub decoder_variance: Option<f64>,
}

fn sweep_row(sp: &DataSpectrum, hp: &Hyperparams) -> Result<SweepRow> {
    let fixed_row = |hp: &Hyperparams| -> Result<(f64, usize, Vec<f64>)> {
        let gm = global_minimum(sp, hp, None)?;
        let rank = gm.collapse_flags.iter().filter(|&&c| !c).count();
        let mut sigma = gm.sigma;
        sigma.sort_by(|a, b| b.total_cmp(a));
        Ok((gm.predicted_loss, rank, sigma))
    };
    if hp.decvar_mode == DecVarMode::Fixed {
        let (loss, rank, sigma) = fixed_row(hp)?;
        let flags = collapse_flags(sp, hp);
        let regime = match CollapseRegime::from_flags(&flags) {
            CollapseRegime::None => "none",
            CollapseRegime::Partial => "partial",
            CollapseRegime::Complete => "complete",
        };
        return Ok(SweepRow {
            beta: hp.beta,
            loss,
            rank,
            regime: regime.into(),
            sigma,
            decoder_variance: Some(hp.eta_dec * hp.eta_dec),
        });
    }
    let sol = solve_decoder_variance(sp, hp)?;
    let s = match sol.optimum {
        DecVarOptimum::Point { s } => Some(s),
        DecVarOptimum::Interval { hi } => Some(hi),
        DecVarOptimum::TendsToZero => None,
    };
    let (loss, sigma) = match s {
        Some(s) => {
            let at_s = Hyperparams { eta_dec: s.sqrt(), decvar_mode: DecVarMode::Fixed, ..*hp };
            let (loss, _, sigma) = fixed_row(&at_s)?;
            (loss + 0.5 * sp.output_dim as f64 * s.ln(), sigma)
        }
        None => {
            let mut sigma: Vec<f64> =
                (0..hp.d1).map(|i| if i < sol.surviving_modes { 0.0 } else { hp.eta_enc }).collect();
            sigma.sort_by(|a, b| b.total_cmp(a));
            (f64::NEG_INFINITY, sigma)
        }
    };
    Ok(SweepRow {
        beta: hp.beta,
        loss,
        rank: sol.surviving_modes,
        regime: sol.regime.label(),
        sigma,
        decoder_variance: s,
    })
}

/// One row per β of an ascending, strictly positive grid. Rows are computed
/// in parallel.
pub fn beta_sweep(sp: &DataSpectrum, hp: &Hyperparams, betas: &[f64]) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::Domain("β grid is empty".into()));
    }
    if betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::Domain("β grid must be strictly positive".into()));
    }
    if betas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Domain("β grid must be ascending".into()));
    }
    betas
        .par_iter()
        .map(|&beta| sweep_row(sp, &Hyperparams { beta, ..*hp }))
        .collect()
}

/// Regularly spaced grid `lo, lo + step, …` up to `hi` (inclusive within a
/// small tolerance).
pub fn beta_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && step > 0.0) || ![lo, hi, step].iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("invalid β grid {lo}:{hi}:{step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| lo + step * k as f64).collect())
}
