//! Oracle-agreement suite: train on random instances from random starts and
//! compare against the closed-form minimum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::{global_minimum, DecVarMode, Hyperparams};
use crate::data::{center, Dataset};
use crate::decoder_variance::{g_loss, solve_decoder_variance, DecVarOptimum};
use crate::error::{Error, Result};
use crate::linalg::random_orthogonal;
use crate::spectrum::{compute_spectrum, DataSpectrum, DEFAULT_REL_TOL};
use crate::trainer::{init_params, product_singular_values, train, Moments, Optimizer, ParamOptions, TrainConfig};

pub const LOSS_TOL: f64 = 1e-4;
pub const FACTOR_TOL: f64 = 1e-3;

/// Relative distance every mode threshold keeps from the drawn β.
pub const THRESHOLD_MARGIN: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct Instance {
    pub dataset: Dataset,
    pub spectrum: DataSpectrum,
    pub hp: Hyperparams,
}

/// A random instance with `d0, d2 ∈ [2, 8]`, `d1` cycling through
/// `{2, d*, d* + 2}` by `index`, unit `η` and β uniform in `[0.5, 10]`
/// (fixed decoder variance).
///
/// β is redrawn until every relevant threshold is at least
/// `THRESHOLD_MARGIN` away (relative). With a learnable decoder variance the
/// targets are noise free and β must give a single optimal variance.
pub fn random_instance(seed: u64, index: usize, decvar: DecVarMode) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let d0 = rng.random_range(2..=8);
    let d2 = rng.random_range(2..=8);
    let d_star = d0.min(d2);
    let d1 = [2, d_star, d_star + 2][index % 3];
    let n = 120;

    let q = random_orthogonal(d0, &mut rng);
    let eig = DVector::from_fn(d0, |_, _| rng.random_range(0.5..2.0));
    let factor = &q * DMatrix::from_diagonal(&eig.map(f64::sqrt));
    let m = DMatrix::from_fn(d2, d0, |_, _| 1.5 * rng.sample::<f64, _>(StandardNormal));
    let x = DMatrix::from_fn(n, d0, |_, _| rng.sample::<f64, _>(StandardNormal)) * factor.transpose();
    let mut y = &x * m.transpose();
    if decvar == DecVarMode::Fixed {
        y += DMatrix::from_fn(n, d2, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    let (dataset, _, _) = center(&Dataset::new(x, y)?);
    let spectrum = compute_spectrum(&dataset, DEFAULT_REL_TOL)?;

    // with a learned decoder variance most of [0.5, 10] is complete collapse,
    // so β is drawn log-uniformly around the survival thresholds instead
    let range = match decvar {
        DecVarMode::Fixed => (0.5f64, 10.0f64),
        DecVarMode::Learnable => {
            let b = solve_decoder_variance(&spectrum, &Hyperparams::new(1.0, d1))?.thresholds;
            match (b.first(), b.last()) {
                (Some(hi), Some(lo)) => (0.3 * lo, 1.5 * hi),
                _ => (0.5, 10.0),
            }
        }
    };
    for _ in 0..10_000 {
        let beta = match decvar {
            DecVarMode::Fixed => rng.random_range(range.0..range.1),
            DecVarMode::Learnable => rng.random_range(range.0.ln()..range.1.ln()).exp(),
        };
        let hp = Hyperparams::new(beta, d1).with_decvar_mode(decvar);
        if well_separated(&spectrum, &hp)? {
            return Ok(Instance { dataset, spectrum, hp });
        }
    }
    Err(Error::DegenerateInput("no β clears every threshold".into()))
}

fn well_separated(sp: &DataSpectrum, hp: &Hyperparams) -> Result<bool> {
    let far = |threshold: f64| (threshold - hp.beta).abs() >= THRESHOLD_MARGIN * hp.beta;
    match hp.decvar_mode {
        DecVarMode::Fixed => Ok((0..hp.d1.min(sp.d_hat_star)).all(|i| far(sp.zeta[i] * sp.zeta[i]))),
        DecVarMode::Learnable => {
            let sol = solve_decoder_variance(sp, hp)?;
            Ok(matches!(sol.optimum, DecVarOptimum::Point { .. }) && sol.thresholds.iter().all(|&b| far(b)))
        }
    }
}

/// The training setup the suite uses.
pub fn oracle_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::Lbfgs,
        learning_rate: 0.1,
        max_steps: 20_000,
        grad_tol: 1e-9,
        seed,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub instance: usize,
    pub d0: usize,
    pub d2: usize,
    pub d1: usize,
    pub beta: f64,
    pub analytic_loss: f64,
    pub trained_loss: f64,
    /// `|trained − analytic| / (1 + |analytic|)`.
    pub loss_error: f64,
    /// Largest gap between singular values of the learned and optimal `U Vᵀ`.
    pub factor_error: f64,
    /// Largest gap between learned and optimal encoder std devs (sorted).
    pub sigma_error: f64,
    /// Relative gap of the learned decoder variance, when it is learned.
    pub decoder_variance_error: Option<f64>,
    pub steps: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub instances: usize,
    pub seed: u64,
    pub decvar: DecVarMode,
    /// Multiplies β on the analytic side only; anything but 1 is a negative
    /// control that must fail.
    pub analytic_beta_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { instances: 20, seed: 0, decvar: DecVarMode::Fixed, analytic_beta_scale: 1.0 }
    }
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn check_instance(cfg: &VerifyConfig, index: usize) -> Result<VerifyRow> {
    let inst = random_instance(cfg.seed, index, cfg.decvar)?;
    let sp = &inst.spectrum;
    let hp = inst.hp;
    let analytic_hp = Hyperparams { beta: hp.beta * cfg.analytic_beta_scale, ..hp };

    let (analytic_loss, eta_dec2) = match hp.decvar_mode {
        DecVarMode::Fixed => (global_minimum(sp, &analytic_hp, None)?.predicted_loss, hp.eta_dec * hp.eta_dec),
        DecVarMode::Learnable => {
            let sol = solve_decoder_variance(sp, &analytic_hp)?;
            let s = sol.s_star().ok_or_else(|| Error::DegenerateInput("no single optimal decoder variance".into()))?;
            (g_loss(sp, &analytic_hp, s)?, s)
        }
    };
    let at_s = Hyperparams { eta_dec: eta_dec2.sqrt(), decvar_mode: DecVarMode::Fixed, ..analytic_hp };
    let gm = global_minimum(sp, &at_s, None)?;

    let mom = Moments::from_dataset(&inst.dataset);
    let init = init_params(sp.input_dim, sp.output_dim, &hp, ParamOptions::for_hyperparams(&hp), cfg.seed.wrapping_add(index as u64));
    let result = train(&init, &mom, &hp, &oracle_train_config(cfg.seed))?;

    let loss_error = (result.final_loss - analytic_loss).abs() / (1.0 + analytic_loss.abs());
    let want: Vec<f64> = gm.lambda.iter().zip(&gm.theta).map(|(l, t)| l * t).collect();
    let factor_error = max_abs_gap(&sorted_desc(want), &product_singular_values(&result.params, sp));
    let sigma_error = max_abs_gap(
        &sorted_desc(gm.sigma.clone()),
        &sorted_desc(result.params.sigma_bar(&mom)),
    );
    let decoder_variance_error = result.params.log_s.map(|l| (l.exp() - eta_dec2).abs() / eta_dec2);

    let mut failures = Vec::new();
    if loss_error > LOSS_TOL {
        failures.push(format!("loss off by {loss_error:.2e}"));
    }
    if factor_error > FACTOR_TOL {
        failures.push(format!("factors off by {factor_error:.2e}"));
    }
    if sigma_error > FACTOR_TOL {
        failures.push(format!("sigma off by {sigma_error:.2e}"));
    }
    if let Some(e) = decoder_variance_error.filter(|&e| e > FACTOR_TOL) {
        failures.push(format!("decoder variance off by {e:.2e}"));
    }
    Ok(VerifyRow {
        instance: index,
        d0: sp.input_dim,
        d2: sp.output_dim,
        d1: hp.d1,
        beta: hp.beta,
        analytic_loss,
        trained_loss: result.final_loss,
        loss_error,
        factor_error,
        sigma_error,
        decoder_variance_error,
        steps: result.steps,
        passed: failures.is_empty(),
        failure: (!failures.is_empty()).then(|| failures.join("; ")),
    })
}

/// Run the suite. Errors inside an instance (including divergence) become
/// failed rows.
pub fn run_verification(cfg: &VerifyConfig) -> Vec<VerifyRow> {
    (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            check_instance(cfg, i).unwrap_or_else(|e| VerifyRow {
                instance: i,
                d0: 0,
                d2: 0,
                d1: 0,
                beta: f64::NAN,
                analytic_loss: f64::NAN,
                trained_loss: f64::NAN,
                loss_error: f64::NAN,
                factor_error: f64::NAN,
                sigma_error: f64::NAN,
                decoder_variance_error: None,
                steps: 0,
                passed: false,
                failure: Some(e.to_string()),
            })
        })
        .collect()
}
