//! Gradient-based minimization of the exact expected objective.
//!
//! The expectation over the encoder noise is taken in closed form, so losses
//! and gradients are deterministic functions of the data moments. A Monte
//! Carlo estimator over `(x, ε)` is provided for cross-checking.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::closed_form::{Hyperparams, SigmaMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::spectrum::DataSpectrum;

/// First and second moments of `(x, y)` plus, optionally, the samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Moments {
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    /// `E[x xᵀ]` (raw, not centered).
    pub a: DMatrix<f64>,
    /// `E[y xᵀ]`.
    pub b: DMatrix<f64>,
    /// `E‖y‖²`.
    pub y_energy: f64,
    pub samples: Option<Dataset>,
}

impl Moments {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let n = ds.n() as f64;
        Moments {
            mean_x: DVector::from_iterator(ds.d0(), ds.x.column_iter().map(|c| c.sum() / n)),
            mean_y: DVector::from_iterator(ds.d2(), ds.y.column_iter().map(|c| c.sum() / n)),
            a: ds.x.transpose() * &ds.x / n,
            b: ds.y.transpose() * &ds.x / n,
            y_energy: ds.y.norm_squared() / n,
            samples: Some(ds.clone()),
        }
    }

    /// Zero-mean moments consistent with a spectrum: `A = P_A Φ P_Aᵀ`,
    /// `E[y xᵀ] = Z Φ^{1/2} P_Aᵀ`.
    pub fn from_spectrum(sp: &DataSpectrum) -> Self {
        let root = DVector::from_iterator(sp.rank, sp.phi.iter().map(|v| v.sqrt()));
        Moments {
            mean_x: DVector::zeros(sp.input_dim),
            mean_y: DVector::zeros(sp.output_dim),
            a: sp.second_moment(),
            b: &sp.z * DMatrix::from_diagonal(&root) * sp.p_a.transpose(),
            y_energy: sp.y_energy,
            samples: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.b.nrows()
    }
}

/// Encoder covariance `Σ(x) = diag(σ_i(x)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderVariance {
    /// Constant `σ_i = exp(log_sigma_i)`.
    Diagonal { log_sigma: DVector<f64> },
    /// `σ_i(x) = |C_i x + f_i|`.
    DataDependent { c: DMatrix<f64>, f: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Decoder, `d2 × d1`.
    pub u: DMatrix<f64>,
    /// Encoder, `D0 × d1`.
    pub w: DMatrix<f64>,
    pub variance: EncoderVariance,
    pub b_e: Option<DVector<f64>>,
    pub b_d: Option<DVector<f64>>,
    /// Log decoder variance when it is learned.
    pub log_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamOptions {
    pub bias: bool,
    pub data_dependent_variance: bool,
    pub learnable_decoder_variance: bool,
}

impl ParamOptions {
    pub fn for_hyperparams(hp: &Hyperparams) -> Self {
        ParamOptions {
            learnable_decoder_variance: hp.decvar_mode == crate::closed_form::DecVarMode::Learnable,
            ..Default::default()
        }
    }
}

/// Random initialization: entries uniform in `[-0.1, 0.1]`, `log σ = 0`
/// (or `log η_enc` when σ is fixed), `f = 1`, `log s = 0`.
pub fn init_params(
    input_dim: usize,
    output_dim: usize,
    hp: &Hyperparams,
    opts: ParamOptions,
    seed: u64,
) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = hp.d1;
    let mut uniform = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-0.1..=0.1));
    let u = uniform(output_dim, d1);
    let w = uniform(input_dim, d1);
    let variance = if opts.data_dependent_variance {
        EncoderVariance::DataDependent { c: uniform(d1, input_dim), f: DVector::from_element(d1, 1.0) }
    } else {
        let init = match hp.sigma_mode {
            SigmaMode::Fixed => hp.eta_enc.ln(),
            SigmaMode::Learnable => 0.0,
        };
        EncoderVariance::Diagonal { log_sigma: DVector::from_element(d1, init) }
    };
    let (b_e, b_d) = if opts.bias {
        (Some(uniform(d1, 1).column(0).into_owned()), Some(uniform(output_dim, 1).column(0).into_owned()))
    } else {
        (None, None)
    };
    ModelParams {
        u,
        w,
        variance,
        b_e,
        b_d,
        log_s: opts.learnable_decoder_variance.then_some(0.0),
    }
}

impl ModelParams {
    /// Parameters with the given `U`, `W` and constant `σ`, no biases.
    pub fn from_factors(u: DMatrix<f64>, w: DMatrix<f64>, sigma: &[f64]) -> Self {
        ModelParams {
            u,
            w,
            variance: EncoderVariance::Diagonal {
                log_sigma: DVector::from_iterator(sigma.len(), sigma.iter().map(|s| s.ln())),
            },
            b_e: None,
            b_d: None,
            log_s: None,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.u.ncols()
    }

    /// Constant encoder std devs, if the variance is not data dependent.
    pub fn sigma(&self) -> Option<Vec<f64>> {
        match &self.variance {
            EncoderVariance::Diagonal { log_sigma } => Some(log_sigma.iter().map(|v| v.exp()).collect()),
            EncoderVariance::DataDependent { .. } => None,
        }
    }

    pub fn decoder_variance(&self, hp: &Hyperparams) -> f64 {
        match self.log_s {
            Some(l) => l.exp(),
            None => hp.eta_dec * hp.eta_dec,
        }
    }

    /// `sqrt(E_x σ_i(x)²)` per latent mode.
    pub fn sigma_bar(&self, mom: &Moments) -> Vec<f64> {
        match &self.variance {
            EncoderVariance::Diagonal { log_sigma } => log_sigma.iter().map(|v| v.exp()).collect(),
            EncoderVariance::DataDependent { c, f } => {
                ddv_second_moments(c, f, mom).into_iter().map(f64::sqrt).collect()
            }
        }
    }

    /// All parameters flattened in a fixed order (column-major matrices).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.u.iter().chain(self.w.iter()).copied().collect();
        match &self.variance {
            EncoderVariance::Diagonal { log_sigma } => out.extend(log_sigma.iter()),
            EncoderVariance::DataDependent { c, f } => {
                out.extend(c.iter());
                out.extend(f.iter());
            }
        }
        for b in [&self.b_e, &self.b_d].into_iter().flatten() {
            out.extend(b.iter());
        }
        out.extend(self.log_s);
        out
    }

    /// A copy of `self` with values taken from `v` (same layout as `to_vec`).
    pub fn with_values(&self, v: &[f64]) -> ModelParams {
        let mut it = v.iter().copied();
        let mut take = |r: usize, c: usize| DMatrix::from_iterator(r, c, it.by_ref().take(r * c));
        let u = take(self.u.nrows(), self.u.ncols());
        let w = take(self.w.nrows(), self.w.ncols());
        let variance = match &self.variance {
            EncoderVariance::Diagonal { log_sigma } => EncoderVariance::Diagonal {
                log_sigma: take(log_sigma.len(), 1).column(0).into_owned(),
            },
            EncoderVariance::DataDependent { c, f } => EncoderVariance::DataDependent {
                c: take(c.nrows(), c.ncols()),
                f: take(f.len(), 1).column(0).into_owned(),
            },
        };
        let b_e = self.b_e.as_ref().map(|b| take(b.len(), 1).column(0).into_owned());
        let b_d = self.b_d.as_ref().map(|b| take(b.len(), 1).column(0).into_owned());
        let log_s = self.log_s.map(|_| take(1, 1)[(0, 0)]);
        ModelParams { u, w, variance, b_e, b_d, log_s }
    }

    fn check_shapes(&self, mom: &Moments) -> Result<()> {
        let d1 = self.latent_dim();
        let (d0, d2) = (mom.input_dim(), mom.output_dim());
        let mut ok = self.u.nrows() == d2 && self.w.shape() == (d0, d1);
        ok &= match &self.variance {
            EncoderVariance::Diagonal { log_sigma } => log_sigma.len() == d1,
            EncoderVariance::DataDependent { c, f } => c.shape() == (d1, d0) && f.len() == d1,
        };
        ok &= self.b_e.as_ref().is_none_or(|b| b.len() == d1);
        ok &= self.b_d.as_ref().is_none_or(|b| b.len() == d2);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "parameters do not match data with input dim {d0} and output dim {d2}"
            )))
        }
    }
}

fn ddv_second_moments(c: &DMatrix<f64>, f: &DVector<f64>, mom: &Moments) -> Vec<f64> {
    let ca = c * &mom.a;
    let cmu = c * &mom.mean_x;
    (0..c.nrows())
        .map(|i| ca.row(i).dot(&c.row(i)) + 2.0 * f[i] * cmu[i] + f[i] * f[i])
        .collect()
}

/// `E_x log σ_i(x)²` and its gradients `(E[x/t_i], E[1/t_i])` with
/// `t_i = C_i x + f_i`.
struct LogVarianceStats {
    mean_log: Vec<f64>,
    grad_c: DMatrix<f64>,
    grad_f: Vec<f64>,
}

fn ddv_log_stats(c: &DMatrix<f64>, f: &DVector<f64>, mom: &Moments) -> Result<LogVarianceStats> {
    let d1 = c.nrows();
    let d0 = c.ncols();
    let Some(ds) = &mom.samples else {
        if c.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidHyperparams(
                "a data-dependent encoder variance needs the samples, not just moments".into(),
            ));
        }
        if let Some(mode) = f.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateVariance { sample: 0, mode });
        }
        let mut grad_c = DMatrix::zeros(d1, d0);
        for i in 0..d1 {
            grad_c.set_row(i, &(mom.mean_x.transpose() / f[i]));
        }
        return Ok(LogVarianceStats {
            mean_log: f.iter().map(|v| (v * v).ln()).collect(),
            grad_c,
            grad_f: f.iter().map(|v| 1.0 / v).collect(),
        });
    };
    let n = ds.n() as f64;
    let t = &ds.x * c.transpose() + DMatrix::from_fn(ds.n(), d1, |_, i| f[i]);
    let mut mean_log = vec![0.0; d1];
    let mut inv = DMatrix::zeros(ds.n(), d1);
    for ((j, i), &v) in t.iter().enumerate().map(|(k, v)| ((k % ds.n(), k / ds.n()), v)) {
        if v == 0.0 {
            return Err(Error::DegenerateVariance { sample: j, mode: i });
        }
        mean_log[i] += (v * v).ln() / n;
        inv[(j, i)] = 1.0 / v;
    }
    let grad_c = inv.transpose() * &ds.x / n;
    let grad_f = inv.column_iter().map(|c| c.sum() / n).collect();
    Ok(LogVarianceStats { mean_log, grad_c, grad_f })
}

fn evaluate(p: &ModelParams, mom: &Moments, hp: &Hyperparams, want_grad: bool) -> Result<(f64, Option<ModelParams>)> {
    p.check_shapes(mom)?;
    let d1 = p.latent_dim();
    let d2 = mom.output_dim();
    let s = p.decoder_variance(hp);
    let beta = hp.beta;
    let eta2 = hp.eta_enc * hp.eta_enc;

    let b_e = p.b_e.clone().unwrap_or_else(|| DVector::zeros(d1));
    let b_d = p.b_d.clone().unwrap_or_else(|| DVector::zeros(d2));
    let wt_mu = p.w.transpose() * &mom.mean_x;
    let em = &wt_mu + &b_e;
    let aw = &mom.a * &p.w;
    let m = p.w.transpose() * &aw + &wt_mu * b_e.transpose() + &b_e * wt_mu.transpose() + &b_e * b_e.transpose();
    let eym = &mom.b * &p.w + &mom.mean_y * b_e.transpose();
    let um = &p.u * &m;
    let u_em = &p.u * &em;
    let recon = um.component_mul(&p.u).sum() + 2.0 * b_d.dot(&u_em) - 2.0 * p.u.component_mul(&eym).sum()
        + b_d.norm_squared()
        - 2.0 * b_d.dot(&mom.mean_y)
        + mom.y_energy;

    let col_sq: Vec<f64> = p.u.column_iter().map(|c| c.norm_squared()).collect();
    let (var_mean, log_var_mean, log_stats) = match &p.variance {
        EncoderVariance::Diagonal { log_sigma } => (
            log_sigma.iter().map(|l| (2.0 * l).exp()).collect::<Vec<_>>(),
            log_sigma.iter().map(|l| 2.0 * l).collect::<Vec<_>>(),
            None,
        ),
        EncoderVariance::DataDependent { c, f } => {
            let stats = ddv_log_stats(c, f, mom)?;
            (ddv_second_moments(c, f, mom), stats.mean_log.clone(), Some(stats))
        }
    };
    let noise: f64 = col_sq.iter().zip(&var_mean).map(|(a, b)| a * b).sum();
    let r0 = recon + noise;
    let kl_var: f64 = var_mean
        .iter()
        .zip(&log_var_mean)
        .map(|(v, l)| 0.5 * beta * (v / eta2 - 1.0 - (l - eta2.ln())))
        .sum();
    let partition = if p.log_s.is_some() { 0.5 * d2 as f64 * s.ln() } else { 0.0 };
    let loss = r0 / (2.0 * s) + 0.5 * beta / eta2 * m.trace() + kl_var + partition;
    if !want_grad {
        return Ok((loss, None));
    }

    let gu = (um + &b_d * em.transpose() - &eym + &p.u * DMatrix::from_diagonal(&DVector::from_row_slice(&var_mean))) / s;
    let k = p.u.transpose() * &p.u / (2.0 * s) + DMatrix::identity(d1, d1) * (0.5 * beta / eta2);
    let gm = p.u.transpose() * &b_d / s;
    let gw = (aw + &mom.mean_x * b_e.transpose()) * &k * 2.0 + &mom.mean_x * gm.transpose()
        - mom.b.transpose() * &p.u / s;
    let gbe = &k * &em * 2.0 + &gm - p.u.transpose() * &mom.mean_y / s;
    let gbd = (&b_d + &u_em - &mom.mean_y) / s;

    let variance = match &p.variance {
        EncoderVariance::Diagonal { log_sigma } => EncoderVariance::Diagonal {
            log_sigma: DVector::from_fn(d1, |i, _| {
                let v = (2.0 * log_sigma[i]).exp();
                col_sq[i] * v / s + beta * (v / eta2 - 1.0)
            }),
        },
        EncoderVariance::DataDependent { c, f } => {
            let stats = log_stats.expect("computed above");
            let ca = c * &mom.a;
            let cmu = c * &mom.mean_x;
            let mut gc = DMatrix::zeros(d1, c.ncols());
            let mut gf = DVector::zeros(d1);
            for i in 0..d1 {
                let weight = col_sq[i] / (2.0 * s) + 0.5 * beta / eta2;
                let row = (ca.row(i) + mom.mean_x.transpose() * f[i]) * (2.0 * weight) - stats.grad_c.row(i) * beta;
                gc.set_row(i, &row);
                gf[i] = weight * 2.0 * (cmu[i] + f[i]) - beta * stats.grad_f[i];
            }
            EncoderVariance::DataDependent { c: gc, f: gf }
        }
    };
    let grad = ModelParams {
        u: gu,
        w: gw,
        variance,
        b_e: p.b_e.as_ref().map(|_| gbe),
        b_d: p.b_d.as_ref().map(|_| gbd),
        log_s: p.log_s.map(|_| -r0 / (2.0 * s) + 0.5 * d2 as f64),
    };
    Ok((loss, Some(grad)))
}

/// Exact expected objective (closed-form expectation over `ε`).
pub fn eval_loss(p: &ModelParams, mom: &Moments, hp: &Hyperparams) -> Result<f64> {
    Ok(evaluate(p, mom, hp, false)?.0)
}

/// Analytic gradient, laid out like the parameters.
pub fn eval_grad(p: &ModelParams, mom: &Moments, hp: &Hyperparams) -> Result<ModelParams> {
    Ok(evaluate(p, mom, hp, true)?.1.expect("gradient requested"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Monte Carlo estimate of the objective, drawing `x` uniformly from the
/// samples and `ε ~ N(0, Σ(x))`.
pub fn eval_loss_monte_carlo(
    p: &ModelParams,
    mom: &Moments,
    hp: &Hyperparams,
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    p.check_shapes(mom)?;
    let ds = mom
        .samples
        .as_ref()
        .ok_or_else(|| Error::InvalidHyperparams("Monte Carlo evaluation needs samples".into()))?;
    if draws < 2 {
        return Err(Error::InvalidHyperparams("Monte Carlo needs at least two draws".into()));
    }
    let d1 = p.latent_dim();
    let d2 = mom.output_dim();
    let s = p.decoder_variance(hp);
    let eta2 = hp.eta_enc * hp.eta_enc;
    let b_e = p.b_e.clone().unwrap_or_else(|| DVector::zeros(d1));
    let b_d = p.b_d.clone().unwrap_or_else(|| DVector::zeros(d2));
    let partition = if p.log_s.is_some() { 0.5 * d2 as f64 * s.ln() } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let j = rng.random_range(0..ds.n());
        let x = ds.x.row(j).transpose();
        let y = ds.y.row(j).transpose();
        let mean = p.w.transpose() * &x + &b_e;
        let sigma: Vec<f64> = match &p.variance {
            EncoderVariance::Diagonal { log_sigma } => log_sigma.iter().map(|l| l.exp()).collect(),
            EncoderVariance::DataDependent { c, f } => (c * &x + f).iter().map(|v| v.abs()).collect(),
        };
        let z = DVector::from_fn(d1, |i, _| mean[i] + sigma[i] * rng.sample::<f64, _>(StandardNormal));
        let recon = (&p.u * z + &b_d - y).norm_squared();
        let kl: f64 = sigma
            .iter()
            .map(|v| {
                let r = v * v / eta2;
                0.5 * hp.beta * (r - 1.0 - r.ln())
            })
            .sum();
        let value = recon / (2.0 * s) + 0.5 * hp.beta / eta2 * mean.norm_squared() + kl + partition;
        sum += value;
        sum_sq += value * value;
    }
    let k = draws as f64;
    let mean = sum / k;
    let var = ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0);
    Ok(McEstimate { mean, std_err: (var / k).sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Gradient descent with a step that halves when the loss fails to
    /// decrease and grows after each accepted step.
    PlainGd,
    /// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    Adam,
    /// Limited-memory BFGS (10 pairs) with a backtracking line search.
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expectation {
    ClosedForm,
    /// Also report a Monte Carlo estimate of the final loss.
    MonteCarlo { draws: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    pub seed: u64,
    pub expectation: Expectation,
    pub record_trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            max_steps: 100_000,
            grad_tol: 1e-8,
            seed: 0,
            expectation: Expectation::ClosedForm,
            record_trace: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidHyperparams("learning rate must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidHyperparams("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub decoder_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub params: ModelParams,
    pub final_loss: f64,
    /// Largest absolute entry of the gradient over trained parameters.
    pub grad_norm: f64,
    pub steps: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
    pub monte_carlo: Option<McEstimate>,
}

/// Zero the gradient of parameters that are held fixed.
fn mask(grad: &mut ModelParams, hp: &Hyperparams) {
    if hp.sigma_mode == SigmaMode::Fixed {
        if let EncoderVariance::Diagonal { log_sigma } = &mut grad.variance {
            log_sigma.fill(0.0);
        }
    }
}

fn loss_and_grad(x: &[f64], template: &ModelParams, mom: &Moments, hp: &Hyperparams) -> Result<(f64, Vec<f64>)> {
    let p = template.with_values(x);
    let (loss, grad) = evaluate(&p, mom, hp, true)?;
    let mut grad = grad.expect("gradient requested");
    mask(&mut grad, hp);
    Ok((loss, grad.to_vec()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion: `-H g` for the inverse-Hessian estimate `H`.
fn lbfgs_direction(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize the objective from `init` until the gradient's max-norm drops to
/// `grad_tol` or `max_steps` updates have been taken.
pub fn train(init: &ModelParams, mom: &Moments, hp: &Hyperparams, cfg: &TrainConfig) -> Result<TrainResult> {
    hp.validate()?;
    cfg.validate()?;
    let mut x = init.to_vec();
    let (mut loss, mut grad) = loss_and_grad(&x, init, mom, hp)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut steps = 0;
    let decvar = |x: &[f64]| init.with_values(x).decoder_variance(hp);

    match cfg.optimizer {
        Optimizer::PlainGd => {
            let mut lr = cfg.learning_rate;
            let floor = cfg.learning_rate * 1e-30;
            while steps < cfg.max_steps {
                let gn = inf_norm(&grad);
                if cfg.record_trace {
                    trace.push(TraceRow { step: steps, loss, grad_norm: gn, decoder_variance: decvar(&x) });
                }
                if gn <= cfg.grad_tol {
                    converged = true;
                    break;
                }
                let g2: f64 = grad.iter().map(|g| g * g).sum();
                let mut accepted = false;
                while lr > floor {
                    let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - lr * g).collect();
                    match loss_and_grad(&trial, init, mom, hp) {
                        Ok((l, g)) if l.is_finite() && l <= loss - 1e-4 * lr * g2 => {
                            x = trial;
                            loss = l;
                            grad = g;
                            lr *= 1.25;
                            accepted = true;
                            break;
                        }
                        Ok(_) | Err(Error::DegenerateVariance { .. }) => lr *= 0.5,
                        Err(e) => return Err(e),
                    }
                }
                if !accepted {
                    break;
                }
                steps += 1;
            }
        }
        Optimizer::Adam => {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            let mut m = vec![0.0; x.len()];
            let mut v = vec![0.0; x.len()];
            while steps < cfg.max_steps {
                let gn = inf_norm(&grad);
                if cfg.record_trace {
                    trace.push(TraceRow { step: steps, loss, grad_norm: gn, decoder_variance: decvar(&x) });
                }
                if gn <= cfg.grad_tol {
                    converged = true;
                    break;
                }
                steps += 1;
                let t = steps.min(i32::MAX as usize) as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for i in 0..x.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    x[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                let (l, g) = loss_and_grad(&x, init, mom, hp)?;
                if !l.is_finite() {
                    return Err(Error::Divergence { step: steps, loss: l });
                }
                loss = l;
                grad = g;
            }
            if !converged && inf_norm(&grad) <= cfg.grad_tol {
                converged = true;
            }
        }
        Optimizer::Lbfgs => {
            const MEMORY: usize = 10;
            const PATIENCE: usize = 50;
            let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
            let mut best = loss;
            let mut since_best = 0;
            while steps < cfg.max_steps {
                let gn = inf_norm(&grad);
                if cfg.record_trace {
                    trace.push(TraceRow { step: steps, loss, grad_norm: gn, decoder_variance: decvar(&x) });
                }
                if gn <= cfg.grad_tol {
                    converged = true;
                    break;
                }
                let mut dir = lbfgs_direction(&grad, &history);
                let mut slope = dot(&grad, &dir);
                if slope >= 0.0 {
                    history.clear();
                    dir = grad.iter().map(|g| -g).collect();
                    slope = dot(&grad, &dir);
                }
                let mut alpha = if history.is_empty() { cfg.learning_rate } else { 1.0 };
                let mut accepted = None;
                for _ in 0..80 {
                    let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
                    match loss_and_grad(&trial, init, mom, hp) {
                        Ok((l, g)) if l.is_finite() && l <= loss + 1e-4 * alpha * slope => {
                            accepted = Some((trial, l, g));
                            break;
                        }
                        Ok(_) | Err(Error::DegenerateVariance { .. }) => alpha *= 0.5,
                        Err(e) => return Err(e),
                    }
                }
                let Some((trial, l, g)) = accepted else {
                    if history.is_empty() {
                        break;
                    }
                    history.clear();
                    continue;
                };
                let sv: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&sv, &yv);
                if sy > 1e-14 * dot(&yv, &yv).sqrt() * dot(&sv, &sv).sqrt() {
                    if history.len() == MEMORY {
                        history.pop_front();
                    }
                    history.push_back((sv, yv, 1.0 / sy));
                }
                x = trial;
                loss = l;
                grad = g;
                steps += 1;
                // stop once the loss no longer moves at working precision
                if l < best - 1e-14 * best.abs().max(1.0) {
                    best = l;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= PATIENCE {
                        break;
                    }
                }
            }
        }
    }

    let params = init.with_values(&x);
    let monte_carlo = match cfg.expectation {
        Expectation::ClosedForm => None,
        Expectation::MonteCarlo { draws } => Some(eval_loss_monte_carlo(&params, mom, hp, draws, cfg.seed)?),
    };
    Ok(TrainResult { params, final_loss: loss, grad_norm: inf_norm(&grad), steps, converged, trace, monte_carlo })
}

/// Singular values of `U Vᵀ` with `V = Φ^{1/2} P_Aᵀ W`, non-increasing.
pub fn product_singular_values(p: &ModelParams, sp: &DataSpectrum) -> Vec<f64> {
    singular_values(&(&p.u * sp.v_from_w(&p.w).transpose()))
}

/// Objective at the given data-dependent variance and at `C = 0` with
/// `f'_i = sqrt(f_i² + C_i A C_iᵀ)`, which matches `E[σ_i(x)²]` for
/// zero-mean inputs. Returns `(lhs, rhs)`.
pub fn ddv_inequality_check(p: &ModelParams, mom: &Moments, hp: &Hyperparams) -> Result<(f64, f64)> {
    let EncoderVariance::DataDependent { c, f } = &p.variance else {
        return Err(Error::InvalidHyperparams("expected a data-dependent encoder variance".into()));
    };
    let lhs = eval_loss(p, mom, hp)?;
    let ca = c * &mom.a;
    let f_prime = DVector::from_fn(f.len(), |i, _| (f[i] * f[i] + ca.row(i).dot(&c.row(i))).sqrt());
    let reduced = ModelParams {
        variance: EncoderVariance::DataDependent { c: DMatrix::zeros(c.nrows(), c.ncols()), f: f_prime },
        ..p.clone()
    };
    let rhs = eval_loss(&reduced, mom, hp)?;
    Ok((lhs, rhs))
}
