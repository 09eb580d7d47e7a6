use std::path::Path;

use collapse_lab::closed_form::{global_minimum, optimal_sigma, DecVarMode, GlobalMinimum, Hyperparams, SigmaMode};
use collapse_lab::collapse::{beta_grid, beta_sweep, predict, CollapseReport, SweepRow};
use collapse_lab::data::{self, center, generate, Dataset, SyntheticSpec};
use collapse_lab::decoder_variance::{g_loss, solve_decoder_variance, DecVarOptimum, DecVarSolution};
use collapse_lab::linalg::{random_commuting_orthogonal, random_orthogonal};
use collapse_lab::spectrum::{compute_spectrum, effective_counts, DataSpectrum, EffectiveCounts, DEFAULT_REL_TOL};
use collapse_lab::trainer::{
    eval_loss, init_params, product_singular_values, train, EncoderVariance, McEstimate, ModelParams, Moments,
    Optimizer, ParamOptions, TrainConfig, TrainResult,
};
use collapse_lab::verify::{oracle_train_config, run_verification, VerifyConfig, VerifyRow, FACTOR_TOL};
use collapse_lab::{Error, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{self, emit, num, warn_all};
use crate::{Command, DataArgs, Failure, Format, ModelArgs, OptimizerArg, OutArgs, TrainArgs};

pub fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Spectrum { data, out } => spectrum(&data, &out)?,
        Command::Solve { data, model, random_p, matrices, out } => solve(&data, &model, random_p, matrices, &out)?,
        Command::Predict { data, model, out } => predict_cmd(&data, &model, &out)?,
        Command::Sweep { data, model, beta_grid, train, seed, out } => sweep(&data, &model, &beta_grid, train, seed, &out)?,
        Command::Train { data, model, train, out } => train_cmd(&data, &model, &train, &out)?,
        Command::Verify { instances, seed, learnable_decvar, analytic_beta_scale, out } => {
            return verify(instances, seed, learnable_decvar, analytic_beta_scale, &out)
        }
        Command::Report { data, model, train, seed, out } => report(&data, &model, train, seed, &out)?,
    }
    Ok(())
}

/// Loaded data: the samples as given, their centered copy and its spectrum.
struct Loaded {
    source: String,
    raw: Dataset,
    centered: Dataset,
    spectrum: DataSpectrum,
    warnings: Vec<String>,
}

fn parse_synthetic(text: &str) -> Result<SyntheticSpec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || Error::InvalidSpec(format!("expected d0,d2,n,seed, got '{text}'"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let dims: Vec<usize> = parts[..3].iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let seed: u64 = parts[3].parse().map_err(|_| bad())?;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidSpec("d0, d2 and n must be positive".into()));
    }
    Ok(SyntheticSpec::random(dims[0], dims[1], dims[2], seed))
}

fn load(args: &DataArgs) -> Result<Loaded> {
    let (raw, source) = match (&args.data, &args.synthetic) {
        (Some(path), _) => (data::load(path)?, path.display().to_string()),
        // drawn from a zero-mean distribution, so only sampling noise is removed
        (None, Some(spec)) => (center(&generate(&parse_synthetic(spec)?)?).0, format!("synthetic:{spec}")),
        (None, None) => return Err(Error::InvalidSpec("either --data or --synthetic is required".into())),
    };
    let mut warnings = Vec::new();
    if !raw.centered {
        warnings.push("input is not centered; means are removed before the spectral analysis".to_string());
    }
    let centered = if raw.centered { raw.clone() } else { center(&raw).0 };
    let spectrum = compute_spectrum(&centered, DEFAULT_REL_TOL)?;
    warnings.extend(spectrum.warnings.iter().cloned());
    Ok(Loaded { source, raw, centered, spectrum, warnings })
}

fn hyperparams(model: &ModelArgs, sp: &DataSpectrum, warnings: &mut Vec<String>) -> Result<Hyperparams> {
    let hp = Hyperparams::new(model.beta, model.d1.unwrap_or_else(|| sp.d_star()))
        .with_etas(model.eta_enc, model.eta_dec)
        .with_sigma_mode(if model.learnable_sigma { SigmaMode::Learnable } else { SigmaMode::Fixed })
        .with_decvar_mode(if model.learnable_decvar { DecVarMode::Learnable } else { DecVarMode::Fixed });
    hp.validate()?;
    let unexplained = sp.unexplained_energy();
    if model.learnable_decvar && unexplained > 1e-10 * sp.y_energy.max(1.0) {
        warnings.push(format!(
            "targets carry energy {unexplained:.6e} that no linear map of the input explains; \
             the learned decoder variance analysis assumes this is zero"
        ));
    }
    Ok(hp)
}

fn format_or(out: &OutArgs, default: Format, allowed: &[Format]) -> Result<Format> {
    let f = out.format.unwrap_or(default);
    if allowed.contains(&f) {
        Ok(f)
    } else {
        Err(Error::InvalidHyperparams(format!("format {f:?} is not available for this command")))
    }
}

fn finish(command: &str, warnings: &[String], body: impl Serialize, out: &OutArgs) -> Result<()> {
    warn_all(warnings);
    emit(&output::json(command, warnings, body)?, out.out.as_deref())
}

#[derive(Serialize)]
struct SpectrumSummary<'a> {
    source: &'a str,
    samples: usize,
    zeta: &'a [f64],
    zeta_squared: Vec<f64>,
    counts: EffectiveCounts,
    y_energy: f64,
    unexplained_energy: f64,
}

fn summary<'a>(loaded: &'a Loaded, d1: usize) -> SpectrumSummary<'a> {
    let sp = &loaded.spectrum;
    SpectrumSummary {
        source: &loaded.source,
        samples: loaded.raw.n(),
        zeta: &sp.zeta,
        zeta_squared: sp.zeta.iter().map(|z| z * z).collect(),
        counts: effective_counts(sp, d1),
        y_energy: sp.y_energy,
        unexplained_energy: sp.unexplained_energy(),
    }
}

fn spectrum(args: &DataArgs, out: &OutArgs) -> Result<()> {
    let loaded = load(args)?;
    let sp = &loaded.spectrum;
    match format_or(out, Format::Json, &[Format::Json, Format::Csv])? {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                #[serde(flatten)]
                summary: SpectrumSummary<'a>,
                spectrum: &'a DataSpectrum,
            }
            finish("spectrum", &loaded.warnings, Body { summary: summary(&loaded, sp.d_star()), spectrum: sp }, out)
        }
        Format::Csv => {
            warn_all(&loaded.warnings);
            let header = ["mode", "zeta", "zeta_squared"].map(String::from);
            let rows: Vec<Vec<String>> =
                sp.zeta.iter().enumerate().map(|(i, z)| vec![(i + 1).to_string(), num(*z), num(z * z)]).collect();
            emit(&output::csv(&header, &rows)?, out.out.as_deref())
        }
    }
}

/// The decoder variance the closed form is evaluated at, and the solver
/// output when it is learned.
fn decoder_variance(sp: &DataSpectrum, hp: &Hyperparams, warnings: &mut Vec<String>) -> Result<(f64, Option<DecVarSolution>)> {
    if hp.decvar_mode == DecVarMode::Fixed {
        return Ok((hp.eta_dec * hp.eta_dec, None));
    }
    let sol = solve_decoder_variance(sp, hp)?;
    let s = match sol.optimum {
        DecVarOptimum::Point { s } => s,
        DecVarOptimum::Interval { hi } => {
            warnings.push(format!("every decoder variance in (0, {hi:.6e}] is optimal; using the right end"));
            hi
        }
        DecVarOptimum::TendsToZero => {
            return Err(Error::DegenerateInput(format!(
                "the optimal decoder variance tends to zero at beta = {} (no finite minimum)",
                hp.beta
            )))
        }
    };
    Ok((s, Some(sol)))
}

#[derive(Serialize)]
struct Solution {
    hyperparams: Hyperparams,
    decoder_variance: f64,
    regime: Option<String>,
    lambda: Vec<f64>,
    theta: Vec<f64>,
    sigma: Vec<f64>,
    singular_values: Vec<f64>,
    collapse_flags: Vec<bool>,
    predicted_loss: f64,
    /// Objective evaluated directly at the returned parameters.
    loss_at_solution: f64,
    u: Option<DMatrix<f64>>,
    w: Option<DMatrix<f64>>,
}

fn solution(loaded: &Loaded, hp: &Hyperparams, random_p: Option<u64>, matrices: bool, warnings: &mut Vec<String>) -> Result<Solution> {
    let sp = &loaded.spectrum;
    let (s, sol) = decoder_variance(sp, hp, warnings)?;
    let at_s = Hyperparams { eta_dec: s.sqrt(), decvar_mode: DecVarMode::Fixed, ..*hp };
    let p = match random_p {
        None => None,
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(match hp.sigma_mode {
                SigmaMode::Fixed => random_orthogonal(hp.d1, &mut rng),
                // only rotations that commute with diag(σ*) keep the minimum
                SigmaMode::Learnable => random_commuting_orthogonal(&optimal_sigma(sp, &at_s)?, 1e-12, &mut rng),
            })
        }
    };
    let gm: GlobalMinimum = global_minimum(sp, &at_s, p.as_ref())?;
    let mut params = ModelParams::from_factors(gm.u.clone(), gm.w.clone(), &gm.sigma);
    let mut predicted_loss = gm.predicted_loss;
    if hp.decvar_mode == DecVarMode::Learnable {
        params.log_s = Some(s.ln());
        predicted_loss += 0.5 * sp.output_dim as f64 * s.ln();
    }
    let loss_at_solution = eval_loss(&params, &Moments::from_dataset(&loaded.centered), hp)?;
    Ok(Solution {
        hyperparams: *hp,
        decoder_variance: s,
        regime: sol.map(|s| s.regime.label()),
        singular_values: gm.lambda.iter().zip(&gm.theta).map(|(l, t)| l * t).collect(),
        lambda: gm.lambda,
        theta: gm.theta,
        sigma: gm.sigma,
        collapse_flags: gm.collapse_flags,
        predicted_loss,
        loss_at_solution,
        u: matrices.then_some(gm.u),
        w: matrices.then_some(gm.w),
    })
}

fn solve(args: &DataArgs, model: &ModelArgs, random_p: Option<u64>, matrices: bool, out: &OutArgs) -> Result<()> {
    format_or(out, Format::Json, &[Format::Json])?;
    let loaded = load(args)?;
    let mut warnings = loaded.warnings.clone();
    let hp = hyperparams(model, &loaded.spectrum, &mut warnings)?;
    let body = solution(&loaded, &hp, random_p, matrices, &mut warnings)?;
    finish("solve", &warnings, body, out)
}

#[derive(Serialize)]
struct Prediction {
    hyperparams: Hyperparams,
    zeta: Vec<f64>,
    #[serde(flatten)]
    report: CollapseReport,
}

fn prediction(loaded: &Loaded, hp: &Hyperparams) -> Result<Prediction> {
    Ok(Prediction { hyperparams: *hp, zeta: loaded.spectrum.zeta.clone(), report: predict(&loaded.spectrum, hp)? })
}

fn predict_cmd(args: &DataArgs, model: &ModelArgs, out: &OutArgs) -> Result<()> {
    format_or(out, Format::Json, &[Format::Json])?;
    let loaded = load(args)?;
    let mut warnings = loaded.warnings.clone();
    let hp = hyperparams(model, &loaded.spectrum, &mut warnings)?;
    let body = prediction(&loaded, &hp)?;
    finish("predict", &warnings, body, out)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidHyperparams(format!("expected lo:hi:step, got '{text}'"));
    let parts: Vec<f64> = text.split(':').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
    match parts[..] {
        [lo, hi, step] => beta_grid(lo, hi, step),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct Trained {
    loss: f64,
    rank: usize,
    sigma: Vec<f64>,
    decoder_variance: f64,
    converged: bool,
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn train_oracle(loaded: &Loaded, hp: &Hyperparams, seed: u64) -> Result<(TrainResult, Trained)> {
    let sp = &loaded.spectrum;
    let mom = Moments::from_dataset(&loaded.centered);
    let init = init_params(sp.input_dim, sp.output_dim, hp, ParamOptions::for_hyperparams(hp), seed);
    let res = train(&init, &mom, hp, &oracle_train_config(seed))?;
    let summary = Trained {
        loss: res.final_loss,
        rank: product_singular_values(&res.params, sp).iter().filter(|&&v| v > FACTOR_TOL).count(),
        sigma: sorted_desc(res.params.sigma_bar(&mom)),
        decoder_variance: res.params.decoder_variance(hp),
        converged: res.converged,
    };
    Ok((res, summary))
}

#[derive(Serialize)]
struct SweepEntry {
    #[serde(flatten)]
    row: SweepRow,
    trained: Option<Trained>,
}

fn sweep(args: &DataArgs, model: &ModelArgs, grid: &str, with_training: bool, seed: u64, out: &OutArgs) -> Result<()> {
    let format = format_or(out, Format::Csv, &[Format::Json, Format::Csv])?;
    let betas = parse_grid(grid)?;
    let loaded = load(args)?;
    let mut warnings = loaded.warnings.clone();
    let hp = hyperparams(model, &loaded.spectrum, &mut warnings)?;
    let rows = beta_sweep(&loaded.spectrum, &hp, &betas)?;
    let trained: Vec<Option<Trained>> = if with_training {
        rows.par_iter()
            .map(|r| train_oracle(&loaded, &Hyperparams { beta: r.beta, ..hp }, seed).map(|(_, t)| Some(t)))
            .collect::<Result<_>>()?
    } else {
        rows.iter().map(|_| None).collect()
    };
    let learned = hp.decvar_mode == DecVarMode::Learnable;
    match format {
        Format::Json => {
            let entries: Vec<SweepEntry> = rows.into_iter().zip(trained).map(|(row, trained)| SweepEntry { row, trained }).collect();
            #[derive(Serialize)]
            struct Body {
                hyperparams: Hyperparams,
                rows: Vec<SweepEntry>,
            }
            finish("sweep", &warnings, Body { hyperparams: hp, rows: entries }, out)
        }
        Format::Csv => {
            warn_all(&warnings);
            let d1 = hp.d1;
            let mut header: Vec<String> = ["beta", "loss", "rank", "regime"].map(String::from).to_vec();
            header.extend((1..=d1).map(|i| format!("sigma_{i}")));
            if learned {
                header.push("decoder_variance".into());
            }
            if with_training {
                header.extend(["trained_loss", "trained_rank"].map(String::from));
                header.extend((1..=d1).map(|i| format!("trained_sigma_{i}")));
                if learned {
                    header.push("trained_decoder_variance".into());
                }
            }
            let lines: Vec<Vec<String>> = rows
                .iter()
                .zip(&trained)
                .map(|(r, t)| {
                    let mut line = vec![num(r.beta), num(r.loss), r.rank.to_string(), r.regime.clone()];
                    line.extend(r.sigma.iter().map(|&s| num(s)));
                    if learned {
                        line.push(r.decoder_variance.map(num).unwrap_or_default());
                    }
                    if let Some(t) = t {
                        line.extend([num(t.loss), t.rank.to_string()]);
                        line.extend(t.sigma.iter().map(|&s| num(s)));
                        if learned {
                            line.push(num(t.decoder_variance));
                        }
                    }
                    line
                })
                .collect();
            emit(&output::csv(&header, &lines)?, out.out.as_deref())
        }
    }
}

#[derive(Serialize)]
struct Comparison {
    analytic_loss: f64,
    /// `|trained − analytic| / (1 + |analytic|)`.
    loss_error: f64,
    /// Largest gap between sorted singular values of the learned and optimal `U Vᵀ`.
    singular_value_error: f64,
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    (0..a.len().max(b.len()))
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Closed-form optimum to compare a trained model against, when one exists.
fn compare(sp: &DataSpectrum, hp: &Hyperparams, trained: &TrainResult) -> Result<Option<Comparison>> {
    let (analytic_loss, s) = match hp.decvar_mode {
        DecVarMode::Fixed => (global_minimum(sp, hp, None)?.predicted_loss, hp.eta_dec * hp.eta_dec),
        DecVarMode::Learnable => {
            if sp.unexplained_energy() > 1e-10 * sp.y_energy.max(1.0) {
                return Ok(None);
            }
            match solve_decoder_variance(sp, hp)?.optimum {
                DecVarOptimum::Point { s } => (g_loss(sp, hp, s)?, s),
                _ => return Ok(None),
            }
        }
    };
    let gm = global_minimum(sp, &Hyperparams { eta_dec: s.sqrt(), decvar_mode: DecVarMode::Fixed, ..*hp }, None)?;
    let want = sorted_desc(gm.lambda.iter().zip(&gm.theta).map(|(l, t)| l * t).collect());
    Ok(Some(Comparison {
        analytic_loss,
        loss_error: (trained.final_loss - analytic_loss).abs() / (1.0 + analytic_loss.abs()),
        singular_value_error: max_gap(&want, &product_singular_values(&trained.params, sp)),
    }))
}

#[derive(Serialize)]
struct TrainBody {
    hyperparams: Hyperparams,
    options: ParamOptions,
    optimizer: Optimizer,
    learning_rate: f64,
    seed: u64,
    final_loss: f64,
    grad_norm: f64,
    steps: usize,
    converged: bool,
    sigma: Vec<f64>,
    decoder_variance: f64,
    singular_values: Vec<f64>,
    comparison: Option<Comparison>,
    monte_carlo: Option<McEstimate>,
    params: ModelParams,
}

fn write_trace(path: &Path, result: &TrainResult) -> Result<()> {
    let header = ["step", "loss", "grad_norm", "decoder_variance"].map(String::from);
    let rows: Vec<Vec<String>> = result
        .trace
        .iter()
        .map(|t| vec![t.step.to_string(), num(t.loss), num(t.grad_norm), num(t.decoder_variance)])
        .collect();
    emit(&output::csv(&header, &rows)?, Some(path))
}

fn train_cmd(args: &DataArgs, model: &ModelArgs, t: &TrainArgs, out: &OutArgs) -> Result<()> {
    format_or(out, Format::Json, &[Format::Json])?;
    let loaded = load(args)?;
    let mut warnings = loaded.warnings.clone();
    let mut hp = hyperparams(model, &loaded.spectrum, &mut warnings)?;
    if t.ddv {
        // the offsets f are always trained, so σ is effectively learned
        hp.sigma_mode = SigmaMode::Learnable;
    }
    let sp = &loaded.spectrum;
    // biases absorb the means, so they train on the data as given
    let mom = Moments::from_dataset(if t.bias { &loaded.raw } else { &loaded.centered });
    let opts = ParamOptions {
        bias: t.bias,
        data_dependent_variance: t.ddv,
        learnable_decoder_variance: hp.decvar_mode == DecVarMode::Learnable,
    };
    let optimizer = match t.optimizer {
        OptimizerArg::PlainGd => Optimizer::PlainGd,
        OptimizerArg::Adam => Optimizer::Adam,
        OptimizerArg::Lbfgs => Optimizer::Lbfgs,
    };
    let cfg = TrainConfig {
        optimizer,
        learning_rate: t.lr,
        max_steps: t.max_steps,
        grad_tol: t.grad_tol,
        seed: t.seed,
        expectation: match t.monte_carlo {
            Some(draws) => collapse_lab::trainer::Expectation::MonteCarlo { draws },
            None => collapse_lab::trainer::Expectation::ClosedForm,
        },
        record_trace: t.trace.is_some(),
    };
    let init = init_params(sp.input_dim, sp.output_dim, &hp, opts, t.seed);
    let result = train(&init, &mom, &hp, &cfg)?;
    if let Some(path) = &t.trace {
        write_trace(path, &result)?;
    }
    if !result.converged {
        warnings.push(format!("stopped after {} steps with gradient max-norm {:.3e}", result.steps, result.grad_norm));
    }
    let comparison = compare(sp, &hp, &result)?;
    if let EncoderVariance::DataDependent { .. } = result.params.variance {
        if !loaded.raw.centered {
            warnings.push("input-dependent variance assumes zero-mean inputs; the data was centered".into());
        }
    }
    let body = TrainBody {
        hyperparams: hp,
        options: opts,
        optimizer,
        learning_rate: t.lr,
        seed: t.seed,
        final_loss: result.final_loss,
        grad_norm: result.grad_norm,
        steps: result.steps,
        converged: result.converged,
        sigma: sorted_desc(result.params.sigma_bar(&mom)),
        decoder_variance: result.params.decoder_variance(&hp),
        singular_values: product_singular_values(&result.params, sp),
        comparison,
        monte_carlo: result.monte_carlo,
        params: result.params,
    };
    finish("train", &warnings, body, out)
}

fn verify_csv(rows: &[VerifyRow]) -> Result<String> {
    let header = [
        "instance",
        "d0",
        "d2",
        "d1",
        "beta",
        "analytic_loss",
        "trained_loss",
        "loss_error",
        "factor_error",
        "sigma_error",
        "decoder_variance_error",
        "steps",
        "passed",
        "failure",
    ]
    .map(String::from);
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.instance.to_string(),
                r.d0.to_string(),
                r.d2.to_string(),
                r.d1.to_string(),
                num(r.beta),
                num(r.analytic_loss),
                num(r.trained_loss),
                num(r.loss_error),
                num(r.factor_error),
                num(r.sigma_error),
                r.decoder_variance_error.map(num).unwrap_or_default(),
                r.steps.to_string(),
                if r.passed { "PASS" } else { "FAIL" }.to_string(),
                r.failure.clone().unwrap_or_default(),
            ]
        })
        .collect();
    output::csv(&header, &lines)
}

fn verify(instances: usize, seed: u64, learnable_decvar: bool, scale: f64, out: &OutArgs) -> std::result::Result<(), Failure> {
    let format = format_or(out, Format::Csv, &[Format::Json, Format::Csv])?;
    if instances == 0 {
        return Err(Error::InvalidHyperparams("--instances must be at least 1".into()).into());
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidHyperparams("analytic beta scale must be positive".into()).into());
    }
    let cfg = VerifyConfig {
        instances,
        seed,
        decvar: if learnable_decvar { DecVarMode::Learnable } else { DecVarMode::Fixed },
        analytic_beta_scale: scale,
    };
    let rows = run_verification(&cfg);
    let text = match format {
        Format::Csv => verify_csv(&rows)?,
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                config: VerifyConfig,
                passed: usize,
                rows: &'a [VerifyRow],
            }
            let passed = rows.iter().filter(|r| r.passed).count();
            output::json("verify", &[], Body { config: cfg, passed, rows: &rows })?
        }
    };
    emit(&text, out.out.as_deref())?;
    let failed: Vec<usize> = rows.iter().filter(|r| !r.passed).map(|r| r.instance).collect();
    eprintln!("verify: {}/{} instances passed", rows.len() - failed.len(), rows.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("instances {failed:?} disagree with the closed form")))
    }
}

fn report(args: &DataArgs, model: &ModelArgs, with_training: bool, seed: u64, out: &OutArgs) -> Result<()> {
    format_or(out, Format::Json, &[Format::Json])?;
    let loaded = load(args)?;
    let mut warnings = loaded.warnings.clone();
    let hp = hyperparams(model, &loaded.spectrum, &mut warnings)?;
    let prediction = prediction(&loaded, &hp)?;
    let solution = match solution(&loaded, &hp, None, false, &mut warnings) {
        Ok(s) => Some(s),
        Err(Error::DegenerateInput(msg)) => {
            warnings.push(msg);
            None
        }
        Err(e) => return Err(e),
    };
    let training = if with_training {
        let (res, summary) = train_oracle(&loaded, &hp, seed)?;
        Some((summary, compare(&loaded.spectrum, &hp, &res)?))
    } else {
        None
    };
    #[derive(Serialize)]
    struct TrainingReport {
        #[serde(flatten)]
        trained: Trained,
        comparison: Option<Comparison>,
    }
    #[derive(Serialize)]
    struct Body<'a> {
        spectrum: SpectrumSummary<'a>,
        solution: Option<Solution>,
        prediction: Prediction,
        training: Option<TrainingReport>,
    }
    let body = Body {
        spectrum: summary(&loaded, hp.d1),
        solution,
        prediction,
        training: training.map(|(trained, comparison)| TrainingReport { trained, comparison }),
    };
    finish("report", &warnings, body, out)
}
