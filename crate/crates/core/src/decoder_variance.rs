//! Learnable decoder variance `s = η_dec²`.
//!
//! After minimizing over `(U, W, Σ)` the objective, with the partition term
//! `(d2/2) log s` added, is a one-dimensional function `G(s)`. Its behaviour
//! splits into five regimes depending on `β` and the spectrum.

use serde::{Deserialize, Serialize};

use crate::closed_form::Hyperparams;
use crate::error::{Error, Result};
use crate::spectrum::{effective_counts, DataSpectrum};

/// Relative tolerance for `β = d2/d̂1` in the boundary regime.
pub const BOUNDARY_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Regime {
    /// `G` decreases without bound as `s → 0`.
    IllPosedZero,
    /// `G` is constant on `(0, s_{d̂1}]`.
    BoundaryInterval,
    NoCollapse,
    /// Only the first `survivors` modes remain.
    PartialCollapse { survivors: usize },
    CompleteCollapse,
}

impl Regime {
    pub fn label(&self) -> String {
        match self {
            Regime::IllPosedZero => "ill-posed-zero".into(),
            Regime::BoundaryInterval => "boundary-interval".into(),
            Regime::NoCollapse => "no-collapse".into(),
            Regime::PartialCollapse { survivors } => format!("partial-collapse({survivors})"),
            Regime::CompleteCollapse => "complete-collapse".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecVarOptimum {
    Point { s: f64 },
    /// Every `s` in `(0, hi]` is a global minimizer.
    Interval { hi: f64 },
    TendsToZero,
}

/// A β-range. `hi = None` means unbounded above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaInterval {
    pub lo: f64,
    pub hi: Option<f64>,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl BetaInterval {
    pub fn contains(&self, beta: f64) -> bool {
        let above = if self.lo_closed { beta >= self.lo } else { beta > self.lo };
        let below = match self.hi {
            None => true,
            Some(hi) if self.hi_closed => beta <= hi,
            Some(hi) => beta < hi,
        };
        above && below
    }
}

/// One row of the regime breakdown for a fixed spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: Regime,
    pub surviving_modes: usize,
    pub beta: BetaInterval,
    /// `Σ_{i>p} ζ_i²`; in Case-3 rows `s* = tail_energy / (d2 − β p)`.
    pub tail_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecVarSolution {
    pub regime: Regime,
    pub optimum: DecVarOptimum,
    pub surviving_modes: usize,
    /// Survivors at the right end `s = s_{d̂1}` of the boundary interval, where
    /// the last mode sits exactly on its threshold and counts as collapsed.
    pub surviving_modes_at_right_end: Option<usize>,
    pub beta_interval: BetaInterval,
    /// `b_p = d2 ζ_p² / (Σ_{i>p} ζ_i² + p ζ_p²)` for `p = 1..=d̂1`; mode `p`
    /// survives iff `β < b_p`. Non-increasing.
    pub thresholds: Vec<f64>,
    pub table: Vec<RegimeRow>,
}

impl DecVarSolution {
    /// The optimal `s` when it is a single point.
    pub fn s_star(&self) -> Option<f64> {
        match self.optimum {
            DecVarOptimum::Point { s } => Some(s),
            _ => None,
        }
    }
}

fn check_s(s: f64) -> Result<()> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Domain(format!("decoder variance must be positive, got {s}")));
    }
    Ok(())
}

/// `G(s)`: the objective minimized over `(U, W, Σ)` at `η_dec² = s`, plus
/// `(d2/2) log s`. The energy `E‖y‖² − ‖Z‖²` is not included.
pub fn g_loss(sp: &DataSpectrum, hp: &Hyperparams, s: f64) -> Result<f64> {
    check_s(s)?;
    let beta = hp.beta;
    let level = beta * s;
    let mut inactive = 0.0;
    let mut active = 0.0;
    for (i, &z) in sp.zeta.iter().enumerate() {
        let z2 = z * z;
        if i < hp.d1 && z2 > level {
            active += (level / z2).ln() - 1.0;
        } else {
            inactive += z2;
        }
    }
    Ok(inactive / (2.0 * s) - 0.5 * beta * active + 0.5 * sp.output_dim as f64 * s.ln())
}

/// `C(s) = Σ ζ_i² − Σ_{i ≤ d1, ζ_i² > βs} (ζ_i² − βs)`; stationary points
/// satisfy `d2 s = C(s)`.
pub fn stationarity_rhs(sp: &DataSpectrum, hp: &Hyperparams, s: f64) -> f64 {
    let level = hp.beta * s;
    sp.zeta
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let z2 = z * z;
            if i < hp.d1 && z2 > level {
                level
            } else {
                z2
            }
        })
        .sum()
}

/// `G'(s) = (d2 s − C(s)) / (2 s²)`.
pub fn g_derivative(sp: &DataSpectrum, hp: &Hyperparams, s: f64) -> Result<f64> {
    check_s(s)?;
    Ok((sp.output_dim as f64 * s - stationarity_rhs(sp, hp, s)) / (2.0 * s * s))
}

/// Solve for the optimal decoder variance and classify the regime.
pub fn solve_decoder_variance(sp: &DataSpectrum, hp: &Hyperparams) -> Result<DecVarSolution> {
    let beta = hp.beta;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    if hp.d1 == 0 {
        return Err(Error::InvalidHyperparams("d1 must be at least 1".into()));
    }
    let counts = effective_counts(sp, hp.d1);
    let (d_hat_star, d_hat_1) = (counts.d_hat_star, counts.d_hat_1);
    let d2 = sp.output_dim as f64;
    let z2: Vec<f64> = sp.zeta[..d_hat_star].iter().map(|z| z * z).collect();
    // tail[p] = Σ_{i>p} ζ_i² with 1-based p
    let mut tail = vec![0.0; d_hat_star + 1];
    for p in (0..d_hat_star).rev() {
        tail[p] = tail[p + 1] + z2[p];
    }
    let thresholds: Vec<f64> = (1..=d_hat_1)
        .map(|p| {
            let zp = z2[p - 1];
            d2 * zp / (tail[p] + p as f64 * zp)
        })
        .collect();
    let saturated = d_hat_1 == d_hat_star;

    let table = regime_table(&thresholds, &tail, d_hat_1, saturated);
    let row_for = |p: usize| *table.iter().find(|r| r.surviving_modes == p && r.regime != Regime::BoundaryInterval).unwrap();

    if saturated {
        let edge = if d_hat_1 == 0 { f64::INFINITY } else { d2 / d_hat_1 as f64 };
        if d_hat_1 > 0 && (beta - edge).abs() <= BOUNDARY_REL_TOL * edge {
            let row = *table.iter().find(|r| r.regime == Regime::BoundaryInterval).unwrap();
            return Ok(DecVarSolution {
                regime: Regime::BoundaryInterval,
                optimum: DecVarOptimum::Interval { hi: z2[d_hat_1 - 1] / beta },
                surviving_modes: d_hat_1,
                surviving_modes_at_right_end: Some(d_hat_1 - 1),
                beta_interval: row.beta,
                thresholds,
                table,
            });
        }
        if beta < edge {
            return Ok(DecVarSolution {
                regime: Regime::IllPosedZero,
                optimum: DecVarOptimum::TendsToZero,
                surviving_modes: d_hat_1,
                surviving_modes_at_right_end: None,
                beta_interval: row_for(d_hat_1).beta,
                thresholds,
                table,
            });
        }
    }

    let p = thresholds.iter().filter(|&&b| beta < b).count();
    let s = tail[p] / (d2 - beta * p as f64);
    let row = row_for(p);
    Ok(DecVarSolution {
        regime: row.regime,
        optimum: DecVarOptimum::Point { s },
        surviving_modes: p,
        surviving_modes_at_right_end: None,
        beta_interval: row.beta,
        thresholds,
        table,
    })
}

fn regime_table(thresholds: &[f64], tail: &[f64], d_hat_1: usize, saturated: bool) -> Vec<RegimeRow> {
    let bound = |p: usize| -> Option<f64> {
        if p == 0 {
            None
        } else {
            Some(thresholds[p - 1])
        }
    };
    let mut rows = Vec::new();
    for p in (0..=d_hat_1).rev() {
        let regime = if p == d_hat_1 && saturated {
            Regime::IllPosedZero
        } else if p == 0 {
            Regime::CompleteCollapse
        } else if p == d_hat_1 {
            Regime::NoCollapse
        } else {
            Regime::PartialCollapse { survivors: p }
        };
        let lo = if p == d_hat_1 { 0.0 } else { thresholds[p] };
        let hi = bound(p);
        let lo_closed = p != d_hat_1 && !(saturated && p + 1 == d_hat_1);
        let beta = BetaInterval { lo, hi, lo_closed, hi_closed: false };
        rows.push(RegimeRow { regime, surviving_modes: p, beta, tail_energy: tail[p] });
        if saturated && p == d_hat_1 && p > 0 {
            let edge = thresholds[p - 1];
            rows.push(RegimeRow {
                regime: Regime::BoundaryInterval,
                surviving_modes: p,
                beta: BetaInterval { lo: edge, hi: Some(edge), lo_closed: true, hi_closed: true },
                tail_energy: 0.0,
            });
        }
    }
    rows
}

/// Default search bracket `(s_lo, s_hi)`. `G' > 0` at `s_hi`.
pub fn default_bracket(sp: &DataSpectrum, hp: &Hyperparams) -> (f64, f64) {
    let s1 = sp.zeta_at(0).powi(2) / hp.beta;
    let lo = 1e-8 * s1.max(1.0);
    let hi = (s1 + sp.zeta_energy()).max(1.0);
    (lo, hi)
}

/// Numeric minimizer of `G` on `[s_lo, s_hi]`: a log-spaced grid followed by
/// golden-section search in `log s` around the best grid point.
pub fn oracle_minimize_g(sp: &DataSpectrum, hp: &Hyperparams, s_range: (f64, f64)) -> f64 {
    const GRID: usize = 4001;
    let (lo, hi) = (s_range.0.ln(), s_range.1.ln());
    let g = |t: f64| g_loss(sp, hp, t.exp()).unwrap_or(f64::INFINITY);
    let step = (hi - lo) / (GRID - 1) as f64;
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for k in 0..GRID {
        let v = g(lo + step * k as f64);
        if v < best_val {
            best_val = v;
            best = k;
        }
    }
    let mut a = lo + step * best.saturating_sub(1) as f64;
    let mut b = (lo + step * (best + 1) as f64).min(hi);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-15 {
            break;
        }
        if gc <= gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d);
        }
    }
    let t = 0.5 * (a + b);
    let edge = if g(lo) <= g(t) { lo } else { t };
    edge.exp()
}
