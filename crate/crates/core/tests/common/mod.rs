#![allow(dead_code)]

use collapse_lab::data::{center, generate, Dataset, SyntheticSpec};
use collapse_lab::linalg::random_orthogonal;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random positive definite covariance with eigenvalues in `[lo, hi]`.
pub fn random_covariance(d: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = random_orthogonal(d, rng);
    let eig = DVector::from_fn(d, |_, _| rng.random_range(lo..hi));
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

/// Centered dataset `y = M x + noise`.
pub fn random_dataset(d0: usize, d2: usize, n: usize, noise: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let a = random_covariance(d0, 0.3, 3.0, &mut r);
    let m = gaussian(d2, d0, &mut r);
    let spec = SyntheticSpec { d0, d2, n, a, m, seed };
    let ds = generate(&spec).unwrap();
    let y = &ds.y + gaussian(n, d2, &mut r) * noise;
    center(&Dataset::new(ds.x, y).unwrap()).0
}

/// Uncentered dataset with a non-zero mean on both sides.
pub fn shifted_dataset(d0: usize, d2: usize, n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut x = gaussian(n, d0, &mut r);
    let shift_x = gaussian(1, d0, &mut r);
    for mut row in x.row_iter_mut() {
        row += &shift_x;
    }
    let m = gaussian(d0, d2, &mut r);
    let mut y = &x * m + gaussian(n, d2, &mut r) * 0.3;
    let shift_y = gaussian(1, d2, &mut r);
    for mut row in y.row_iter_mut() {
        row += &shift_y;
    }
    Dataset::new(x, y).unwrap()
}

/// Per-mode objective in the encoder std dev after the factors are optimized:
/// `ζ² − (ζ − kσ)² 1[ζ > kσ] + β η_dec² (σ²/η_enc² − 1 − log σ²/η_enc²)` with
/// `k = √β η_dec / η_enc`. Returns `l(a) − l(b)` without forming either value,
/// so comparisons stay accurate to rounding level near the minimum.
pub fn sigma_objective_difference(zeta: f64, beta: f64, eta_enc: f64, eta_dec: f64, a: f64, b: f64) -> f64 {
    let k = beta.sqrt() * eta_dec / eta_enc;
    let level = beta * eta_dec * eta_dec;
    let fit = |s: f64| if zeta > k * s { zeta * zeta - (zeta - k * s).powi(2) } else { zeta * zeta };
    let fit_diff = if zeta > k * a && zeta > k * b {
        k * (a - b) * (2.0 * zeta - k * (a + b))
    } else {
        fit(a) - fit(b)
    };
    let prior_diff = level * ((a - b) * (a + b) / (eta_enc * eta_enc) - 2.0 * ((a - b) / b).ln_1p());
    fit_diff + prior_diff
}

/// Golden-section minimizer of the per-mode σ objective over
/// `[1e-6 η_enc, 1e3 η_enc]` (searched in log σ).
pub fn golden_sigma(zeta: f64, beta: f64, eta_enc: f64, eta_dec: f64) -> f64 {
    let diff = |a: f64, b: f64| sigma_objective_difference(zeta, beta, eta_enc, eta_dec, a, b);
    let (mut lo, mut hi) = ((1e-6 * eta_enc).ln(), (1e3 * eta_enc).ln());
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    for _ in 0..300 {
        if diff(c.exp(), d.exp()) <= 0.0 {
            hi = d;
            d = c;
            c = hi - r * (hi - lo);
        } else {
            lo = c;
            c = d;
            d = lo + r * (hi - lo);
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

use collapse_lab::closed_form::{DecVarMode, Hyperparams};
use collapse_lab::decoder_variance::solve_decoder_variance;
use collapse_lab::spectrum::DataSpectrum;

/// Rows of the regime table, used to construct instances landing in each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeRow {
    IllPosedZero,
    BoundaryInterval,
    NoCollapse,
    PartialCollapse,
    CompleteCollapse,
}

pub const REGIME_ROWS: [RegimeRow; 5] = [
    RegimeRow::IllPosedZero,
    RegimeRow::BoundaryInterval,
    RegimeRow::NoCollapse,
    RegimeRow::PartialCollapse,
    RegimeRow::CompleteCollapse,
];

/// Random non-increasing spectrum of `k` well-separated positive values,
/// padded with zeros to `min(d0, d2)`.
pub fn random_zeta(k: usize, d_star: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut z: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..5.0)).collect();
    z.sort_by(|a, b| b.total_cmp(a));
    for i in 1..k {
        z[i] = z[i].min(z[i - 1] * 0.95);
    }
    z.resize(d_star, 0.0);
    z
}

/// A spectrum and learnable-decoder-variance hyperparameters whose regime is
/// the requested row.
pub fn regime_instance(row: RegimeRow, seed: u64) -> (DataSpectrum, Hyperparams) {
    let mut r = rng(seed);
    loop {
        let d2 = r.random_range(2..=8);
        let d0 = r.random_range(2..=8);
        let d_star = d0.min(d2);
        let k = r.random_range(1..=d_star);
        let saturated = matches!(row, RegimeRow::IllPosedZero | RegimeRow::BoundaryInterval);
        let d1 = if saturated {
            r.random_range(k..=k + 2)
        } else if row == RegimeRow::NoCollapse {
            if k < 2 {
                continue;
            }
            r.random_range(1..k)
        } else {
            r.random_range(1..=d_star + 2)
        };
        let zeta = random_zeta(k, d_star, &mut r);
        let sp = DataSpectrum::from_singular_values(&zeta, d0, d2).unwrap();
        let d_hat_1 = k.min(d1);
        let hp = |beta: f64| Hyperparams::new(beta, d1).with_decvar_mode(DecVarMode::Learnable);
        let b = solve_decoder_variance(&sp, &hp(1.0)).unwrap().thresholds;
        let beta = match row {
            RegimeRow::IllPosedZero => r.random_range(0.05..0.95) * d2 as f64 / d_hat_1 as f64,
            RegimeRow::BoundaryInterval => d2 as f64 / d_hat_1 as f64,
            RegimeRow::NoCollapse => r.random_range(0.05..0.95) * b[d_hat_1 - 1],
            RegimeRow::CompleteCollapse => b[0] * r.random_range(1.0..3.0),
            RegimeRow::PartialCollapse => {
                if d_hat_1 < 2 {
                    continue;
                }
                let p = r.random_range(1..d_hat_1);
                let (lo, hi) = (b[p], b[p - 1]);
                if hi - lo < 1e-3 * hi {
                    continue;
                }
                r.random_range(lo..hi)
            }
        };
        return (sp, hp(beta));
    }
}
