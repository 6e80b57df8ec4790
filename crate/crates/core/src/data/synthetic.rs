//! Synthetic non-IID silos.
//!
//! Every silo shares one ground-truth regressor `f`, a fixed random two-layer
//! tanh network. Silo `k` observes
//!
//! ```text
//! y = target_mean + target_scale * (1 + a_k) * f(x) + b_k + sigma_k * eps
//! ```
//!
//! with its own label offset `b_k`, slope perturbation `a_k`, noise level
//! `sigma_k`, and a rotation of feature pairs by `theta_k` that skews the
//! feature covariance. Per-silo knobs are spread evenly over `[-1, 1]` times
//! the configured magnitude, so all knobs at zero gives IID silos.
//!
//! Random draws never depend on the knob values: changing a knob changes the
//! arithmetic, not the underlying samples.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureGroup, Silo};
use crate::error::{Error, Result};

const HIDDEN: usize = 16;
const AR_COEFF: f64 = 0.6;
const REFERENCE_DRAWS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_silos: usize,
    /// Training rows per silo are drawn uniformly from this inclusive range.
    pub samples_min: usize,
    pub samples_max: usize,
    /// Validation rows as a fraction of the silo's training rows.
    pub val_fraction: f64,
    pub groups: Vec<FeatureGroup>,
    /// Largest per-silo label offset `|b_k|`, in target units.
    pub label_shift: f64,
    /// Largest per-silo slope perturbation `|a_k|`.
    pub label_scale: f64,
    /// Largest per-silo feature-pair rotation, in radians.
    pub rotation: f64,
    /// Relative spread of per-silo noise levels, in `[0, 1]`.
    pub noise_spread: f64,
    /// Baseline noise standard deviation, in target units.
    pub noise: f64,
    /// Input weight scale of the ground-truth network; small values make it
    /// nearly linear.
    pub nonlinearity: f64,
    pub target_mean: f64,
    pub target_scale: f64,
    pub first_year: i64,
    pub last_year: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_silos: 9,
            samples_min: 120,
            samples_max: 480,
            val_fraction: 0.25,
            groups: default_groups(),
            label_shift: 6.0,
            label_scale: 0.3,
            rotation: 0.5,
            noise_spread: 0.5,
            noise: 1.5,
            nonlinearity: 1.0,
            target_mean: 45.0,
            target_scale: 8.0,
            first_year: 1980,
            last_year: 2018,
            seed: 2018,
        }
    }
}

/// Weather, soil and management blocks plus a short yield-trend block.
pub fn default_groups() -> Vec<FeatureGroup> {
    vec![
        FeatureGroup { name: "weather".into(), channels: 3, length: 10, temporal: true },
        FeatureGroup { name: "soil".into(), channels: 2, length: 6, temporal: true },
        FeatureGroup { name: "management".into(), channels: 1, length: 6, temporal: true },
        FeatureGroup { name: "trend".into(), channels: 1, length: 3, temporal: false },
    ]
}

impl SyntheticConfig {
    /// Same generator with every heterogeneity knob at zero.
    pub fn iid(&self) -> Self {
        Self { label_shift: 0.0, label_scale: 0.0, rotation: 0.0, noise_spread: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.num_silos < 2 {
            return bad("need at least 2 silos");
        }
        if self.groups.is_empty() || self.groups.iter().any(|g| g.width() == 0) {
            return bad("every feature group needs at least one column");
        }
        if self.samples_min == 0 || self.samples_min > self.samples_max {
            return bad("samples_min must be in 1..=samples_max");
        }
        if !(self.val_fraction > 0.0) {
            return bad("val_fraction must be positive");
        }
        let knobs = [self.label_shift, self.label_scale, self.rotation, self.noise_spread, self.noise, self.nonlinearity];
        if knobs.iter().any(|k| !(*k >= 0.0) || !k.is_finite()) {
            return bad("heterogeneity knobs and noise must be finite and non-negative");
        }
        if self.noise_spread > 1.0 {
            return bad("noise_spread must not exceed 1");
        }
        if self.last_year <= self.first_year {
            return bad("last_year must be after first_year");
        }
        Ok(())
    }
}

struct GroundTruth {
    w: Array2<f64>,
    c: Array1<f64>,
    v: Array1<f64>,
    mean: f64,
    std: f64,
}

impl GroundTruth {
    fn raw(&self, x: &[f64]) -> f64 {
        let x = ndarray::ArrayView1::from(x);
        let h = self.w.dot(&x) + &self.c;
        h.iter().zip(&self.v).map(|(h, v)| h.tanh() * v).sum()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (self.raw(x) - self.mean) / self.std
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws one unrotated, unscaled feature row: AR(1) sequences along each
/// channel of temporal groups, IID values elsewhere.
fn draw_row(groups: &[FeatureGroup], rng: &mut ChaCha8Rng, row: &mut [f64]) {
    let mut col = 0;
    let innov = (1.0 - AR_COEFF * AR_COEFF).sqrt();
    for g in groups {
        for _ in 0..g.channels {
            let mut prev = normal(rng);
            for t in 0..g.length {
                let v = if t == 0 {
                    prev
                } else if g.temporal {
                    AR_COEFF * prev + innov * normal(rng)
                } else {
                    normal(rng)
                };
                row[col] = v;
                prev = v;
                col += 1;
            }
        }
    }
}

/// Evenly spaced positions in `[-1, 1]`.
fn spread(k: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        -1.0 + 2.0 * k as f64 / (n - 1) as f64
    }
}

pub fn gen_synthetic_silos(cfg: &SyntheticConfig) -> Result<Vec<Silo>> {
    cfg.validate()?;
    let d = super::total_width(&cfg.groups);
    let k_count = cfg.num_silos;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let scale_in = 1.0 / (d as f64).sqrt();
    let w = Array2::from_shape_fn((HIDDEN, d), |_| normal(&mut rng) * cfg.nonlinearity * scale_in);
    let c = Array1::from_shape_fn(HIDDEN, |_| normal(&mut rng) * 0.5);
    let v = Array1::from_shape_fn(HIDDEN, |_| normal(&mut rng));
    let col_scale: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();

    let mut truth = GroundTruth { w, c, v, mean: 0.0, std: 1.0 };
    let mut row = vec![0.0; d];
    let mut refs = Vec::with_capacity(REFERENCE_DRAWS);
    for _ in 0..REFERENCE_DRAWS {
        draw_row(&cfg.groups, &mut rng, &mut row);
        row.iter_mut().zip(&col_scale).for_each(|(x, s)| *x *= s);
        refs.push(truth.raw(&row));
    }
    let n = refs.len() as f64;
    truth.mean = refs.iter().sum::<f64>() / n;
    truth.std = (refs.iter().map(|r| (r - truth.mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-9);

    // Independent orderings so the offset, slope, rotation and noise knobs
    // are not perfectly correlated across silos.
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut p: Vec<usize> = (0..k_count).collect();
        p.shuffle(&mut rng);
        perms.push(p);
    }
    let sizes: Vec<usize> = (0..k_count).map(|_| rng.random_range(cfg.samples_min..=cfg.samples_max)).collect();

    let mut silos = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
        srng.set_stream(1 + k as u64);
        let offset = cfg.label_shift * spread(k, k_count);
        let slope = cfg.label_scale * spread(perms[0][k], k_count);
        let theta = cfg.rotation * spread(perms[1][k], k_count);
        let sigma = cfg.noise * (1.0 + cfg.noise_spread * spread(perms[2][k], k_count));
        let (sin, cos) = theta.sin_cos();

        let n_train = sizes[k];
        let n_val = ((cfg.val_fraction * n_train as f64).round() as usize).max(4);
        let total = n_train + n_val;
        let mut features = Array2::<f64>::zeros((total, d));
        let mut targets = Array1::<f64>::zeros(total);
        let mut years = Vec::with_capacity(total);
        for i in 0..total {
            draw_row(&cfg.groups, &mut srng, &mut row);
            for (x, s) in row.iter_mut().zip(&col_scale) {
                *x *= s;
            }
            for pair in row.chunks_exact_mut(2) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = cos * a - sin * b;
                pair[1] = sin * a + cos * b;
            }
            let eps = normal(&mut srng);
            let year_draw = srng.random_range(cfg.first_year..cfg.last_year);
            let f = truth.eval(&row);
            targets[i] = cfg.target_mean + cfg.target_scale * (1.0 + slope) * f + offset + sigma * eps;
            features.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
            years.push(if i < n_train { year_draw } else { cfg.last_year });
        }
        silos.push(Silo {
            id: format!("silo_{:02}", k + 1),
            features,
            targets,
            years,
            train: (0..n_train).collect(),
            val: (n_train..total).collect(),
        });
    }
    Ok(silos)
}
