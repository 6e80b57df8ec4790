//! Data silos: synthetic non-IID generation, CSV ingestion, oversampling,
//! normalization and train/validation splits.

mod csv_io;
mod synthetic;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use csv_io::{load_csv, write_csv, CsvLoad, CsvSchema};
pub use synthetic::{default_groups, gen_synthetic_silos, SyntheticConfig};

use crate::error::{Error, Result};
use crate::nn::Batch;

/// A block of feature columns laid out channel-major (`channels * length`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGroup {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    /// Temporal groups get a convolutional feature extractor.
    #[serde(default)]
    pub temporal: bool,
}

impl FeatureGroup {
    pub fn width(&self) -> usize {
        self.channels * self.length
    }
}

pub fn total_width(groups: &[FeatureGroup]) -> usize {
    groups.iter().map(FeatureGroup::width).sum()
}

/// One data-holding participant.
#[derive(Debug, Clone, PartialEq)]
pub struct Silo {
    pub id: String,
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
    pub years: Vec<i64>,
    /// Row indices used for training; may repeat after oversampling.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Silo {
    pub fn train_batch(&self) -> Batch {
        self.batch(&self.train)
    }

    pub fn val_batch(&self) -> Batch {
        self.batch(&self.val)
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        Batch { features: self.features.select(Axis(0), idx), targets: self.targets.select(Axis(0), idx) }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Splits rows by year: rows from the latest `val_years` years (relative to
/// `max_year`) go to validation, the rest to training.
pub fn split_by_year(years: &[i64], max_year: i64, val_years: usize) -> (Vec<usize>, Vec<usize>) {
    let cutoff = max_year - val_years as i64;
    let (val, train): (Vec<usize>, Vec<usize>) = (0..years.len()).partition(|&i| years[i] > cutoff);
    (train, val)
}

/// Random oversampling of every silo's training rows up to the largest
/// training set. Original rows are all kept; the extra rows are drawn with
/// replacement. Validation rows are untouched.
pub fn oversample_equalize(silos: &[Silo], seed: u64) -> Result<Vec<Silo>> {
    if let Some(s) = silos.iter().find(|s| s.train.is_empty()) {
        return Err(Error::Data(format!("silo {} has no training rows", s.id)));
    }
    let target = silos.iter().map(|s| s.train.len()).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(silos
        .iter()
        .enumerate()
        .map(|(k, s)| {
            rng.set_stream(k as u64);
            let mut out = s.clone();
            let n = s.train.len();
            for _ in n..target {
                out.train.push(s.train[rng.random_range(0..n)]);
            }
            out
        })
        .collect())
}

/// Pooled training statistics used to z-score features and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Features with zero training variance; these are mapped to 0.
    pub constant_features: Vec<usize>,
}

const MIN_STD: f64 = 1e-12;

impl NormStats {
    pub fn transform_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if self.feature_std[j] < MIN_STD { 0.0 } else { (*v - self.feature_mean[j]) / self.feature_std[j] };
        }
    }

    pub fn inverse_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if self.feature_std[j] < MIN_STD {
                self.feature_mean[j]
            } else {
                *v * self.feature_std[j] + self.feature_mean[j]
            };
        }
    }

    pub fn transform_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn inverse_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }
}

/// Z-scores every silo with statistics pooled over all training rows
/// (repeats count as often as they appear).
pub fn normalize(silos: &[Silo]) -> Result<(Vec<Silo>, NormStats)> {
    let width = silos.first().map(|s| s.features.ncols()).ok_or_else(|| Error::Data("no silos".into()))?;
    if silos.iter().any(|s| s.features.ncols() != width) {
        return Err(Error::Shape("silos disagree on feature count".into()));
    }
    let count: usize = silos.iter().map(|s| s.train.len()).sum();
    if count == 0 {
        return Err(Error::Data("no training rows to normalize with".into()));
    }
    let n = count as f64;
    let mut mean = vec![0.0; width];
    let mut tmean = 0.0;
    for s in silos {
        for &i in &s.train {
            for (m, v) in mean.iter_mut().zip(s.features.row(i)) {
                *m += v;
            }
            tmean += s.targets[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    tmean /= n;
    let mut var = vec![0.0; width];
    let mut tvar = 0.0;
    for s in silos {
        for &i in &s.train {
            for ((acc, v), m) in var.iter_mut().zip(s.features.row(i)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
            tvar += (s.targets[i] - tmean).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let tstd = (tvar / n).sqrt();
    let constant_features = (0..width).filter(|&j| std[j] < MIN_STD).collect();
    let stats = NormStats {
        feature_mean: mean,
        feature_std: std,
        target_mean: tmean,
        target_std: if tstd < MIN_STD { 1.0 } else { tstd },
        constant_features,
    };
    let out = silos
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for mut row in s.features.rows_mut() {
                stats.transform_row(row.as_slice_mut().expect("standard layout"));
            }
            s.targets.mapv_inplace(|y| stats.transform_target(y));
            s
        })
        .collect();
    Ok((out, stats))
}

/// SHA-256 over every silo's ids, values, years and split, as lowercase hex.
pub fn fingerprint(silos: &[Silo]) -> String {
    let mut h = Sha256::new();
    for s in silos {
        h.update(s.id.as_bytes());
        h.update([0u8]);
        for v in s.features.iter().chain(s.targets.iter()) {
            h.update(v.to_le_bytes());
        }
        for y in &s.years {
            h.update(y.to_le_bytes());
        }
        for i in s.train.iter().chain([usize::MAX].iter()).chain(s.val.iter()) {
            h.update((*i as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silo(id: &str, n: usize) -> Silo {
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        Silo {
            id: id.into(),
            features,
            targets: (0..n).map(|i| i as f64).collect(),
            years: vec![2000; n],
            train: (0..n).collect(),
            val: Vec::new(),
        }
    }

    #[test]
    fn oversampling_equalizes_and_keeps_originals() {
        let out = oversample_equalize(&[silo("a", 3), silo("b", 6)], 5).unwrap();
        assert_eq!(out[0].train.len(), 6);
        assert_eq!(out[1].train.len(), 6);
        assert_eq!(&out[0].train[..3], &[0, 1, 2]);
        assert!(out[0].train.iter().all(|&i| i < 3));
        assert_eq!(out[1].train, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn oversampling_equal_silos_is_identity() {
        let silos = [silo("a", 4), silo("b", 4)];
        assert_eq!(oversample_equalize(&silos, 1).unwrap(), silos.to_vec());
    }

    #[test]
    fn uneven_silo_sizes_all_reach_the_largest() {
        let sizes = [3116, 2736, 3316, 2479, 2244, 2432, 2369, 598, 1207];
        let silos: Vec<Silo> = sizes.iter().enumerate().map(|(k, &n)| silo(&k.to_string(), n)).collect();
        let out = oversample_equalize(&silos, 9).unwrap();
        assert!(out.iter().all(|s| s.train.len() == 3316));
    }

    #[test]
    fn empty_silo_cannot_be_oversampled() {
        assert!(matches!(oversample_equalize(&[silo("a", 0), silo("b", 2)], 0), Err(Error::Data(_))));
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let mut s = silo("a", 5);
        s.features.column_mut(1).fill(7.0);
        let (out, stats) = normalize(&[s]).unwrap();
        assert!(out[0].features.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(stats.constant_features, vec![1]);
    }

    #[test]
    fn normalized_training_features_are_standard() {
        let (out, _) = normalize(&[silo("a", 7), silo("b", 4)]).unwrap();
        let pooled: Vec<f64> = out.iter().flat_map(|s| s.features.column(0).to_vec()).collect();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_undoes_transform() {
        let s = silo("a", 6);
        let (out, stats) = normalize(std::slice::from_ref(&s)).unwrap();
        for i in 0..6 {
            let mut row = out[0].features.row(i).to_vec();
            stats.inverse_row(&mut row);
            for (a, b) in row.iter().zip(s.features.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((stats.inverse_target(out[0].targets[i]) - s.targets[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn year_split_holds_out_the_latest() {
        let (train, val) = split_by_year(&[2015, 2016, 2018, 2017, 2018], 2018, 1);
        assert_eq!(train, vec![0, 1, 3]);
        assert_eq!(val, vec![2, 4]);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = silo("a", 3);
        let mut b = a.clone();
        assert_eq!(fingerprint(&[a.clone()]), fingerprint(&[b.clone()]));
        b.targets[0] = 0.5;
        assert_ne!(fingerprint(&[a]), fingerprint(&[b]));
    }
}
