//! Flat-parameter model with analytic forward and backward passes.
//!
//! Parameters are stored as one `f32` vector; every layer owns a weight range
//! followed by a bias range. Activations and gradients are computed in `f64`.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{Architecture, LayerSpec};
use super::Batch;
use crate::error::{Error, Result};
use crate::pruning::Mask;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batchnorm layer. Never aggregated across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    fn fresh(width: usize) -> Self {
        Self { mean: vec![0.0; width], var: vec![1.0; width] }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    spec: LayerSpec,
    weights: Range<usize>,
    bias: Range<usize>,
    bn: Option<usize>,
}

/// Per-batchnorm-layer batch statistics produced by a training-mode pass.
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    entries: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
}

enum Cache {
    Input(Array2<f64>),
    Norm { xhat: Array2<f64>, inv_std: Array1<f64> },
}

#[derive(Debug, Clone)]
pub struct DenseModel {
    arch: Architecture,
    group_slots: Vec<Vec<Slot>>,
    trunk_slots: Vec<Slot>,
    group_cols: Vec<Range<usize>>,
    prunable: Vec<Range<usize>>,
    params: Vec<f32>,
    bn: Vec<BnStats>,
}

impl DenseModel {
    /// Builds a zero-initialized model (batchnorm scales set to one).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut offset = 0;
        let mut bn_count = 0;
        let mut bn = Vec::new();
        let mut prunable = Vec::new();
        let mut make = |spec: &LayerSpec| {
            let weights = offset..offset + spec.weight_count();
            let bias = weights.end..weights.end + spec.bias_count();
            offset = bias.end;
            let bn_idx = match spec {
                LayerSpec::BatchNorm { width } => {
                    bn.push(BnStats::fresh(*width));
                    bn_count += 1;
                    Some(bn_count - 1)
                }
                _ => None,
            };
            if spec.is_prunable() {
                prunable.push(weights.clone());
            }
            Slot { spec: *spec, weights, bias, bn: bn_idx }
        };
        let group_slots: Vec<Vec<Slot>> =
            arch.groups.iter().map(|g| g.layers.iter().map(&mut make).collect()).collect();
        let trunk_slots: Vec<Slot> = arch.trunk.iter().map(&mut make).collect();
        let total = offset;

        let mut group_cols = Vec::with_capacity(arch.groups.len());
        let mut col = 0;
        for g in &arch.groups {
            group_cols.push(col..col + g.width);
            col += g.width;
        }

        let mut params = vec![0.0f32; total];
        for slot in group_slots.iter().flatten().chain(trunk_slots.iter()) {
            if matches!(slot.spec, LayerSpec::BatchNorm { .. }) {
                params[slot.weights.clone()].fill(1.0);
            }
        }
        Ok(Self { arch, group_slots, trunk_slots, group_cols, prunable, params, bn })
    }

    /// Kaiming-normal weights (variance `2 / fan_in`), zero biases,
    /// unit batchnorm scales. Deterministic in `seed`.
    pub fn kaiming_init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots: Vec<Slot> = model.slots().cloned().collect();
        for slot in slots.iter().filter(|s| s.spec.is_prunable()) {
            let std = (2.0 / slot.spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in &mut model.params[slot.weights.clone()] {
                *w = normal.sample(&mut rng) as f32;
            }
        }
        Ok(model)
    }

    fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.group_slots.iter().flatten().chain(self.trunk_slots.iter())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Parameter ranges holding prunable weights, in layer order.
    pub fn prunable_ranges(&self) -> &[Range<usize>] {
        &self.prunable
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable.iter().map(|r| r.len()).sum()
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    pub fn set_bn_stats(&mut self, stats: Vec<BnStats>) -> Result<()> {
        let same = stats.len() == self.bn.len()
            && stats.iter().zip(&self.bn).all(|(a, b)| a.mean.len() == b.mean.len());
        if !same {
            return Err(Error::Shape("batchnorm statistics do not match the model".into()));
        }
        self.bn = stats;
        Ok(())
    }

    pub fn reset_bn_stats(&mut self) {
        for s in &mut self.bn {
            s.mean.fill(0.0);
            s.var.fill(1.0);
        }
    }

    fn check_input(&self, features: &Array2<f64>) -> Result<()> {
        let want = self.arch.input_width();
        if features.ncols() != want {
            return Err(Error::Shape(format!("model expects {want} features, batch has {}", features.ncols())));
        }
        if features.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Predictions for every row. With `training` set, batchnorm normalizes
    /// with the batch's own statistics (running statistics are not touched).
    pub fn forward(&self, features: &Array2<f64>, training: bool) -> Result<Array1<f64>> {
        self.check_input(features)?;
        let out = self.run_forward(features, training, None, &mut Vec::new());
        Ok(out.column(0).to_owned())
    }

    pub fn predict(&self, batch: &Batch, training: bool) -> Result<Array1<f64>> {
        self.forward(&batch.features, training)
    }

    /// Mean-squared error on `batch` in inference mode.
    pub fn evaluate_mse(&self, batch: &Batch) -> Result<f64> {
        let pred = self.predict(batch, false)?;
        mse(pred.view(), batch.targets.view())
    }

    /// On/off state of every ReLU unit for every row, flattened.
    ///
    /// Finite-difference checks compare this pattern across perturbations to
    /// detect when a step crosses a kink of the piecewise-linear network.
    pub fn relu_activity(&self, features: &Array2<f64>, training: bool) -> Result<Vec<bool>> {
        self.check_input(features)?;
        let mut caches = Vec::new();
        self.run_forward(features, training, None, &mut caches);
        let mut pattern = Vec::new();
        let mut caches = caches.into_iter();
        for slot in self.slots() {
            let cache = caches.next().expect("one cache per layer");
            if let (LayerSpec::Relu { .. }, Cache::Input(x)) = (&slot.spec, cache) {
                pattern.extend(x.iter().map(|&v| v > 0.0));
            }
        }
        Ok(pattern)
    }

    /// Runs the network, pushing one cache per layer in parameter order.
    fn run_forward(
        &self,
        features: &Array2<f64>,
        training: bool,
        mut stats: Option<&mut BatchStats>,
        caches: &mut Vec<Cache>,
    ) -> Array2<f64> {
        let mut outputs = Vec::with_capacity(self.group_slots.len());
        for (slots, cols) in self.group_slots.iter().zip(&self.group_cols) {
            let mut x = features.slice(s![.., cols.clone()]).to_owned();
            for slot in slots {
                x = self.layer_forward(slot, x, training, stats.as_deref_mut(), caches);
            }
            outputs.push(x);
        }
        let views: Vec<_> = outputs.iter().map(|o| o.view()).collect();
        let mut x = concatenate(Axis(1), &views).expect("group outputs share row count");
        for slot in &self.trunk_slots {
            x = self.layer_forward(slot, x, training, stats.as_deref_mut(), caches);
        }
        x
    }

    fn weights_f64(&self, slot: &Slot) -> Vec<f64> {
        self.params[slot.weights.clone()].iter().map(|&w| w as f64).collect()
    }

    fn bias_f64(&self, slot: &Slot) -> Array1<f64> {
        self.params[slot.bias.clone()].iter().map(|&b| b as f64).collect()
    }

    fn layer_forward(
        &self,
        slot: &Slot,
        x: Array2<f64>,
        training: bool,
        stats: Option<&mut BatchStats>,
        caches: &mut Vec<Cache>,
    ) -> Array2<f64> {
        match slot.spec {
            LayerSpec::Dense { inputs, outputs } => {
                let w = Array2::from_shape_vec((outputs, inputs), self.weights_f64(slot)).expect("dense shape");
                let y = x.dot(&w.t()) + &self.bias_f64(slot);
                caches.push(Cache::Input(x));
                y
            }
            LayerSpec::Conv1d { in_channels, length, out_channels, kernel, stride } => {
                let w = self.weights_f64(slot);
                let b = self.bias_f64(slot);
                let out_len = slot.spec.conv_output_length();
                let n = x.nrows();
                let mut y = Array2::<f64>::zeros((n, out_channels * out_len));
                for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
                    for oc in 0..out_channels {
                        for t in 0..out_len {
                            let mut acc = b[oc];
                            for ic in 0..in_channels {
                                let wk = &w[(oc * in_channels + ic) * kernel..][..kernel];
                                let base = ic * length + t * stride;
                                for (j, &wv) in wk.iter().enumerate() {
                                    acc += wv * xr[base + j];
                                }
                            }
                            yr[oc * out_len + t] = acc;
                        }
                    }
                }
                caches.push(Cache::Input(x));
                y
            }
            LayerSpec::Relu { .. } => {
                let y = x.mapv(|v| v.max(0.0));
                caches.push(Cache::Input(x));
                y
            }
            LayerSpec::BatchNorm { width } => {
                let gamma = self.bias_free_scale(slot);
                let beta = self.bias_f64(slot);
                let idx = slot.bn.expect("batchnorm slot has stats");
                let (mean, inv_std) = if training {
                    let n = x.nrows();
                    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = x.var_axis(Axis(0), 0.0);
                    if let Some(stats) = stats {
                        let unbiased = if n > 1 { &var * (n as f64 / (n as f64 - 1.0)) } else { var.clone() };
                        stats.entries.push((idx, mean.to_vec(), unbiased.to_vec(), n));
                    }
                    (mean, var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()))
                } else {
                    let run = &self.bn[idx];
                    (
                        Array1::from(run.mean.clone()),
                        run.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
                    )
                };
                debug_assert_eq!(mean.len(), width);
                let xhat = (&x - &mean) * &inv_std;
                let y = &xhat * &gamma + &beta;
                caches.push(Cache::Norm { xhat, inv_std });
                y
            }
        }
    }

    fn bias_free_scale(&self, slot: &Slot) -> Array1<f64> {
        self.params[slot.weights.clone()].iter().map(|&g| g as f64).collect()
    }

    /// Mean-squared-error loss and its gradient with respect to every
    /// parameter, using batch statistics for batchnorm. Gradient entries at
    /// pruned positions are exactly zero.
    pub fn loss_and_gradient(&self, batch: &Batch, mask: &Mask) -> Result<(f64, Vec<f64>, BatchStats)> {
        mask.check_aligned(self)?;
        self.check_input(&batch.features)?;
        if batch.targets.len() != batch.features.nrows() {
            return Err(Error::Shape("targets and features disagree on batch size".into()));
        }
        let mut stats = BatchStats::default();
        let mut caches = Vec::new();
        let out = self.run_forward(&batch.features, true, Some(&mut stats), &mut caches);
        let pred = out.column(0);
        let n = pred.len() as f64;
        let resid = &pred - &batch.targets;
        let loss = resid.mapv(|r| r * r).sum() / n;

        let mut grad = vec![0.0f64; self.params.len()];
        let mut dy = (resid * (2.0 / n)).insert_axis(Axis(1));

        let mut caches = caches;
        for slot in self.trunk_slots.iter().rev() {
            let cache = caches.pop().expect("cache per trunk layer");
            dy = self.layer_backward(slot, cache, dy, &mut grad);
        }
        let mut col = 0;
        let mut group_grads = Vec::with_capacity(self.group_slots.len());
        for g in &self.arch.groups {
            let w = g.output_width();
            group_grads.push(dy.slice(s![.., col..col + w]).to_owned());
            col += w;
        }
        for (slots, mut dg) in self.group_slots.iter().zip(group_grads).rev() {
            for slot in slots.iter().rev() {
                let cache = caches.pop().expect("cache per group layer");
                dg = self.layer_backward(slot, cache, dg, &mut grad);
            }
        }
        mask.zero_pruned_f64(&mut grad);
        Ok((loss, grad, stats))
    }

    /// Gradient of the training-mode MSE loss; see [`Self::loss_and_gradient`].
    pub fn backward(&self, batch: &Batch, mask: &Mask) -> Result<Vec<f64>> {
        self.loss_and_gradient(batch, mask).map(|(_, g, _)| g)
    }

    /// Training-mode MSE loss (batch statistics), without gradients.
    pub fn training_loss(&self, batch: &Batch) -> Result<f64> {
        let pred = self.forward(&batch.features, true)?;
        mse(pred.view(), batch.targets.view())
    }

    fn layer_backward(&self, slot: &Slot, cache: Cache, dy: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        match (slot.spec, cache) {
            (LayerSpec::Dense { inputs, outputs }, Cache::Input(x)) => {
                let w = Array2::from_shape_vec((outputs, inputs), self.weights_f64(slot)).expect("dense shape");
                let dw = dy.t().dot(&x);
                for (g, d) in grad[slot.weights.clone()].iter_mut().zip(dw.iter()) {
                    *g += d;
                }
                for (g, d) in grad[slot.bias.clone()].iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
                    *g += d;
                }
                dy.dot(&w)
            }
            (LayerSpec::Conv1d { in_channels, length, out_channels, kernel, stride }, Cache::Input(x)) => {
                let w = self.weights_f64(slot);
                let out_len = slot.spec.conv_output_length();
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; out_channels];
                let mut dx = Array2::<f64>::zeros(x.raw_dim());
                for ((xr, dyr), mut dxr) in x.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
                    for oc in 0..out_channels {
                        for t in 0..out_len {
                            let d = dyr[oc * out_len + t];
                            if d == 0.0 {
                                continue;
                            }
                            db[oc] += d;
                            for ic in 0..in_channels {
                                let k0 = (oc * in_channels + ic) * kernel;
                                let base = ic * length + t * stride;
                                for j in 0..kernel {
                                    dw[k0 + j] += d * xr[base + j];
                                    dxr[base + j] += d * w[k0 + j];
                                }
                            }
                        }
                    }
                }
                for (g, d) in grad[slot.weights.clone()].iter_mut().zip(dw) {
                    *g += d;
                }
                for (g, d) in grad[slot.bias.clone()].iter_mut().zip(db) {
                    *g += d;
                }
                dx
            }
            (LayerSpec::Relu { .. }, Cache::Input(x)) => {
                let mut dx = dy;
                dx.zip_mut_with(&x, |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                dx
            }
            (LayerSpec::BatchNorm { .. }, Cache::Norm { xhat, inv_std }) => {
                let gamma = self.bias_free_scale(slot);
                let n = dy.nrows() as f64;
                let dgamma = (&dy * &xhat).sum_axis(Axis(0));
                let dbeta = dy.sum_axis(Axis(0));
                for (g, d) in grad[slot.weights.clone()].iter_mut().zip(dgamma.iter()) {
                    *g += d;
                }
                for (g, d) in grad[slot.bias.clone()].iter_mut().zip(dbeta.iter()) {
                    *g += d;
                }
                // dx = gamma * inv_std / n * (n dy - sum(dy) - xhat * sum(dy * xhat))
                let scale = &gamma * &inv_std / n;
                let inner = &dy * n - &dbeta - &(&xhat * &dgamma);
                inner * &scale
            }
            _ => unreachable!("cache kind always matches layer kind"),
        }
    }

    /// Folds batch statistics from a training step into the running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (idx, mean, var, _) in &stats.entries {
            let run = &mut self.bn[*idx];
            for (r, m) in run.mean.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in run.var.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

/// Mean-squared error. Errors on empty or mismatched inputs.
pub fn mse(pred: ArrayView1<f64>, targets: ArrayView1<f64>) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Domain("loss of an empty prediction vector".into()));
    }
    if pred.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    Ok(pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Root-mean-squared error.
pub fn loss_rmse(pred: &[f64], targets: &[f64]) -> Result<f64> {
    mse(ArrayView1::from(pred), ArrayView1::from(targets)).map(f64::sqrt)
}
