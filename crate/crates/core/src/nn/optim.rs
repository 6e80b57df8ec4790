//! Adam with decoupled weight decay, round-based step decay and mask-aware
//! updates.

use serde::{Deserialize, Serialize};

use super::DenseModel;
use crate::error::{Error, Result};
use crate::pruning::Mask;

/// Learning-rate and regularization settings shared by all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Rounds at which the learning rate is multiplied by `decay_factor`.
    pub decay_rounds: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-2,
            weight_decay: 1e-4,
            decay_rounds: vec![5, 10],
            decay_factor: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.decay_factor > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    /// Total updates applied; never reset.
    steps: u64,
    /// Updates since the moments were last zeroed; drives bias correction.
    moment_steps: u64,
    round: usize,
}

impl OptState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Self {
        Self {
            config,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
            steps: 0,
            moment_steps: 0,
            round: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn set_round(&mut self, round: usize) {
        self.round = round;
    }

    /// Base rate times `decay_factor` for every decay round already reached.
    pub fn learning_rate(&self) -> f64 {
        let crossed = self.config.decay_rounds.iter().filter(|&&r| self.round >= r).count();
        self.config.learning_rate * self.config.decay_factor.powi(crossed as i32)
    }

    /// Zeroes both moment vectors so training restarts from fresh statistics.
    pub fn reset_moments(&mut self) {
        self.first.fill(0.0);
        self.second.fill(0.0);
        self.moment_steps = 0;
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first, &self.second)
    }

    pub fn moments_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.first, &mut self.second)
    }

    /// One Adam update. Pruned weights are forced to zero together with their
    /// moments; decay is applied to every other parameter.
    pub fn step(&mut self, model: &mut DenseModel, grad: &[f64], mask: &Mask) -> Result<()> {
        let n = model.param_count();
        if grad.len() != n || self.first.len() != n {
            return Err(Error::Alignment(format!(
                "gradient {} / optimizer {} / model {} lengths differ",
                grad.len(),
                self.first.len(),
                n
            )));
        }
        mask.check_aligned(model)?;
        self.steps += 1;
        self.moment_steps += 1;
        let c = &self.config;
        let lr = self.learning_rate();
        let bc1 = 1.0 - c.beta1.powi(self.moment_steps.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.moment_steps.min(i32::MAX as u64) as i32);
        let params = model.params_mut();
        for i in 0..n {
            let g = grad[i];
            let m = c.beta1 * self.first[i] + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.second[i] + (1.0 - c.beta2) * g * g;
            self.first[i] = m;
            self.second[i] = v;
            let p = params[i] as f64;
            let update = (m / bc1) / ((v / bc2).sqrt() + c.epsilon) + c.weight_decay * p;
            params[i] = (p - lr * update) as f32;
        }
        mask.apply_to(params);
        mask.zero_pruned_f64(&mut self.first);
        mask.zero_pruned_f64(&mut self.second);
        Ok(())
    }
}

/// Free-function form of [`OptState::step`].
pub fn adam_step(model: &mut DenseModel, opt: &mut OptState, grad: &[f64], mask: &Mask) -> Result<()> {
    opt.step(model, grad, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, LayerSpec};

    fn scalar_model(w: f32) -> DenseModel {
        let arch = Architecture::sequential(vec![LayerSpec::dense(1, 1)]).unwrap();
        let mut m = DenseModel::zeros(arch).unwrap();
        m.set_params(&[w, 0.0]).unwrap();
        m
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut m = scalar_model(0.7);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptState::new(cfg, 2);
        let mask = Mask::dense_for(&m);
        opt.step(&mut m, &[0.0, 0.0], &mask).unwrap();
        assert_eq!(m.params(), &[0.7, 0.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut m = scalar_model(1.0);
        let cfg = OptimizerConfig { learning_rate: 1e-2, weight_decay: 0.0, ..Default::default() };
        let mut opt = OptState::new(cfg, 2);
        let dense = Mask::dense_for(&m);
        opt.step(&mut m, &[1.0, 0.0], &dense).unwrap();
        // m_hat = 1, v_hat = 1, update = 1 / (1 + 1e-8)
        assert!((m.params()[0] as f64 - (1.0 - 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn pruned_position_stays_zero_with_stale_moments() {
        let mut m = scalar_model(0.0);
        let mut opt = OptState::new(OptimizerConfig::default(), 2);
        opt.moments_mut().0[0] = 5.0;
        opt.moments_mut().1[0] = 1.0;
        let mask = Mask::from_bits_for(&m, vec![false]).unwrap();
        opt.step(&mut m, &[3.0, 1.0], &mask).unwrap();
        assert_eq!(m.params()[0], 0.0);
        assert_ne!(m.params()[1], 0.0);
    }

    #[test]
    fn learning_rate_decays_at_configured_rounds() {
        let mut opt = OptState::new(OptimizerConfig { learning_rate: 1.0, ..Default::default() }, 1);
        let lr = |opt: &mut OptState, r| {
            opt.set_round(r);
            opt.learning_rate()
        };
        assert_eq!(lr(&mut opt, 0), 1.0);
        assert_eq!(lr(&mut opt, 4), 1.0);
        assert!((lr(&mut opt, 5) - 0.2).abs() < 1e-15);
        assert!((lr(&mut opt, 10) - 0.04).abs() < 1e-15);
        assert!((lr(&mut opt, 39) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn misaligned_gradient_is_rejected() {
        let mut m = scalar_model(1.0);
        let mut opt = OptState::new(OptimizerConfig::default(), 2);
        let dense = Mask::dense_for(&m);
        let err = opt.step(&mut m, &[1.0], &dense);
        assert!(matches!(err, Err(Error::Alignment(_))));
    }
}
