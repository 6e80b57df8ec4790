//! Per-client, per-round pruning decisions.
//!
//! A client may prune only when every gate is open: warmup has passed, the
//! final rounds are not reached, the target sparsity is not reached, enough
//! recovery rounds have elapsed since the last prune, and the latest
//! validation loss is within `recovery_factor` of the best loss seen so far.
//! One-shot schedules additionally prune at most once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ROUNDS: usize = 40;
pub const DEFAULT_WARMUP_ROUNDS: usize = 2;
pub const DEFAULT_FINAL_FREEZE: usize = 3;
pub const DEFAULT_RECOVERY_FACTOR: f64 = 1.15;
/// Sparsity counts as reached within this margin of the target.
pub const DEFAULT_TARGET_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    Iterative,
    IterativeLt,
    OneShot,
    OneShotLt,
    None,
}

impl ScheduleVariant {
    pub fn is_one_shot(self) -> bool {
        matches!(self, ScheduleVariant::OneShot | ScheduleVariant::OneShotLt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub variant: ScheduleVariant,
    /// Fraction of the surviving weights removed per prune event.
    pub rate: f64,
    pub target_sparsity: f64,
    pub warmup_rounds: usize,
    /// No pruning in this many final rounds.
    pub final_freeze: usize,
    /// Full rounds that must pass after a prune before the next one.
    pub min_recovery_rounds: usize,
    /// Latest loss must be at most this multiple of the best loss.
    pub recovery_factor: f64,
    pub lth_reset: bool,
    /// All clients prune together once at least half pass their loss gate.
    pub synchronized: bool,
    pub target_tolerance: f64,
}

impl PruneSchedule {
    pub fn none() -> Self {
        Self {
            variant: ScheduleVariant::None,
            rate: 0.0,
            target_sparsity: 0.0,
            warmup_rounds: DEFAULT_WARMUP_ROUNDS,
            final_freeze: DEFAULT_FINAL_FREEZE,
            min_recovery_rounds: 0,
            recovery_factor: DEFAULT_RECOVERY_FACTOR,
            lth_reset: false,
            synchronized: false,
            target_tolerance: DEFAULT_TARGET_TOLERANCE,
        }
    }

    pub fn for_variant(variant: ScheduleVariant) -> Self {
        let base = Self { variant, ..Self::none() };
        match variant {
            ScheduleVariant::Iterative => Self { rate: 0.25, target_sparsity: 0.80, min_recovery_rounds: 3, ..base },
            ScheduleVariant::IterativeLt => Self {
                rate: 0.415,
                target_sparsity: 0.80,
                min_recovery_rounds: 7,
                lth_reset: true,
                synchronized: true,
                ..base
            },
            ScheduleVariant::OneShot => Self { rate: 0.70, target_sparsity: 0.70, ..base },
            ScheduleVariant::OneShotLt => Self { rate: 0.70, target_sparsity: 0.70, lth_reset: true, ..base },
            ScheduleVariant::None => base,
        }
    }

    pub fn prunes(&self) -> bool {
        self.variant != ScheduleVariant::None
    }

    pub fn validate(&self) -> Result<()> {
        if !self.prunes() {
            return Ok(());
        }
        let fail = |what: &str| Err(Error::Config(format!("schedule {:?}: {what}", self.variant)));
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return fail("rate must lie in (0, 1)");
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return fail("target sparsity must lie in (0, 1)");
        }
        if !(self.recovery_factor >= 1.0) {
            return fail("recovery factor must be at least 1");
        }
        if !(0.0..1.0).contains(&self.target_tolerance) {
            return fail("target tolerance must lie in [0, 1)");
        }
        Ok(())
    }

    fn target_reached(&self, sparsity: f64) -> bool {
        sparsity >= self.target_sparsity - self.target_tolerance
    }
}

/// The built-in schedule for every variant.
pub fn default_schedules() -> BTreeMap<ScheduleVariant, PruneSchedule> {
    [
        ScheduleVariant::Iterative,
        ScheduleVariant::IterativeLt,
        ScheduleVariant::OneShot,
        ScheduleVariant::OneShotLt,
        ScheduleVariant::None,
    ]
    .into_iter()
    .map(|v| (v, PruneSchedule::for_variant(v)))
    .collect()
}

/// Smallest number of prune events whose geometric survival reaches the
/// target (within the schedule's tolerance). `None` for non-pruning schedules.
pub fn expected_prune_events(schedule: &PruneSchedule) -> Option<usize> {
    if !schedule.prunes() || schedule.rate <= 0.0 || schedule.rate >= 1.0 {
        return None;
    }
    let mut survive = 1.0;
    for k in 1..=10_000 {
        survive *= 1.0 - schedule.rate;
        if schedule.target_reached(1.0 - survive) {
            return Some(k);
        }
    }
    None
}

/// Per-round validation losses of one client and its pruning bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    losses: Vec<f64>,
    best: Option<f64>,
    /// Full rounds completed since the last prune; `None` before any prune.
    rounds_since_prune: Option<usize>,
    prune_events: usize,
}

impl LossHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, loss: f64) {
        self.losses.push(loss);
        self.best = Some(self.best.map_or(loss, |b| b.min(loss)));
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn latest(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn rounds_since_prune(&self) -> Option<usize> {
        self.rounds_since_prune
    }

    pub fn prune_events(&self) -> usize {
        self.prune_events
    }

    /// Closes a round; `pruned` says whether this client pruned in it.
    pub fn finish_round(&mut self, pruned: bool) {
        if pruned {
            self.rounds_since_prune = Some(0);
            self.prune_events += 1;
        } else if let Some(k) = self.rounds_since_prune.as_mut() {
            *k += 1;
        }
    }
}

/// Every gate except the loss-recovery one.
pub fn structural_gates_open(
    schedule: &PruneSchedule,
    history: &LossHistory,
    round: usize,
    total_rounds: usize,
    current_sparsity: f64,
) -> bool {
    schedule.prunes()
        && round >= schedule.warmup_rounds
        && round + schedule.final_freeze < total_rounds
        && !schedule.target_reached(current_sparsity)
        && history.rounds_since_prune.is_none_or(|k| k >= schedule.min_recovery_rounds)
        && !(schedule.variant.is_one_shot() && history.prune_events > 0)
}

/// Latest loss within `recovery_factor` of the best loss.
pub fn loss_recovered(schedule: &PruneSchedule, history: &LossHistory) -> bool {
    match (history.latest(), history.best()) {
        (Some(latest), Some(best)) => latest <= schedule.recovery_factor * best,
        _ => false,
    }
}

pub fn should_prune(
    schedule: &PruneSchedule,
    history: &LossHistory,
    round: usize,
    total_rounds: usize,
    current_sparsity: f64,
) -> bool {
    structural_gates_open(schedule, history, round, total_rounds, current_sparsity)
        && loss_recovered(schedule, history)
}
