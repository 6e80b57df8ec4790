//! Communication rounds, aggregation and the experiment driver.
//!
//! A round broadcasts the global parameters, lets every client train on its
//! own silo, applies the pruning schedule, and aggregates the uploads. For
//! pruning methods each weight is averaged only over the clients whose mask
//! keeps it, so client sub-networks stay local; a weight no client keeps
//! retains its previous global value.
//!
//! Clients run in parallel but draw from per-client, per-round random streams
//! and are aggregated in fixed order, so results do not depend on the number
//! of worker threads.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{bytes_to_kb, idealized_bytes, wire_bytes, ByteCounts, CostLedger, Direction, LedgerTotals};
use crate::config::{DataSource, ExperimentConfig, Method};
use crate::data::{
    fingerprint, gen_synthetic_silos, load_csv, normalize, oversample_equalize, FeatureGroup, NormStats, Silo,
};
use crate::error::{Error, Result};
use crate::nn::{train_epochs, Architecture, Batch, DenseModel, OptState, TrainSettings};
use crate::pruning::{magnitude_prune, reset_to_init, sparsity, InitSnapshot, Mask};
use crate::schedule::{loss_recovered, structural_gates_open, LossHistory, PruneSchedule};

pub const RESULT_VERSION: u32 = 1;

const PHASE_TRAIN: u64 = 0;
const PHASE_RECOVER: u64 = 1;

/// Random stream for one client in one training phase of one round.
fn client_rng(seed: u64, round: usize, client: usize, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round as u64) << 32) | ((client as u64) << 1) | phase);
    rng
}

/// Settings shared by every client's local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub epochs: usize,
    pub recovery_epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    pub seed: u64,
    /// Validation RMSE is reported in target units: normalized RMSE times this.
    pub target_std: f64,
}

impl LocalSettings {
    fn train(&self, epochs: usize) -> TrainSettings {
        TrainSettings { epochs, batch_size: self.batch_size, patience: self.patience }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub index: usize,
    pub id: String,
    pub train: Batch,
    pub val: Batch,
    pub model: DenseModel,
    pub mask: Mask,
    pub opt: OptState,
    pub init: InitSnapshot,
    pub history: LossHistory,
}

impl ClientState {
    /// A client starting from `init_model`, with a dense mask.
    pub fn new(index: usize, silo: &Silo, init_model: &DenseModel, opt: OptState) -> Self {
        Self {
            index,
            id: silo.id.clone(),
            train: silo.train_batch(),
            val: silo.val_batch(),
            model: init_model.clone(),
            mask: Mask::dense_for(init_model),
            opt,
            init: InitSnapshot::capture(init_model),
            history: LossHistory::new(),
        }
    }

    pub fn sparsity(&self) -> f64 {
        sparsity(&self.mask).sparsity
    }

    /// Validation RMSE of the current local model in normalized units.
    pub fn val_rmse(&self) -> Result<f64> {
        Ok(self.model.evaluate_mse(&self.val)?.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub total_rounds: usize,
    pub params: Vec<f32>,
    /// Last uploaded mask of every client, in client order.
    pub masks: Vec<Mask>,
    pub ledger: CostLedger,
}

impl GlobalState {
    pub fn new(init: &DenseModel, clients: usize, total_rounds: usize) -> Self {
        Self {
            round: 0,
            total_rounds,
            params: init.params().to_vec(),
            masks: vec![Mask::dense_for(init); clients],
            ledger: CostLedger::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Validation RMSE per client, in target units.
    pub client_rmse: Vec<f64>,
    pub mean_rmse: f64,
    pub min_rmse: f64,
    pub max_rmse: f64,
    pub client_sparsity: Vec<f64>,
    pub mean_sparsity: f64,
    pub pruned: Vec<bool>,
    pub upload: ByteCounts,
    pub download: ByteCounts,
}

impl RoundMetrics {
    fn new(round: usize, client_rmse: Vec<f64>, client_sparsity: Vec<f64>, pruned: Vec<bool>) -> Self {
        let n = client_rmse.len().max(1) as f64;
        Self {
            round,
            mean_rmse: client_rmse.iter().sum::<f64>() / n,
            min_rmse: client_rmse.iter().copied().fold(f64::INFINITY, f64::min),
            max_rmse: client_rmse.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_sparsity: client_sparsity.iter().sum::<f64>() / n,
            client_rmse,
            client_sparsity,
            pruned,
            upload: ByteCounts::default(),
            download: ByteCounts::default(),
        }
    }
}

fn transfer_cost(param_count: usize, mask: &Mask) -> (u64, u64) {
    (
        idealized_bytes(param_count, mask.len(), mask.survivors()),
        wire_bytes(mask.segments().len(), param_count, mask.len(), mask.survivors()),
    )
}

/// Broadcast and first local training pass: the client model becomes the
/// global parameters under the client's own mask, trains for `epochs`, and
/// records its validation loss.
pub fn client_train(global: &GlobalState, client: &mut ClientState, settings: &LocalSettings) -> Result<()> {
    if global.params.len() != client.model.param_count() {
        return Err(Error::Alignment(format!(
            "global model has {} parameters, client {} has {}",
            global.params.len(),
            client.id,
            client.model.param_count()
        )));
    }
    client.model.set_params(&global.params)?;
    client.mask.apply_to(client.model.params_mut());
    client.opt.set_round(global.round);
    let mut rng = client_rng(settings.seed, global.round, client.index, PHASE_TRAIN);
    train_epochs(
        &mut client.model,
        &mut client.opt,
        &client.mask,
        &client.train,
        &client.val,
        settings.train(settings.epochs),
        &mut rng,
    )?;
    client.history.record(client.model.evaluate_mse(&client.val)?);
    Ok(())
}

/// Prune (if `prune`), optionally rewind to the initial weights, and retrain.
pub fn client_finish(
    global: &GlobalState,
    client: &mut ClientState,
    schedule: &PruneSchedule,
    prune: bool,
    settings: &LocalSettings,
) -> Result<()> {
    if prune {
        client.mask = magnitude_prune(&client.model, &client.mask, schedule.rate)?;
        client.mask.apply_to(client.model.params_mut());
        if schedule.lth_reset {
            client.model = reset_to_init(&client.model, &client.init, &client.mask)?;
            client.opt.reset_moments();
        }
        let mut rng = client_rng(settings.seed, global.round, client.index, PHASE_RECOVER);
        train_epochs(
            &mut client.model,
            &mut client.opt,
            &client.mask,
            &client.train,
            &client.val,
            settings.train(settings.recovery_epochs),
            &mut rng,
        )?;
    }
    client.history.finish_round(prune);
    Ok(())
}

/// One client's full round outside synchronized schedules. Returns whether it
/// pruned.
pub fn client_update(
    global: &GlobalState,
    client: &mut ClientState,
    schedule: &PruneSchedule,
    settings: &LocalSettings,
) -> Result<bool> {
    client_train(global, client, settings)?;
    let prune = crate::schedule::should_prune(
        schedule,
        &client.history,
        global.round,
        global.total_rounds,
        client.sparsity(),
    );
    client_finish(global, client, schedule, prune, settings)?;
    Ok(prune)
}

/// Which clients prune this round. Synchronized schedules prune every client
/// whose structural gates are open, but only when at least half of all
/// clients pass their loss gate.
pub fn prune_decisions(schedule: &PruneSchedule, clients: &[ClientState], round: usize, total: usize) -> Vec<bool> {
    let open: Vec<bool> = clients
        .iter()
        .map(|c| structural_gates_open(schedule, &c.history, round, total, c.sparsity()))
        .collect();
    let recovered: Vec<bool> = clients.iter().map(|c| loss_recovered(schedule, &c.history)).collect();
    if schedule.synchronized {
        let votes = recovered.iter().filter(|&&r| r).count();
        let go = 2 * votes >= clients.len();
        open.into_iter().map(|o| o && go).collect()
    } else {
        open.into_iter().zip(recovered).map(|(o, r)| o && r).collect()
    }
}

fn check_uploads(lengths: impl Iterator<Item = usize>) -> Result<usize> {
    let mut n = None;
    for len in lengths {
        match n {
            None => n = Some(len),
            Some(m) if m != len => return Err(Error::Alignment(format!("upload lengths {m} and {len} differ"))),
            _ => {}
        }
    }
    n.ok_or_else(|| Error::Precondition("no uploads to aggregate".into()))
}

/// Per-weight mean over the clients whose mask keeps the weight. Weights kept
/// by nobody keep their value from `previous`; parameters outside the masks
/// are averaged over all clients.
pub fn aggregate_localized(previous: &[f32], uploads: &[(&[f32], &Mask)]) -> Result<Vec<f32>> {
    let n = check_uploads(uploads.iter().map(|(p, _)| p.len()))?;
    if previous.len() != n {
        return Err(Error::Alignment(format!("previous global has {} parameters, uploads {n}", previous.len())));
    }
    let segments = uploads[0].1.segments();
    if uploads.iter().any(|(_, m)| m.segments() != segments) {
        return Err(Error::Alignment("client masks cover different layers".into()));
    }
    if segments.last().is_some_and(|r| r.end > n) {
        return Err(Error::Alignment("masks reach past the parameter vector".into()));
    }
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for (params, mask) in uploads {
        for (i, v) in params.iter().enumerate() {
            if mask.keeps_param(i) {
                sum[i] += *v as f64;
                count[i] += 1;
            }
        }
    }
    Ok((0..n).map(|i| if count[i] == 0 { previous[i] } else { (sum[i] / count[i] as f64) as f32 }).collect())
}

/// Weighted mean of every parameter, weights usually being sample counts.
pub fn aggregate_fedavg(uploads: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>> {
    let n = check_uploads(uploads.iter().map(|p| p.len()))?;
    if weights.len() != uploads.len() {
        return Err(Error::Alignment(format!("{} weights for {} uploads", weights.len(), uploads.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::Domain("aggregation weights must be non-negative with a positive sum".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut sum = vec![0.0f64; n];
    for (params, &w) in uploads.iter().zip(weights) {
        for (s, v) in sum.iter_mut().zip(params.iter()) {
            *s += w * *v as f64;
        }
    }
    Ok(sum.into_iter().map(|s| (s / total) as f32).collect())
}

/// How the server combines uploads and how rounds are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregation {
    /// Mask-aware averaging; clients are evaluated with their local models.
    Localized,
    /// Plain weighted averaging; clients are evaluated with the new global
    /// model (and their own batchnorm statistics).
    FedAvg { weights: Vec<f64> },
}

/// One communication round over all clients.
pub fn run_round(
    global: &mut GlobalState,
    clients: &mut [ClientState],
    schedule: &PruneSchedule,
    aggregation: &Aggregation,
    settings: &LocalSettings,
) -> Result<RoundMetrics> {
    if global.round >= global.total_rounds {
        return Err(Error::Precondition(format!("round {} of {} already run", global.round, global.total_rounds)));
    }
    if clients.is_empty() {
        return Err(Error::Precondition("no clients".into()));
    }
    let round = global.round;
    let param_count = global.params.len();
    let mut download = ByteCounts::default();
    for c in clients.iter() {
        let (ideal, wire) = transfer_cost(param_count, &c.mask);
        global.ledger.record(round, c.index, Direction::Download, ideal, wire);
        download.idealized += ideal;
        download.wire += wire;
    }

    let g: &GlobalState = global;
    clients.par_iter_mut().map(|c| client_train(g, c, settings)).collect::<Result<Vec<()>>>()?;
    let decisions = prune_decisions(schedule, clients, round, global.total_rounds);
    let g: &GlobalState = global;
    clients
        .par_iter_mut()
        .zip(decisions.par_iter())
        .map(|(c, &prune)| client_finish(g, c, schedule, prune, settings))
        .collect::<Result<Vec<()>>>()?;

    let mut upload = ByteCounts::default();
    for c in clients.iter() {
        if let Some((index, value)) = c.mask.closure_violation(c.model.params()) {
            return Err(Error::Integrity { index, value });
        }
        let (ideal, wire) = transfer_cost(param_count, &c.mask);
        global.ledger.record(round, c.index, Direction::Upload, ideal, wire);
        upload.idealized += ideal;
        upload.wire += wire;
    }

    let new_params = match aggregation {
        Aggregation::Localized => {
            let uploads: Vec<(&[f32], &Mask)> = clients.iter().map(|c| (c.model.params(), &c.mask)).collect();
            aggregate_localized(&global.params, &uploads)?
        }
        Aggregation::FedAvg { weights } => {
            let uploads: Vec<&[f32]> = clients.iter().map(|c| c.model.params()).collect();
            aggregate_fedavg(&uploads, weights)?
        }
    };
    global.params = new_params;
    global.masks = clients.iter().map(|c| c.mask.clone()).collect();

    let rmse: Vec<f64> = match aggregation {
        Aggregation::Localized => clients.par_iter().map(|c| c.val_rmse()).collect::<Result<_>>()?,
        Aggregation::FedAvg { .. } => clients
            .par_iter()
            .map(|c| {
                let mut m = c.model.clone();
                m.set_params(&global.params)?;
                c.mask.apply_to(m.params_mut());
                Ok(m.evaluate_mse(&c.val)?.sqrt())
            })
            .collect::<Result<_>>()?,
    };
    let rmse = rmse.into_iter().map(|r| r * settings.target_std).collect();
    let sparsities = clients.iter().map(ClientState::sparsity).collect();
    let mut metrics = RoundMetrics::new(round, rmse, sparsities, decisions);
    metrics.upload = upload;
    metrics.download = download;
    global.round += 1;
    Ok(metrics)
}

/// Silos ready for training, plus what is needed to report in target units.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub silos: Vec<Silo>,
    pub groups: Vec<FeatureGroup>,
    pub norm: NormStats,
    /// Fingerprint of the silos as loaded, before oversampling.
    pub fingerprint: String,
    pub rejected_rows: usize,
}

/// Loads or generates the silos, oversamples and normalizes them.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (silos, groups, rejected_rows, seed) = match &config.data {
        DataSource::Synthetic(s) => (gen_synthetic_silos(s)?, s.groups.clone(), 0, s.seed),
        DataSource::Csv { path, schema } => {
            let load = load_csv(path, schema)?;
            (load.silos, schema.groups.clone(), load.rejected, 0)
        }
    };
    if let Some(s) = silos.iter().find(|s| s.train.is_empty() || s.val.is_empty()) {
        return Err(Error::Data(format!(
            "silo {} has {} training and {} validation rows; both must be non-empty",
            s.id,
            s.train.len(),
            s.val.len()
        )));
    }
    let fingerprint = fingerprint(&silos);
    let silos = if config.oversample { oversample_equalize(&silos, seed)? } else { silos };
    let (silos, norm) = normalize(&silos)?;
    Ok(PreparedData { silos, groups, norm, fingerprint, rejected_rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: String,
    pub rmse: f64,
    pub sparsity: f64,
    pub survivors: usize,
    pub prune_events: usize,
    /// Idealized size of this client's final model.
    pub model_kb: f64,
}

/// A final model kept in memory for export.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalModel {
    pub name: String,
    pub params: Vec<f32>,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub format_version: u32,
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub data_fingerprint: String,
    pub clients: Vec<String>,
    pub param_count: usize,
    pub prunable_count: usize,
    pub dense_model_kb: f64,
    pub target_std: f64,
    pub rounds: Vec<RoundMetrics>,
    pub final_clients: Vec<ClientSummary>,
    /// Mean over clients of the final validation RMSE.
    pub mean_rmse: f64,
    pub mean_sparsity: f64,
    /// Mean final model size over clients, idealized.
    pub model_kb: f64,
    pub totals: LedgerTotals,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub models: Vec<FinalModel>,
}

impl ExperimentResult {
    /// JSON with the wall-clock field zeroed, for reproducibility checks.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

/// Generates or loads the data, then runs one seed.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<ExperimentResult> {
    config.validate()?;
    let data = prepare_data(config)?;
    run_prepared(config, &data, seed)
}

/// Runs one seed of `config` on already prepared data.
pub fn run_prepared(config: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<ExperimentResult> {
    config.validate()?;
    let started = Instant::now();
    let arch = Architecture::from_feature_groups(&data.groups, &config.model)?;
    let init = DenseModel::kaiming_init(arch, seed)?;
    let settings = LocalSettings {
        epochs: config.epochs(),
        recovery_epochs: config.recovery_epochs(),
        batch_size: config.batch_size,
        patience: config.patience(),
        seed,
        target_std: data.norm.target_std,
    };
    let opt = OptState::new(config.optimizer.clone(), init.param_count());
    let mut clients: Vec<ClientState> =
        data.silos.iter().enumerate().map(|(k, s)| ClientState::new(k, s, &init, opt.clone())).collect();

    let (rounds, ledger, models) = match config.method {
        Method::Centralized => run_centralized(&init, &opt, &clients, &settings)?,
        Method::LocalOnly => run_local_only(&mut clients, &settings)?,
        method => {
            let schedule = config.prune_schedule();
            let aggregation = if method.prunes() {
                Aggregation::Localized
            } else {
                let weights = if config.weighted_average {
                    clients.iter().map(|c| c.train.len() as f64).collect()
                } else {
                    vec![1.0; clients.len()]
                };
                Aggregation::FedAvg { weights }
            };
            let mut global = GlobalState::new(&init, clients.len(), config.rounds());
            let mut rounds = Vec::with_capacity(config.rounds());
            for _ in 0..config.rounds() {
                rounds.push(run_round(&mut global, &mut clients, &schedule, &aggregation, &settings)?);
            }
            let models = if method.prunes() {
                clients
                    .iter()
                    .map(|c| FinalModel { name: c.id.clone(), params: c.model.params().to_vec(), mask: c.mask.clone() })
                    .collect()
            } else {
                vec![FinalModel { name: "global".into(), params: global.params.clone(), mask: Mask::dense_for(&init) }]
            };
            (rounds, global.ledger, models)
        }
    };

    let last = rounds.last().ok_or_else(|| Error::Precondition("no rounds were run".into()))?;
    let param_count = init.param_count();
    let final_clients: Vec<ClientSummary> = clients
        .iter()
        .enumerate()
        .map(|(k, c)| ClientSummary {
            id: c.id.clone(),
            rmse: last.client_rmse[k],
            sparsity: c.sparsity(),
            survivors: c.mask.survivors(),
            prune_events: c.history.prune_events(),
            model_kb: bytes_to_kb(idealized_bytes(param_count, c.mask.len(), c.mask.survivors()) as f64),
        })
        .collect();
    let k = final_clients.len() as f64;
    Ok(ExperimentResult {
        format_version: RESULT_VERSION,
        method: config.method,
        seed,
        config: config.clone(),
        data_fingerprint: data.fingerprint.clone(),
        clients: clients.iter().map(|c| c.id.clone()).collect(),
        param_count,
        prunable_count: init.prunable_count(),
        dense_model_kb: bytes_to_kb(4.0 * param_count as f64),
        target_std: data.norm.target_std,
        mean_rmse: last.mean_rmse,
        mean_sparsity: last.mean_sparsity,
        model_kb: final_clients.iter().map(|c| c.model_kb).sum::<f64>() / k,
        final_clients,
        totals: ledger.totals(),
        rounds,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        models,
    })
}

type Outcome = (Vec<RoundMetrics>, CostLedger, Vec<FinalModel>);

/// One model on the pooled training data, evaluated on every silo.
fn run_centralized(init: &DenseModel, opt: &OptState, clients: &[ClientState], settings: &LocalSettings) -> Result<Outcome> {
    let train = Batch::concat(&clients.iter().map(|c| &c.train).collect::<Vec<_>>())?;
    let val = Batch::concat(&clients.iter().map(|c| &c.val).collect::<Vec<_>>())?;
    let mut model = init.clone();
    let mut opt = opt.clone();
    let mask = Mask::dense_for(init);
    let mut rng = client_rng(settings.seed, 0, 0, PHASE_TRAIN);
    train_epochs(&mut model, &mut opt, &mask, &train, &val, settings.train(settings.epochs), &mut rng)?;
    let rmse = clients
        .iter()
        .map(|c| Ok(model.evaluate_mse(&c.val)?.sqrt() * settings.target_std))
        .collect::<Result<Vec<_>>>()?;
    let n = clients.len();
    let metrics = RoundMetrics::new(0, rmse, vec![0.0; n], vec![false; n]);
    let models = vec![FinalModel { name: "centralized".into(), params: model.params().to_vec(), mask }];
    Ok((vec![metrics], CostLedger::new(), models))
}

/// Every silo trains alone; nothing is exchanged.
fn run_local_only(clients: &mut [ClientState], settings: &LocalSettings) -> Result<Outcome> {
    clients
        .par_iter_mut()
        .map(|c| {
            let mut rng = client_rng(settings.seed, 0, c.index, PHASE_TRAIN);
            train_epochs(&mut c.model, &mut c.opt, &c.mask, &c.train, &c.val, settings.train(settings.epochs), &mut rng)
                .map(|_| ())
        })
        .collect::<Result<Vec<()>>>()?;
    let rmse = clients.iter().map(|c| Ok(c.val_rmse()? * settings.target_std)).collect::<Result<Vec<_>>>()?;
    let n = clients.len();
    let metrics = RoundMetrics::new(0, rmse, vec![0.0; n], vec![false; n]);
    let models = clients
        .iter()
        .map(|c| FinalModel { name: c.id.clone(), params: c.model.params().to_vec(), mask: c.mask.clone() })
        .collect();
    Ok((vec![metrics], CostLedger::new(), models))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[bool]) -> Mask {
        Mask::from_parts(vec![0..bits.len()], bits.to_vec()).unwrap()
    }

    #[test]
    fn overlap_average_skips_pruned_client() {
        let prev = [9.0f32];
        let (a, b, c) = ([0.2f32], [0.0f32], [0.4f32]);
        let (ma, mb, mc) = (mask(&[true]), mask(&[false]), mask(&[true]));
        let out = aggregate_localized(&prev, &[(&a, &ma), (&b, &mb), (&c, &mc)]).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn weight_kept_by_nobody_keeps_previous_value() {
        let prev = [1.5f32, 2.5];
        let (a, b) = ([0.0f32, 1.0], [0.0f32, 3.0]);
        let m = mask(&[false, true]);
        let out = aggregate_localized(&prev, &[(&a, &m), (&b, &m)]).unwrap();
        assert_eq!(out, vec![1.5, 2.0]);
    }

    #[test]
    fn non_prunable_params_average_over_everyone() {
        let m = Mask::from_parts(vec![0..1], vec![false]).unwrap();
        let out = aggregate_localized(&[7.0, 7.0], &[(&[0.0, 1.0], &m), (&[0.0, 3.0], &m)]).unwrap();
        assert_eq!(out, vec![7.0, 2.0]);
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(aggregate_fedavg(&[&[1.0, -2.0]], &[5.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(aggregate_fedavg(&[&[0.0, 2.0], &[2.0, 0.0]], &[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(aggregate_fedavg(&[&[0.0], &[4.0]], &[1.0, 3.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(aggregate_fedavg(&[], &[]), Err(Error::Precondition(_))));
        assert!(matches!(aggregate_fedavg(&[&[1.0], &[1.0, 2.0]], &[1.0, 1.0]), Err(Error::Alignment(_))));
        assert!(matches!(aggregate_localized(&[0.0], &[]), Err(Error::Precondition(_))));
        let m = mask(&[true]);
        assert!(matches!(aggregate_localized(&[0.0, 0.0], &[(&[1.0], &m)]), Err(Error::Alignment(_))));
    }

    #[test]
    fn rng_streams_differ_by_client_round_and_phase() {
        use rand::Rng;
        let draw = |r: usize, c: usize, p: u64| client_rng(3, r, c, p).random::<u64>();
        let a = draw(0, 0, 0);
        assert_eq!(a, draw(0, 0, 0));
        assert_ne!(a, draw(1, 0, 0));
        assert_ne!(a, draw(0, 1, 0));
        assert_ne!(a, draw(0, 0, 1));
    }
}
