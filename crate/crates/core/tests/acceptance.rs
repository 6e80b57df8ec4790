//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails under `FEDPRUNE_ACCEPTANCE_STRICT`. Runs as a plain binary
//! so the lines are never captured.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fedprune::comms::{
    bytes_to_kb, cost_of, decode_bytes, encode_sparse, CostLedger, CostModel, Direction, SparseBlob,
};
use fedprune::config::{DataSource, ExperimentConfig, Method};
use fedprune::federation::{aggregate_fedavg, aggregate_localized, run_experiment, ExperimentResult};
use fedprune::nn::{Architecture, Batch, DenseModel, InputGroup, LayerSpec};
use fedprune::pruning::{magnitude_prune, sparsity, Mask};
use fedprune::schedule::{should_prune, LossHistory, PruneSchedule, ScheduleVariant, DEFAULT_ROUNDS};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

fn random_architecture(rng: &mut ChaCha8Rng) -> Architecture {
    loop {
        let channels = rng.random_range(1..=2);
        let length = rng.random_range(3..=6);
        let kernel = rng.random_range(2..=3);
        let stride = rng.random_range(1..=2);
        let out_ch = rng.random_range(1..=3);
        let conv = LayerSpec::conv1d(channels, length, out_ch, kernel, stride);
        let cw = conv.output_width();
        let pass = rng.random_range(1..=3);
        let hidden = rng.random_range(2..=8);
        let groups = vec![
            InputGroup {
                name: "seq".into(),
                width: channels * length,
                layers: vec![conv, LayerSpec::relu(cw), LayerSpec::batch_norm(cw)],
            },
            InputGroup { name: "flat".into(), width: pass, layers: Vec::new() },
        ];
        let trunk = vec![
            LayerSpec::dense(cw + pass, hidden),
            LayerSpec::relu(hidden),
            LayerSpec::batch_norm(hidden),
            LayerSpec::dense(hidden, 1),
        ];
        let arch = Architecture { groups, trunk };
        if arch.validate().is_ok() {
            return arch;
        }
    }
}

fn gradient_oracle() -> Check {
    const H: f64 = 1e-3;
    const TOL: f64 = 1e-4;
    // Relative error uses max(|analytic|, |numeric|, FLOOR) as denominator so
    // that gradients that are zero up to rounding are compared absolutely.
    const FLOOR: f64 = 1e-3;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut worst_fine, mut checked, mut kinks, mut models) = (0.0f64, 0.0f64, 0usize, 0usize, 0usize);
    while models < 25 {
        let arch = random_architecture(&mut rng);
        let mut model = DenseModel::kaiming_init(arch, rng.random()).map_err(|e| e.to_string())?;
        if model.param_count() > 500 {
            continue;
        }
        // Non-trivial batchnorm affine parameters.
        let n_params = model.param_count();
        for p in model.params_mut() {
            *p += (0.1 * normal(&mut rng)) as f32;
        }
        let rows = 12;
        let width = model.architecture().input_width();
        let features = Array2::from_shape_fn((rows, width), |_| normal(&mut rng));
        let targets = Array1::from_shape_fn(rows, |_| normal(&mut rng));
        let batch = Batch::new(features.clone(), targets).map_err(|e| e.to_string())?;
        let mask = Mask::dense_for(&model);
        let grad = model.backward(&batch, &mask).map_err(|e| e.to_string())?;
        for i in 0..n_params {
            // None when a ReLU input changes sign between the two probes.
            let rel_err = |h: f64| {
                let base = model.params()[i];
                let plus = (base as f64 + h) as f32;
                let minus = (base as f64 - h) as f32;
                let mut mp = model.clone();
                mp.params_mut()[i] = plus;
                let mut mm = model.clone();
                mm.params_mut()[i] = minus;
                if mp.relu_activity(&features, true).unwrap() != mm.relu_activity(&features, true).unwrap() {
                    return None;
                }
                let lp = mp.training_loss(&batch).unwrap();
                let lm = mm.training_loss(&batch).unwrap();
                let numeric = (lp - lm) / (plus as f64 - minus as f64);
                Some((grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(FLOOR))
            };
            let Some(rel) = rel_err(H) else {
                kinks += 1;
                continue;
            };
            worst = worst.max(rel);
            // Diagnostic only: the truncation error of a central difference
            // shrinks as h squared, a wrong gradient does not.
            if let Some(fine) = rel_err(H / 10.0) {
                worst_fine = worst_fine.max(fine);
            }
            checked += 1;
        }
        models += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        worst < TOL && secs < 60.0 && checked > 0,
        format!(
            "{models} models, {checked} coordinates checked ({kinks} skipped at ReLU kinks), max rel err {worst:.2e} (h=1e-4 gives {worst_fine:.2e}), {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Aggregation oracle

/// Straightforward per-position reference.
fn oracle_aggregate(previous: &[f32], params: &[Vec<f32>], segments: &[std::ops::Range<usize>], bits: &[Vec<bool>]) -> Vec<f32> {
    let n = previous.len();
    let mut out = vec![0.0f32; n];
    for i in 0..n {
        let mut mask_index = None;
        let mut offset = 0;
        for seg in segments {
            if seg.contains(&i) {
                mask_index = Some(offset + (i - seg.start));
            }
            offset += seg.len();
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for k in 0..params.len() {
            let keep = mask_index.is_none_or(|j| bits[k][j]);
            if keep {
                sum += params[k][i] as f64;
                count += 1;
            }
        }
        out[i] = if count == 0 { previous[i] } else { (sum / count as f64) as f32 };
    }
    out
}

fn aggregation_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // Exhaustive: 3 clients x 4 weights, every one of the 2^12 mask combinations.
    let segments = vec![0..4];
    let previous: Vec<f32> = (0..4).map(|_| normal(&mut rng) as f32).collect();
    let mut exhaustive = 0;
    for combo in 0u32..(1 << 12) {
        let bits: Vec<Vec<bool>> = (0..3).map(|k| (0..4).map(|j| combo >> (4 * k + j) & 1 == 1).collect()).collect();
        let params: Vec<Vec<f32>> = bits
            .iter()
            .map(|b| b.iter().map(|&keep| if keep { normal(&mut rng) as f32 } else { 0.0 }).collect())
            .collect();
        let masks: Vec<Mask> = bits.iter().map(|b| Mask::from_parts(segments.clone(), b.clone()).unwrap()).collect();
        let uploads: Vec<(&[f32], &Mask)> = params.iter().map(|p| p.as_slice()).zip(masks.iter()).collect();
        let got = aggregate_localized(&previous, &uploads).map_err(|e| e.to_string())?;
        let want = oracle_aggregate(&previous, &params, &segments, &bits);
        if got != want {
            return Err(format!("mask combination {combo:#014b}: {got:?} != {want:?}"));
        }
        exhaustive += 1;
    }
    // Random larger instances with non-prunable parameters around the layers.
    for case in 0..1000 {
        let clients = rng.random_range(1..=7);
        let lead = rng.random_range(0..4);
        let l1 = rng.random_range(1..30);
        let gap = rng.random_range(0..4);
        let l2 = rng.random_range(1..30);
        let tail = rng.random_range(0..4);
        let segments = vec![lead..lead + l1, lead + l1 + gap..lead + l1 + gap + l2];
        let n = lead + l1 + gap + l2 + tail;
        let density: f64 = rng.random_range(0.0..1.0);
        let previous: Vec<f32> = (0..n).map(|_| normal(&mut rng) as f32).collect();
        let bits: Vec<Vec<bool>> =
            (0..clients).map(|_| (0..l1 + l2).map(|_| rng.random_bool(density)).collect()).collect();
        let masks: Vec<Mask> = bits.iter().map(|b| Mask::from_parts(segments.clone(), b.clone()).unwrap()).collect();
        let params: Vec<Vec<f32>> = masks
            .iter()
            .map(|m| {
                let mut p: Vec<f32> = (0..n).map(|_| normal(&mut rng) as f32).collect();
                m.apply_to(&mut p);
                p
            })
            .collect();
        let uploads: Vec<(&[f32], &Mask)> = params.iter().map(|p| p.as_slice()).zip(masks.iter()).collect();
        let got = aggregate_localized(&previous, &uploads).map_err(|e| e.to_string())?;
        if got != oracle_aggregate(&previous, &params, &segments, &bits) {
            return Err(format!("random case {case} differs from the oracle"));
        }
        // All-dense masks reduce to plain equal-weight averaging.
        let dense: Vec<Mask> = (0..clients).map(|_| Mask::from_parts(segments.clone(), vec![true; l1 + l2]).unwrap()).collect();
        let up: Vec<(&[f32], &Mask)> = params.iter().map(|p| p.as_slice()).zip(dense.iter()).collect();
        let plain: Vec<&[f32]> = params.iter().map(|p| p.as_slice()).collect();
        if aggregate_localized(&previous, &up).unwrap() != aggregate_fedavg(&plain, &vec![1.0; clients]).unwrap() {
            return Err(format!("random case {case}: dense masks do not reduce to FedAvg"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("{exhaustive} exhaustive combinations and 1000 random instances exact, {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 3. Schedule arithmetic

fn default_model() -> DenseModel {
    let cfg = ExperimentConfig::new(Method::Fedpruning);
    let DataSource::Synthetic(s) = &cfg.data else { unreachable!() };
    let arch = Architecture::from_feature_groups(&s.groups, &cfg.model).unwrap();
    DenseModel::kaiming_init(arch, 5).unwrap()
}

/// Runs a schedule over `DEFAULT_ROUNDS` rounds with a loss that always recovers.
fn simulate(schedule: &PruneSchedule) -> (usize, f64, usize) {
    let mut model = default_model();
    let mut mask = Mask::dense_for(&model);
    let mut history = LossHistory::new();
    let mut events = 0;
    for round in 0..DEFAULT_ROUNDS {
        history.record(1.0);
        let prune = should_prune(schedule, &history, round, DEFAULT_ROUNDS, sparsity(&mask).sparsity);
        if prune {
            mask = magnitude_prune(&model, &mask, schedule.rate).unwrap();
            mask.apply_to(model.params_mut());
            events += 1;
        }
        history.finish_round(prune);
    }
    (events, sparsity(&mask).sparsity, mask.len())
}

fn schedule_arithmetic() -> Check {
    let (it_events, it_sparsity, _) = simulate(&PruneSchedule::for_variant(ScheduleVariant::Iterative));
    let (os_events, os_sparsity, n) = simulate(&PruneSchedule::for_variant(ScheduleVariant::OneShot));
    let ok = it_events == 6
        && (0.80..=0.85).contains(&it_sparsity)
        && os_events == 1
        && (os_sparsity - 0.70).abs() <= 1.0 / n as f64;
    ensure(
        ok,
        format!(
            "iterative: {it_events} events, sparsity {it_sparsity:.4}; one-shot: {os_events} event, sparsity {os_sparsity:.5} over {n} weights"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Communication arithmetic at reference scale

fn reference_arithmetic() -> Check {
    // 4389 * 37 + 37 + 37 + 1 = 162,468 parameters = 634.64 KB in f32.
    let arch = Architecture::sequential(vec![LayerSpec::dense(4389, 37), LayerSpec::relu(37), LayerSpec::dense(37, 1)])
        .map_err(|e| e.to_string())?;
    let mut model = DenseModel::kaiming_init(arch, 3).map_err(|e| e.to_string())?;
    let dense = Mask::dense_for(&model);
    let dense_bytes = cost_of(&model, &dense, CostModel::Idealized).unwrap();
    let dense_kb = bytes_to_kb(dense_bytes as f64);

    let mut ledger = CostLedger::new();
    for round in 0..40 {
        ledger.record(round, 0, Direction::Download, dense_bytes, dense_bytes);
        ledger.record(round, 0, Direction::Upload, dense_bytes, dense_bytes);
    }
    let mb = ledger.totals().per_client_mb;
    let mb_err = (mb - 50.76).abs() / 50.76;

    let pruned = magnitude_prune(&model, &dense, 0.79).map_err(|e| e.to_string())?;
    pruned.apply_to(model.params_mut());
    let kb = bytes_to_kb(cost_of(&model, &pruned, CostModel::Idealized).unwrap() as f64);
    let kb_err = (kb - 133.27).abs() / 133.27;
    ensure(
        (dense_kb - 634.64).abs() < 0.01 && mb_err < 1e-3 && kb_err < 5e-3,
        format!(
            "dense {dense_kb:.2} KB, 40 dense rounds {mb:.2} MB ({:.3}% off), 0.79-sparse model {kb:.2} KB ({:.3}% off)",
            100.0 * mb_err,
            100.0 * kb_err
        ),
    )
}

// ---------------------------------------------------------------------------
// 5 and 6. Desk-scale experiments on synthetic silos

struct Runs {
    cache: HashMap<(Method, bool, u64), ExperimentResult>,
}

impl Runs {
    fn get(&mut self, method: Method, iid: bool, seed: u64) -> &ExperimentResult {
        self.cache.entry((method, iid, seed)).or_insert_with(|| {
            let mut cfg = ExperimentConfig::new(method);
            if iid {
                if let DataSource::Synthetic(s) = &cfg.data {
                    cfg.data = DataSource::Synthetic(s.iid());
                }
            }
            run_experiment(&cfg, seed).expect("experiment runs")
        })
    }
}

fn communication_saving(runs: &mut Runs) -> Check {
    let total = |r: &ExperimentResult| r.totals.total(CostModel::Idealized) as f64;
    let fedavg = runs.get(Method::Fedavg, false, 1);
    let (base, rounds, secs_a) = (total(fedavg), fedavg.rounds.len(), fedavg.wall_clock_secs);
    let fp = runs.get(Method::Fedpruning, false, 1);
    let (fp_ratio, secs_b) = (total(fp) / base, fp.wall_clock_secs);
    let os = runs.get(Method::OneShot, false, 1);
    let (os_ratio, secs_c) = (total(os) / base, os.wall_clock_secs);
    let slowest = secs_a.max(secs_b).max(secs_c);
    ensure(
        rounds == 40 && fp_ratio <= 0.55 + 0.10 && os_ratio <= 0.45 + 0.10 && slowest < 600.0,
        format!(
            "FedPruning {:.1}% and One-Shot {:.1}% of FedAvg bytes over {rounds} rounds; slowest run {slowest:.1}s",
            100.0 * fp_ratio,
            100.0 * os_ratio
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn localization_benefit(runs: &mut Runs) -> Check {
    let seeds = [1u64, 2, 3];
    let mut med = |m: Method, iid: bool| median(seeds.iter().map(|&s| runs.get(m, iid, s).mean_rmse).collect());
    let fedavg = med(Method::Fedavg, false);
    let fp = med(Method::Fedpruning, false);
    let oslt = med(Method::OneShotLt, false);
    let iid_fedavg = med(Method::Fedavg, true);
    let iid_fp = med(Method::Fedpruning, true);
    let gain = |x: f64| 100.0 * (fedavg - x) / fedavg;
    let iid_gap = 100.0 * (iid_fp - iid_fedavg).abs() / iid_fedavg;
    ensure(
        gain(fp) >= 5.0 && gain(oslt) >= 5.0 && iid_gap <= 5.0,
        format!(
            "non-IID median RMSE: FedAvg {fedavg:.3}, FedPruning {fp:.3} ({:.1}% lower), One-Shot-LT {oslt:.3} ({:.1}% lower); IID: FedAvg {iid_fedavg:.3}, FedPruning {iid_fp:.3} ({iid_gap:.1}% apart)",
            gain(fp),
            gain(oslt)
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Mask closure and determinism

fn closure_and_determinism(runs: &mut Runs) -> Check {
    let mut violations = 0;
    let mut models = 0;
    for m in [Method::Fedpruning, Method::OneShot, Method::OneShotLt, Method::Fedavg] {
        for r in runs.cache.iter().filter(|((method, _, _), _)| *method == m).map(|(_, r)| r) {
            for fm in &r.models {
                models += 1;
                if fm.mask.closure_violation(&fm.params).is_some() {
                    violations += 1;
                }
            }
        }
    }
    let mut cfg = ExperimentConfig::new(Method::FedpruningLt);
    cfg.rounds = Some(12);
    let a = run_experiment(&cfg, 9).map_err(|e| e.to_string())?;
    for fm in &a.models {
        models += 1;
        if fm.mask.closure_violation(&fm.params).is_some() {
            violations += 1;
        }
    }
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .map_err(|e| e.to_string())?
        .install(|| run_experiment(&cfg, 9))
        .map_err(|e| e.to_string())?;
    let identical = a.canonical_json().unwrap() == b.canonical_json().unwrap() && a.models == b.models;
    let first = runs.get(Method::Fedpruning, false, 1).canonical_json().unwrap();
    let again = {
        let cfg = ExperimentConfig::new(Method::Fedpruning);
        run_experiment(&cfg, 1).map_err(|e| e.to_string())?.canonical_json().unwrap()
    };
    ensure(
        violations == 0 && models > 0 && identical && first == again,
        format!(
            "{models} final models, {violations} closure violations; repeated runs byte-identical: {}",
            identical && first == again
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Codec

fn codec_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut sizes = Vec::new();
    for case in 0..1000 {
        let layers = rng.random_range(0..4);
        let mut segments = Vec::new();
        let mut pos = rng.random_range(0..5);
        for _ in 0..layers {
            let len = rng.random_range(1..40);
            segments.push(pos..pos + len);
            pos += len + rng.random_range(0..5);
        }
        let n = pos + rng.random_range(0..5);
        let prunable: usize = segments.iter().map(|r| r.len()).sum();
        let density: f64 = rng.random_range(0.0..=1.0);
        let bits: Vec<bool> = (0..prunable).map(|_| rng.random_bool(density)).collect();
        let mask = Mask::from_parts(segments, bits).unwrap();
        let mut params: Vec<f32> = (0..n)
            .map(|_| match rng.random_range(0..20) {
                0 => f32::from_bits(rng.random()),
                1 => -0.0,
                _ => normal(&mut rng) as f32,
            })
            .collect();
        mask.apply_to(&mut params);
        let bytes = encode_sparse(&params, &mask).map_err(|e| format!("case {case}: {e}"))?.to_bytes();
        let (back, back_mask) = decode_bytes(&bytes).map_err(|e| format!("case {case}: {e}"))?;
        let same = back.len() == params.len() && back.iter().zip(&params).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || back_mask != mask {
            return Err(format!("case {case} did not round-trip"));
        }
        sizes.push(bytes);
    }
    // Fuzz: random bytes, truncations and bit flips of valid blobs.
    let mut rejected = 0;
    let mut accepted = 0;
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        for i in 0..20_000 {
            let blob: Vec<u8> = match i % 4 {
                0 => {
                    let len = rng.random_range(0..64);
                    let mut b: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                    if len >= 6 && rng.random_bool(0.5) {
                        b[..4].copy_from_slice(b"FPSB");
                        b[4] = 1;
                        b[5] = 0;
                    }
                    b
                }
                1 => {
                    let src = &sizes[rng.random_range(0..sizes.len())];
                    src[..rng.random_range(0..=src.len())].to_vec()
                }
                _ => {
                    let mut b = sizes[rng.random_range(0..sizes.len())].clone();
                    for _ in 0..rng.random_range(1..4) {
                        if b.is_empty() {
                            break;
                        }
                        let at = rng.random_range(0..b.len());
                        b[at] ^= 1 << rng.random_range(0..8);
                    }
                    b
                }
            };
            match SparseBlob::from_bytes(&blob).and_then(|b| fedprune::comms::decode_sparse(&b)) {
                Ok(_) => accepted += 1,
                Err(_) => rejected += 1,
            }
        }
    }));
    ensure(
        outcome.is_ok(),
        format!("1000 random pairs round-trip bit-exactly; 20000 fuzzed blobs: {rejected} rejected, {accepted} decoded, no panics"),
    )
}

fn main() {
    let mut runs = Runs { cache: HashMap::new() };
    let mut failed = 0;
    let criteria: Vec<(&str, Box<dyn FnMut(&mut Runs) -> Check>)> = vec![
        ("gradient oracle", Box::new(|_| gradient_oracle())),
        ("aggregation oracle", Box::new(|_| aggregation_oracle())),
        ("schedule arithmetic", Box::new(|_| schedule_arithmetic())),
        ("reference communication arithmetic", Box::new(|_| reference_arithmetic())),
        ("desk-scale communication saving", Box::new(communication_saving)),
        ("localization benefit", Box::new(localization_benefit)),
        ("mask closure and determinism", Box::new(closure_and_determinism)),
        ("codec round-trip and fuzzing", Box::new(|_| codec_suite())),
    ];
    for (i, (name, mut check)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut runs)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())))));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    // Failures are reported above; set FEDPRUNE_ACCEPTANCE_STRICT to turn them
    // into a failing exit status.
    if failed > 0 && std::env::var_os("FEDPRUNE_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
