//! Subcommands behind the `fedprune` binary: running experiments, comparing
//! their results, and materializing synthetic data as CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedprune::comms::{bytes_to_mb, encode_sparse, saved_fraction};
use fedprune::config::{DataSource, ExperimentConfig, Method};
use fedprune::data::{gen_synthetic_silos, write_csv, CsvSchema};
use fedprune::federation::{prepare_data, run_prepared, ExperimentResult};
use fedprune::{Error, Result};

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub method: Option<Method>,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub result_files: Vec<PathBuf>,
    pub round_files: Vec<PathBuf>,
    pub summary_file: PathBuf,
    pub results: Vec<ExperimentResult>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub data_fingerprint: String,
    pub mean_rmse: Stat,
    pub mean_sparsity: Stat,
    /// Both directions, all rounds, per client, idealized.
    pub per_client_mb: Stat,
    pub per_client_mb_wire: Stat,
    pub model_kb: Stat,
    pub dense_model_kb: f64,
    pub result_files: Vec<String>,
}

/// One CSV row per round; communication columns are cumulative per-client
/// megabytes under the idealized model.
pub fn rounds_csv(result: &ExperimentResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "round",
        "mean_rmse",
        "min_rmse",
        "max_rmse",
        "mean_sparsity",
        "cum_upload_mb",
        "cum_download_mb",
    ])?;
    let k = result.clients.len().max(1) as f64;
    let (mut up, mut down) = (0u64, 0u64);
    for r in &result.rounds {
        up += r.upload.idealized;
        down += r.download.idealized;
        w.write_record([
            r.round.to_string(),
            r.mean_rmse.to_string(),
            r.min_rmse.to_string(),
            r.max_rmse.to_string(),
            r.mean_sparsity.to_string(),
            (bytes_to_mb(up as f64) / k).to_string(),
            (bytes_to_mb(down as f64) / k).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn write_models(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in &result.models {
        let blob = encode_sparse(&m.params, &m.mask)?;
        fs::write(dir.join(format!("{}.fpsb", m.name)), blob.to_bytes())?;
    }
    Ok(())
}

/// Runs the configured experiment once per seed and writes, per seed, a
/// result JSON, a per-round CSV and the final models, plus a summary JSON
/// with mean and sample standard deviation across seeds.
pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<RunOutput> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(m) = opts.method {
        config.method = m;
    }
    if let Some(s) = &opts.seeds {
        config.seeds = s.clone();
    }
    config.validate()?;
    let out_dir = opts.out.clone().unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&out_dir)?;

    let data = prepare_data(&config)?;
    if data.rejected_rows > 0 && !opts.quiet {
        eprintln!("skipped {} malformed CSV rows", data.rejected_rows);
    }
    let method = config.method.name();
    let mut output = RunOutput {
        summary_file: out_dir.join(format!("{method}_summary.json")),
        out_dir: out_dir.clone(),
        result_files: Vec::new(),
        round_files: Vec::new(),
        results: Vec::new(),
    };
    for &seed in &config.seeds {
        let result = run_prepared(&config, &data, seed)?;
        let stem = format!("{method}_seed{seed}");
        let json = out_dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(&result)?)?;
        let rounds = out_dir.join(format!("{stem}_rounds.csv"));
        fs::write(&rounds, rounds_csv(&result)?)?;
        write_models(&out_dir.join(format!("{stem}_models")), &result)?;
        if !opts.quiet {
            eprintln!(
                "{method} seed {seed}: mean RMSE {:.4}, sparsity {:.3}, {:.3} MB per client, {:.1}s",
                result.mean_rmse, result.mean_sparsity, result.totals.per_client_mb, result.wall_clock_secs
            );
        }
        output.result_files.push(json);
        output.round_files.push(rounds);
        output.results.push(result);
    }

    let stat = |f: &dyn Fn(&ExperimentResult) -> f64| Stat::of(&output.results.iter().map(f).collect::<Vec<_>>());
    let summary = RunSummary {
        method: config.method,
        seeds: config.seeds.clone(),
        data_fingerprint: data.fingerprint.clone(),
        mean_rmse: stat(&|r| r.mean_rmse),
        mean_sparsity: stat(&|r| r.mean_sparsity),
        per_client_mb: stat(&|r| r.totals.per_client_mb),
        per_client_mb_wire: stat(&|r| r.totals.per_client_mb_wire),
        model_kb: stat(&|r| r.model_kb),
        dense_model_kb: output.results[0].dense_model_kb,
        result_files: output
            .result_files
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
    };
    fs::write(&output.summary_file, serde_json::to_string_pretty(&summary)?)?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub runs: usize,
    pub rmse: Stat,
    pub sparsity: f64,
    pub comm_mb: f64,
    /// Communication saved relative to FedAvg, in percent.
    pub saved_pct: Option<f64>,
    pub model_kb: f64,
    /// RMSE reduction relative to FedAvg, in percent.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub data_fingerprint: String,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}%"));
        let mut out = format!(
            "{:<14} {:>4} {:>20} {:>10} {:>8} {:>10} {:>12}\n",
            "method", "runs", "rmse (sparsity)", "comm MB", "saved", "model KB", "improvement"
        );
        for r in &self.rows {
            let rmse = if r.method.prunes() {
                format!("{:.3} ({:.2})", r.rmse.mean, r.sparsity)
            } else {
                format!("{:.3}", r.rmse.mean)
            };
            out.push_str(&format!(
                "{:<14} {:>4} {:>20} {:>10.3} {:>8} {:>10.2} {:>12}\n",
                r.method.name(),
                r.runs,
                rmse,
                r.comm_mb,
                pct(r.saved_pct),
                r.model_kb,
                pct(r.improvement_pct)
            ));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "runs",
            "mean_rmse",
            "std_rmse",
            "sparsity",
            "comm_mb",
            "saved_pct",
            "model_kb",
            "improvement_pct",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.runs.to_string(),
                r.rmse.mean.to_string(),
                r.rmse.std.to_string(),
                r.sparsity.to_string(),
                r.comm_mb.to_string(),
                opt(r.saved_pct),
                r.model_kb.to_string(),
                opt(r.improvement_pct),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Groups per-seed results by method and compares every method with FedAvg.
pub fn compare_results(results: &[ExperimentResult]) -> Result<Comparison> {
    if results.len() < 2 {
        return Err(Error::Precondition("compare needs at least two result files".into()));
    }
    let fp = &results[0].data_fingerprint;
    if let Some(r) = results.iter().find(|r| &r.data_fingerprint != fp) {
        return Err(Error::Mismatch(format!(
            "{} seed {} was run on different data ({} vs {})",
            r.method, r.seed, r.data_fingerprint, fp
        )));
    }
    let mut by_method: BTreeMap<Method, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        by_method.entry(r.method).or_default().push(r);
    }
    let mean = |rs: &[&ExperimentResult], f: &dyn Fn(&ExperimentResult) -> f64| {
        rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64
    };
    let baseline = by_method
        .get(&Method::Fedavg)
        .map(|rs| (mean(rs, &|r| r.mean_rmse), mean(rs, &|r| r.totals.per_client_mb)));
    let rows = by_method
        .iter()
        .map(|(&method, rs)| {
            let rmse = Stat::of(&rs.iter().map(|r| r.mean_rmse).collect::<Vec<_>>());
            let comm_mb = mean(rs, &|r| r.totals.per_client_mb);
            ComparisonRow {
                method,
                runs: rs.len(),
                rmse,
                sparsity: mean(rs, &|r| r.mean_sparsity),
                comm_mb,
                saved_pct: baseline.filter(|b| b.1 > 0.0).map(|b| 100.0 * saved_fraction(comm_mb, b.1)),
                model_kb: mean(rs, &|r| r.model_kb),
                improvement_pct: baseline.filter(|b| b.0 > 0.0).map(|b| 100.0 * (b.0 - rmse.mean) / b.0),
            }
        })
        .collect();
    Ok(Comparison { rows, data_fingerprint: fp.clone() })
}

/// Reads result JSON files and compares them; writes the CSV table if asked.
pub fn cmd_compare(files: &[PathBuf], csv_out: Option<&Path>) -> Result<Comparison> {
    let results = files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f)?;
            serde_json::from_str::<ExperimentResult>(&text)
                .map_err(|e| Error::Data(format!("{} is not a result file: {e}", f.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_results(&results)?;
    if let Some(path) = csv_out {
        fs::write(path, cmp.to_csv()?)?;
    }
    Ok(cmp)
}

/// Writes the synthetic silos of `config` as CSV, one file per silo or a
/// single file, together with a `schema.toml` describing the columns.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path, per_silo: bool) -> Result<Vec<PathBuf>> {
    let DataSource::Synthetic(syn) = &config.data else {
        return Err(Error::Config("gen-data needs a synthetic data source".into()));
    };
    let silos = gen_synthetic_silos(syn)?;
    let schema = CsvSchema::new(syn.groups.clone());
    let mut files = write_csv(out, &silos, &schema, per_silo)?;
    let dir = if per_silo { out.to_path_buf() } else { out.parent().map(Path::to_path_buf).unwrap_or_default() };
    let schema_file = dir.join("schema.toml");
    fs::write(&schema_file, toml::to_string(&schema).map_err(|e| Error::Config(e.to_string()))?)?;
    files.push(schema_file);
    Ok(files)
}
