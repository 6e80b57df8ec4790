//! CSV ingestion and export.
//!
//! Files are UTF-8, comma separated, with a header row. One column holds the
//! silo id, one the year, one the target; every other column is a numeric
//! feature, in header order, matching the schema's feature groups.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{split_by_year, total_width, FeatureGroup, Silo};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "default_silo_column")]
    pub silo_column: String,
    #[serde(default = "default_year_column")]
    pub year_column: String,
    #[serde(default = "default_target_column")]
    pub target_column: String,
    /// Number of latest years held out for validation.
    #[serde(default = "default_val_years")]
    pub val_years: usize,
    pub groups: Vec<FeatureGroup>,
}

fn default_silo_column() -> String {
    "silo_id".into()
}
fn default_year_column() -> String {
    "year".into()
}
fn default_target_column() -> String {
    "target".into()
}
fn default_val_years() -> usize {
    1
}

impl CsvSchema {
    pub fn new(groups: Vec<FeatureGroup>) -> Self {
        Self {
            silo_column: default_silo_column(),
            year_column: default_year_column(),
            target_column: default_target_column(),
            val_years: default_val_years(),
            groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvLoad {
    pub silos: Vec<Silo>,
    /// Rows dropped for missing or non-numeric fields.
    pub rejected: usize,
}

struct Row {
    year: i64,
    features: Vec<f64>,
    target: f64,
}

/// Loads one CSV file, or every `*.csv` file of a directory in name order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<CsvLoad> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no CSV files under {}", path.display())));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    let mut rejected = 0;
    for file in &files {
        rejected += read_file(file, schema, &mut order, &mut rows)?;
    }
    if order.is_empty() {
        return Err(Error::Data(format!("no usable rows in {}", path.display())));
    }

    let max_year = rows.values().flatten().map(|r| r.year).max().expect("at least one row");
    let width = total_width(&schema.groups);
    let silos = order
        .into_iter()
        .map(|id| {
            let rs = rows.remove(&id).expect("ids come from the map");
            let mut features = Array2::zeros((rs.len(), width));
            let mut targets = Array1::zeros(rs.len());
            let mut years = Vec::with_capacity(rs.len());
            for (i, r) in rs.iter().enumerate() {
                features.row_mut(i).assign(&Array1::from(r.features.clone()));
                targets[i] = r.target;
                years.push(r.year);
            }
            let (train, val) = split_by_year(&years, max_year, schema.val_years);
            Silo { id, features, targets, years, train, val }
        })
        .collect();
    Ok(CsvLoad { silos, rejected })
}

fn read_file(
    file: &Path,
    schema: &CsvSchema,
    order: &mut Vec<String>,
    rows: &mut HashMap<String, Vec<Row>>,
) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(file)?;
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{}: header lacks column {name:?}", file.display())))
    };
    let silo_col = find(&schema.silo_column)?;
    let year_col = find(&schema.year_column)?;
    let target_col = find(&schema.target_column)?;
    let feature_cols: Vec<usize> =
        (0..header.len()).filter(|&i| i != silo_col && i != year_col && i != target_col).collect();
    let width = total_width(&schema.groups);
    if feature_cols.len() != width {
        return Err(Error::Data(format!(
            "{}: header has {} feature columns, schema declares {width}",
            file.display(),
            feature_cols.len()
        )));
    }

    let mut rejected = 0;
    for record in reader.records() {
        let record = record?;
        let parsed = (|| {
            if record.len() != header.len() {
                return None;
            }
            let id = record.get(silo_col)?.trim();
            if id.is_empty() {
                return None;
            }
            let year = record.get(year_col)?.trim().parse::<i64>().ok()?;
            let num = |i: usize| record.get(i)?.trim().parse::<f64>().ok().filter(|v| v.is_finite());
            let target = num(target_col)?;
            let features = feature_cols.iter().map(|&i| num(i)).collect::<Option<Vec<f64>>>()?;
            Some((id.to_string(), Row { year, features, target }))
        })();
        match parsed {
            Some((id, row)) => {
                if !rows.contains_key(&id) {
                    order.push(id.clone());
                }
                rows.entry(id).or_default().push(row);
            }
            None => rejected += 1,
        }
    }
    Ok(rejected)
}

/// Column names for the features of `groups`: `<group>_<channel>_<step>`.
pub fn feature_names(groups: &[FeatureGroup]) -> Vec<String> {
    groups
        .iter()
        .flat_map(|g| (0..g.channels).flat_map(move |c| (0..g.length).map(move |t| format!("{}_{c}_{t}", g.name))))
        .collect()
}

fn write_rows<W: std::io::Write>(w: &mut csv::Writer<W>, silo: &Silo) -> Result<()> {
    for i in 0..silo.len() {
        let mut rec = Vec::with_capacity(silo.features.ncols() + 3);
        rec.push(silo.id.clone());
        rec.push(silo.years[i].to_string());
        rec.extend(silo.features.row(i).iter().map(|v| v.to_string()));
        rec.push(silo.targets[i].to_string());
        w.write_record(&rec)?;
    }
    Ok(())
}

/// Writes all silos to one file, or one file per silo (`<dir>/<id>.csv`)
/// when `per_silo` is set. Returns the files written.
pub fn write_csv(path: &Path, silos: &[Silo], schema: &CsvSchema, per_silo: bool) -> Result<Vec<PathBuf>> {
    let mut header = vec![schema.silo_column.clone(), schema.year_column.clone()];
    header.extend(feature_names(&schema.groups));
    header.push(schema.target_column.clone());
    if let Some(s) = silos.iter().find(|s| s.features.ncols() + 3 != header.len()) {
        return Err(Error::Shape(format!("silo {} does not match the schema width", s.id)));
    }
    let mut written = Vec::new();
    if per_silo {
        fs::create_dir_all(path)?;
        for silo in silos {
            let file = path.join(format!("{}.csv", silo.id));
            let mut w = csv::Writer::from_path(&file)?;
            w.write_record(&header)?;
            write_rows(&mut w, silo)?;
            w.flush()?;
            written.push(file);
        }
    } else {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&header)?;
        for silo in silos {
            write_rows(&mut w, silo)?;
        }
        w.flush()?;
        written.push(path.to_path_buf());
    }
    Ok(written)
}
