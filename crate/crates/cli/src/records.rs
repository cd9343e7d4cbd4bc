//! Metric record files and their summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cotrain_core::schedule::RampConfig;
use cotrain_core::trainer::EpochRecord;

use crate::error::{CliError, CliResult};

pub fn write_records(path: &Path, records: &[EpochRecord], num_classes: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EpochRecord::header(num_classes))?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock seconds per epoch, kept out of the metric records so those
/// stay byte-identical across repeated runs.
pub fn write_timing(path: &Path, epoch_seconds: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "seconds"])?;
    for (i, s) in epoch_seconds.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{s:.3}")])?;
    }
    w.flush()?;
    Ok(())
}

/// A record file read back as text columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()?;
        Ok(Self { path: path.to_path_buf(), header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Values of a numeric column; non-numeric cells become NaN.
    pub fn numeric(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column(name)?;
        Some(self.rows.iter().map(|r| r[c].parse().unwrap_or(f64::NAN)).collect())
    }

    /// Group label: the file stem without a trailing `_seed<N>`.
    pub fn group(&self) -> String {
        let stem = self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match stem.rsplit_once("_seed") {
            Some((head, tail)) if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) => head.to_string(),
            _ => stem,
        }
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const TEXT_COLUMNS: [&str; 3] = ["epoch", "method", "seed"];

fn check_schemas(tables: &[Table]) -> CliResult<()> {
    let first = &tables[0];
    for t in &tables[1..] {
        if t.header != first.header {
            let missing: Vec<&String> = first.header.iter().filter(|h| !t.header.contains(h)).collect();
            let extra: Vec<&String> = t.header.iter().filter(|h| !first.header.contains(h)).collect();
            let detail = if missing.is_empty() && extra.is_empty() {
                "same columns in a different order".to_string()
            } else {
                format!("missing {missing:?}, unexpected {extra:?}")
            };
            return Err(CliError::Schema(format!(
                "{} vs {}: {detail}",
                t.path.display(),
                first.path.display()
            )));
        }
    }
    Ok(())
}

/// Final-epoch statistics of one group of record files.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub group: String,
    pub method: String,
    pub runs: usize,
    /// `(column, mean, sample std)` for every numeric column.
    pub stats: Vec<(String, f64, f64)>,
}

impl GroupSummary {
    pub fn stat(&self, column: &str) -> Option<(f64, f64)> {
        self.stats.iter().find(|(c, _, _)| c == column).map(|&(_, m, s)| (m, s))
    }
}

/// Groups the tables and summarizes the last row of each.
pub fn summarize_tables(tables: &[Table]) -> CliResult<Vec<GroupSummary>> {
    if tables.is_empty() {
        return Err(CliError::Schema("no record files given".into()));
    }
    check_schemas(tables)?;
    for t in tables {
        if t.rows.is_empty() {
            return Err(CliError::Schema(format!("{} has no rows", t.path.display())));
        }
    }
    let mut groups: BTreeMap<String, Vec<&Table>> = BTreeMap::new();
    for t in tables {
        groups.entry(t.group()).or_default().push(t);
    }
    let header = &tables[0].header;
    let method_col = tables[0].column("method");
    Ok(groups
        .into_iter()
        .map(|(group, ts)| {
            let stats = header
                .iter()
                .enumerate()
                .filter(|(_, h)| !TEXT_COLUMNS.contains(&h.as_str()))
                .map(|(c, h)| {
                    let finals: Vec<f64> =
                        ts.iter().map(|t| t.rows.last().expect("non-empty")[c].parse().unwrap_or(f64::NAN)).collect();
                    let (m, s) = mean_std(&finals);
                    (h.clone(), m, s)
                })
                .collect();
            let method = method_col.map(|c| ts[0].rows[0][c].clone()).unwrap_or_default();
            GroupSummary { group, method, runs: ts.len(), stats }
        })
        .collect())
}

pub fn write_summary(path: &Path, groups: &[GroupSummary]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some(first) = groups.first() else {
        return Ok(());
    };
    let mut header = vec!["group".to_string(), "method".into(), "runs".into(), "dsc_vote".into(), "dsc_avg".into()];
    for (c, _, _) in &first.stats {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header)?;
    let report = |g: &GroupSummary, col: &str| {
        g.stat(col).map(|(m, s)| format!("{m:.2} ({s:.2})")).unwrap_or_default()
    };
    for g in groups {
        let mut row = vec![g.group.clone(), g.method.clone(), g.runs.to_string()];
        row.push(report(g, "dsc_vote_mean"));
        row.push(report(g, "dsc_avg_mean"));
        for (_, m, s) in &g.stats {
            row.push(m.to_string());
            row.push(s.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column `x y` series, one point per line.
pub fn write_series(path: &Path, points: &[(f64, f64)]) -> CliResult<()> {
    let mut s = String::new();
    for (x, y) in points {
        s.push_str(&format!("{x} {y}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn ramp_series(ramp: &RampConfig, last_epoch: u32) -> Vec<(f64, f64)> {
    (0..=last_epoch).map(|t| (f64::from(t), ramp.ramp(t))).collect()
}

/// Per-epoch mean over the tables of one group for `column`.
pub fn mean_curve(tables: &[&Table], column: &str) -> Vec<(f64, f64)> {
    let cols: Vec<Vec<f64>> = tables.iter().filter_map(|t| t.numeric(column)).collect();
    let epochs = cols.iter().map(Vec::len).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = cols.iter().map(|c| c[e]).collect();
            ((e + 1) as f64, mean_std(&v).0)
        })
        .collect()
}

/// Writes `summary.csv` plus per-group DSC curves and ramp curves under `out`.
pub fn summarize(files: &[PathBuf], ramps: &[(&str, RampConfig)], last_epoch: u32, out: &Path) -> CliResult<Vec<GroupSummary>> {
    let tables = files.iter().map(|f| Table::read(f)).collect::<CliResult<Vec<_>>>()?;
    let groups = summarize_tables(&tables)?;
    fs::create_dir_all(out.join("plots"))?;
    write_summary(&out.join("summary.csv"), &groups)?;
    for g in &groups {
        let members: Vec<&Table> = tables.iter().filter(|t| t.group() == g.group).collect();
        for col in ["dsc_vote_mean", "dsc_avg_mean"] {
            write_series(&out.join("plots").join(format!("{}_{col}.dat", g.group)), &mean_curve(&members, col))?;
        }
    }
    for (name, r) in ramps {
        write_series(&out.join("plots").join(format!("ramp_{name}.dat")), &ramp_series(r, last_epoch))?;
    }
    Ok(groups)
}
