//! Reading and writing scenario files.
//!
//! CSV output has a header row and LF line endings. JSON is written with
//! struct field order, so equal inputs give equal bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use poflsc_core::config::ScenarioConfig;
use poflsc_core::learner::{parse_idx, Dataset};
use poflsc_core::ledger::Chain;
use poflsc_core::sim::{Overrides, ScenarioReport, ShrinkCurve};
use poflsc_core::topology::ResponseTimeMatrix;
use poflsc_core::trace::TraceEvent;
use poflsc_core::valuation::ShapleyReport;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const HISTOGRAM_BINS: usize = 20;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

fn parse_error(path: &Path, reason: impl ToString) -> CliError {
    CliError::Parse { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Parses a config by extension: `.json` as JSON, anything else as TOML.
pub fn parse_config(path: &Path, text: &str) -> Result<ScenarioConfig> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(text).map_err(|e| parse_error(path, e))
    } else {
        toml::from_str(text).map_err(|e| parse_error(path, e))
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| parse_error(path, e))?;
    parse_config(path, &text)
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let ds = parse_idx(&read_bytes(images)?, &read_bytes(labels)?)?;
    Ok(match limit {
        Some(n) if n < ds.len() => {
            let dim = ds.dim();
            Dataset::new(dim, ds.classes(), (0..n).flat_map(|i| ds.row(i).to_vec()).collect(), ds.labels()[..n].to_vec())?
        }
        _ => ds,
    })
}

/// Loads the files a config refers to; relative paths resolve against
/// `base` (the config's directory).
pub fn load_overrides(config: &ScenarioConfig, base: &Path) -> Result<Overrides> {
    let mut out = Overrides::default();
    if let (Some(images), Some(labels)) = (&config.dataset.idx_images, &config.dataset.idx_labels) {
        out.dataset = Some(load_idx(&resolve(base, images), &resolve(base, labels), config.dataset.idx_limit)?);
    }
    if let Some(matrix) = &config.response_matrix {
        out.matrix = Some(read_matrix_csv(&resolve(base, matrix))?);
    }
    Ok(out)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))
}

/// Row-major matrix with a header row of miner ids.
pub fn matrix_csv(m: &ResponseTimeMatrix) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record((0..m.len()).map(|i| i.to_string()))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    finish(w)
}

pub fn parse_matrix_csv(path: &Path, bytes: &[u8]) -> Result<ResponseTimeMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec.iter().map(|c| c.trim().parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
        rows.push(row.map_err(|e| parse_error(path, e))?);
    }
    Ok(ResponseTimeMatrix::from_rows(&rows)?)
}

pub fn read_matrix_csv(path: &Path) -> Result<ResponseTimeMatrix> {
    parse_matrix_csv(path, &read_bytes(path)?)
}

/// `label,f0,f1,...` per sample.
pub fn dataset_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(std::iter::once("label".to_string()).chain((0..ds.dim()).map(|j| format!("f{j}"))))?;
    for i in 0..ds.len() {
        w.write_record(std::iter::once(ds.label(i).to_string()).chain(ds.row(i).iter().map(|v| v.to_string())))?;
    }
    finish(w)
}

pub fn shapley_csv(report: &ShapleyReport) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["miner", "mean", "std"])?;
    for v in &report.values {
        w.write_record([v.miner.0.to_string(), v.mean.to_string(), v.std.to_string()])?;
    }
    finish(w)
}

/// Mean/std pairs, one point per member.
pub fn scatter_csv(report: &ShapleyReport) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["mean", "std"])?;
    for v in &report.values {
        w.write_record([v.mean.to_string(), v.std.to_string()])?;
    }
    finish(w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]` of `values`; the top edge belongs
/// to the last bin. A zero-width range puts everything in the first bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<Bin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin { lo: lo + width * i as f64, hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 }, count: 0 })
        .collect();
    for &v in values {
        let i = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        out[i].count += 1;
    }
    out
}

pub fn histogram_csv(report: &ShapleyReport) -> Result<Vec<u8>> {
    let means: Vec<f64> = report.values.iter().map(|v| v.mean).collect();
    let mut w = csv_writer();
    w.write_record(["bin", "lo", "hi", "count"])?;
    for (i, b) in histogram(&means, HISTOGRAM_BINS).iter().enumerate() {
        w.write_record([i.to_string(), b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    finish(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderColumns {
    Ascending,
    Descending,
    Both,
}

pub fn shrink_csv(curve: &ShrinkCurve, columns: OrderColumns) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    let (desc, asc) = match columns {
        OrderColumns::Both => (true, true),
        OrderColumns::Descending => (true, false),
        OrderColumns::Ascending => (false, true),
    };
    let mut header = vec!["size"];
    if desc {
        header.push("accuracy_descending");
    }
    if asc {
        header.push("accuracy_ascending");
    }
    w.write_record(&header)?;
    for p in &curve.points {
        let mut row = vec![p.size.to_string()];
        if desc {
            row.push(p.descending.to_string());
        }
        if asc {
            row.push(p.ascending.to_string());
        }
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_report(path: &Path) -> Result<ScenarioReport> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| parse_error(path, e))
}

/// One JSON object per line.
pub fn trace_jsonl(events: &[TraceEvent]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").expect("writing to a Vec");
    }
    Ok(out)
}

pub fn read_chain(path: &Path) -> Result<Chain> {
    Ok(Chain::from_bytes(&read_bytes(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use poflsc_core::topology::gen_response_matrix;

    #[test]
    fn matrix_round_trip() {
        let m = gen_response_matrix(5, 40.0, 10.0, 3).unwrap();
        let bytes = matrix_csv(&m).unwrap();
        assert!(bytes.starts_with(b"0,1,2,3,4\n"));
        assert_eq!(parse_matrix_csv(Path::new("m.csv"), &bytes).unwrap(), m);
    }

    #[test]
    fn histogram_edges() {
        let bins = histogram(&[0.0, 0.5, 1.0, 1.0], 4);
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 0, 1, 2]);
        assert_eq!(bins[3].hi, 1.0);
        let flat = histogram(&[0.2, 0.2], 20);
        assert_eq!(flat.len(), 20);
        assert_eq!(flat[0].count, 2);
    }

    #[test]
    fn config_by_extension() {
        let toml = "miner_count = 5\nsamples_per_miner = 3\nsub_block_time = 100.0\ncore_pool_threshold = 2\n\
                    pool_size_cap = 3\naudits_min = 0\nchallenges_min = 0\nlocal_epochs = 1\nlearning_rate = 0.1\n\
                    rt_mean = 10.0\nrt_std = 1.0\nmaster_seed = 1\nsv_estimator = \"LOO\"\nreservation_order = \"ASCENDING\"\n";
        let cfg = parse_config(Path::new("a.toml"), toml).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config(Path::new("a.json"), &json).unwrap(), cfg);
        assert!(parse_config(Path::new("a.toml"), "miner_count = ").is_err());
    }
}
