//! Byte-stable report files: JSON with sorted keys, CSV with LF endings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::experiment::suites::SuiteReport;
use crate::experiment::ExperimentError;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.txt";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Pretty JSON with keys sorted at every level and a trailing newline.
pub fn json_bytes<S: Serialize>(value: &S) -> Vec<u8> {
    // Value maps are ordered by key, so a round trip sorts struct fields too.
    let v = serde_json::to_value(value).expect("serialisable");
    let mut s = serde_json::to_string_pretty(&v).expect("serialisable");
    s.push('\n');
    s.into_bytes()
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn num(x: &Value) -> String {
    match x {
        Value::Number(n) => n.to_string(),
        Value::Null => "nan".into(),
        other => other.to_string(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), |v| v.to_string())
}

/// `id,pass,statistic,threshold` per cell.
pub fn cells_csv(report: &SuiteReport) -> Vec<u8> {
    let header = ["id", "pass", "statistic", "threshold"].map(String::from);
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| vec![c.id.clone(), c.pass.to_string(), opt(c.statistic), opt(c.threshold)])
        .collect();
    csv_bytes(&header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub pass: bool,
    pub cells: usize,
    pub failed: usize,
    pub seed: u64,
}

/// Provenance of one command run. Timings live only here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub workers: usize,
    pub n_paths: usize,
    pub suites: BTreeMap<String, SuiteSummary>,
    pub timings_ms: BTreeMap<String, u64>,
    /// SHA-256 of every file written, keyed by path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, seed: u64, n_paths: usize) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            workers: rayon::current_num_threads(),
            n_paths,
            suites: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self, ExperimentError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Io { path: path.display().to_string(), message: e.to_string() })
    }
}

/// Reads every suite report in `dir`, ordered by file name.
pub fn read_reports(dir: &Path) -> Result<Vec<SuiteReport>, ExperimentError> {
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != MANIFEST))
        .collect();
    files.sort();
    let mut out = vec![];
    for f in files {
        let text = fs::read_to_string(&f).map_err(io_err(&f))?;
        match serde_json::from_str::<SuiteReport>(&text) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if out.is_empty() {
        return Err(ExperimentError::EmptyRunDir(dir.display().to_string()));
    }
    Ok(out)
}

/// Human-readable summary; failing suites come first.
pub fn summary_text(reports: &[SuiteReport]) -> String {
    let mut order: Vec<&SuiteReport> = reports.iter().collect();
    order.sort_by_key(|r| (r.pass, r.suite));
    let mut s = format!("{:<12} {:<6} {:>7} {:>7}  {}\n", "suite", "status", "cells", "failed", "seed");
    for r in &order {
        s.push_str(&format!(
            "{:<12} {:<6} {:>7} {:>7}  {:#018x}\n",
            r.suite.name(),
            if r.pass { "PASS" } else { "FAIL" },
            r.n_cells,
            r.n_failed,
            r.suite_seed
        ));
    }
    for r in order.iter().filter(|r| !r.pass) {
        s.push_str(&format!("\nfailing cells in {}:\n", r.suite.name()));
        for c in r.failed() {
            s.push_str(&format!("  {}  statistic={}  threshold={}\n", c.id, opt(c.statistic), opt(c.threshold)));
        }
    }
    s
}

/// Plot-ready series extracted from suite reports.
pub fn plot_series(reports: &[SuiteReport]) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    for r in reports {
        match r.suite {
            crate::experiment::Suite::Maf => {
                if let Some(q) = qv_convergence(&r.detail) {
                    out.push(("qv_convergence.csv".to_string(), q));
                }
                if let Some(d) = rn_series(&r.detail) {
                    out.push(("rn_density.csv".to_string(), d));
                }
            }
            crate::experiment::Suite::Continuity => out.push(("convergence_diagnostic.csv".to_string(), convergence_series(&r.detail))),
            crate::experiment::Suite::Mp => out.push(("mp_cells.csv".to_string(), cells_csv(r))),
            _ => {}
        }
    }
    out
}

/// `level,mesh` then mean and stderr per test function; mesh decreases
/// down the rows.
fn qv_convergence(detail: &Value) -> Option<Vec<u8>> {
    let qv = detail.get("qv")?.as_array()?;
    let first = qv.first()?.get("levels")?.as_array()?;
    let mut header = vec!["level".to_string(), "mesh".to_string()];
    for f in qv {
        let name = f.get("f")?.as_str()?;
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_stderr"));
    }
    header.push("bracket_mean".into());
    let mut rows = vec![];
    for (k, lv) in first.iter().enumerate() {
        let mut row = vec![num(lv.get("level")?), num(lv.get("mesh")?)];
        for f in qv {
            let l = f.get("levels")?.get(k)?;
            row.push(num(l.get("mean")?));
            row.push(num(l.get("stderr")?));
        }
        row.push(num(qv[0].get("bracket_mean")?));
        rows.push(row);
    }
    Some(csv_bytes(&header, &rows))
}

fn rn_series(detail: &Value) -> Option<Vec<u8>> {
    let rn = detail.get("rn")?.as_array()?;
    let times = rn.first()?.get("times")?.as_array()?;
    let mut header = vec!["t".to_string()];
    for d in rn {
        header.push(format!("h_window{}", num(d.get("window")?)));
    }
    let mut rows = vec![];
    for (k, t) in times.iter().enumerate() {
        let mut row = vec![num(t)];
        for d in rn {
            row.push(num(d.get("h")?.get(k)?));
        }
        rows.push(row);
    }
    Some(csv_bytes(&header, &rows))
}

fn convergence_series(detail: &Value) -> Vec<u8> {
    let header = ["n", "distance", "g", "difference", "stderr", "expected"].map(String::from);
    let empty = vec![];
    let rows = detail.get("rows").and_then(|r| r.as_array()).unwrap_or(&empty);
    let expected = detail.get("expected").and_then(|r| r.as_array()).unwrap_or(&empty);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let field = |k: &str| r.get(k).map(num).unwrap_or_default();
            let g = r.get("g").and_then(|g| g.as_str()).unwrap_or_default().to_string();
            vec![field("n"), field("distance"), g, field("difference"), field("stderr"), expected.get(i).map(num).unwrap_or_else(|| "nan".into())]
        })
        .collect();
    csv_bytes(&header, &rows)
}
