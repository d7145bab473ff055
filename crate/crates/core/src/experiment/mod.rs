//! Config-driven experiments behind the `pathdep` command line.
//!
//! Exit codes: 0 when every cell passes, 1 on a statistical failure, 2 on
//! usage, config or I/O errors.

pub mod config;
pub mod report;
pub mod suites;

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, Format, Suite};
pub use report::{RunManifest, SuiteSummary};
pub use suites::{run_suite, Cell, Experiment, SuiteReport};

use crate::path::CadlagPath;
use crate::sde::PathEnsemble;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{suite} suite: {message}")]
    Suite { suite: &'static str, message: String },
    #[error("missing ensemble: {0} has no manifest; run `simulate` first")]
    MissingEnsemble(String),
    #[error("ensemble at {path} was simulated from config {found}, expected {expected}")]
    StaleEnsemble { path: String, found: String, expected: String },
    #[error("no suite reports in {0}")]
    EmptyRunDir(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}

fn path_file(i: usize) -> String {
    format!("paths/path_{i:06}.csv")
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

/// Simulates `run.n_paths` paths and writes one CSV per path plus the manifest.
pub fn simulate(x: &Experiment, out: &Path) -> Result<RunManifest, ExperimentError> {
    let start = Instant::now();
    let n = x.config.run.n_paths;
    let ens = x
        .engine
        .simulate(&x.init, n, x.ensemble_seed())
        .map_err(|e| ExperimentError::Suite { suite: "simulate", message: e.to_string() })?;
    let mut manifest = RunManifest::new("simulate", &x.hash, x.config.run.seed, n);
    for (i, p) in ens.paths().iter().enumerate() {
        let mut buf = vec![];
        p.write_csv(&mut buf).expect("in-memory write");
        let name = path_file(i);
        report::write_bytes(&out.join(&name), &buf)?;
        manifest.outputs.insert(name, report::sha256_hex(&buf));
    }
    manifest.timings_ms.insert("simulate".into(), elapsed_ms(start));
    report::write_bytes(&out.join(report::MANIFEST), &report::json_bytes(&manifest))?;
    Ok(manifest)
}

/// Reads an ensemble written by [`simulate`] for the same config.
pub fn load_ensemble(x: &Experiment, dir: &Path) -> Result<PathEnsemble<f64>, ExperimentError> {
    if !dir.join(report::MANIFEST).is_file() {
        return Err(ExperimentError::MissingEnsemble(dir.display().to_string()));
    }
    let m = RunManifest::read(dir)?;
    if m.command != "simulate" || m.config_hash != x.hash {
        return Err(ExperimentError::StaleEnsemble { path: dir.display().to_string(), found: m.config_hash, expected: x.hash.clone() });
    }
    let mut paths = Vec::with_capacity(m.n_paths);
    for i in 0..m.n_paths {
        let f = dir.join(path_file(i));
        let file = std::fs::File::open(&f).map_err(|e| ExperimentError::Io { path: f.display().to_string(), message: e.to_string() })?;
        let p = CadlagPath::<f64>::read_csv(std::io::BufReader::new(file))
            .map_err(|e| ExperimentError::Io { path: f.display().to_string(), message: e.to_string() })?;
        paths.push(CadlagPath::new(x.engine.grid().clone(), p.dim(), p.values().to_vec()).map_err(|e| ExperimentError::Io {
            path: f.display().to_string(),
            message: e.to_string(),
        })?);
    }
    PathEnsemble::from_paths(x.init.clone(), x.ensemble_seed(), paths)
        .map_err(|e| ExperimentError::Io { path: dir.display().to_string(), message: e.to_string() })
}

pub struct VerifyOutcome {
    pub reports: Vec<SuiteReport>,
    pub manifest: RunManifest,
}

impl VerifyOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.reports.iter().all(|r| r.pass) {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }
}

/// Runs `suites` and writes `<suite>.json` (and `<suite>_cells.csv`) plus
/// the manifest into `out`. Reports are written even when cells fail.
pub fn verify(x: &Experiment, suites: &[Suite], out: &Path) -> Result<VerifyOutcome, ExperimentError> {
    let ensemble = match &x.config.run.ensemble {
        Some(dir) => Some(load_ensemble(x, dir)?),
        None => None,
    };
    let formats = &x.config.output.formats;
    let mut manifest = RunManifest::new("verify", &x.hash, x.config.run.seed, x.config.run.n_paths);
    let mut reports = vec![];
    for &suite in suites {
        let start = Instant::now();
        let r = run_suite(x, suite, ensemble.as_ref())?;
        manifest.timings_ms.insert(suite.name().into(), elapsed_ms(start));
        let mut files = vec![];
        if formats.contains(&Format::Json) {
            files.push((format!("{}.json", suite.name()), report::json_bytes(&r)));
        }
        if formats.contains(&Format::Csv) {
            files.push((format!("{}_cells.csv", suite.name()), report::cells_csv(&r)));
        }
        for (name, bytes) in files {
            report::write_bytes(&out.join(&name), &bytes)?;
            manifest.outputs.insert(name, report::sha256_hex(&bytes));
        }
        manifest
            .suites
            .insert(suite.name().into(), SuiteSummary { pass: r.pass, cells: r.n_cells, failed: r.n_failed, seed: r.suite_seed });
        log::info!("suite {}: {} ({} of {} cells failed)", suite.name(), if r.pass { "PASS" } else { "FAIL" }, r.n_failed, r.n_cells);
        reports.push(r);
    }
    report::write_bytes(&out.join(report::MANIFEST), &report::json_bytes(&manifest))?;
    Ok(VerifyOutcome { reports, manifest })
}

pub struct ReportOutcome {
    pub summary: String,
    pub reports: Vec<SuiteReport>,
    pub files: Vec<String>,
}

impl ReportOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.reports.iter().all(|r| r.pass) {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }
}

/// Aggregates the suite reports in `dir` into `summary.txt` and plot CSVs.
pub fn report(dir: &Path) -> Result<ReportOutcome, ExperimentError> {
    let reports = report::read_reports(dir)?;
    let summary = report::summary_text(&reports);
    report::write_bytes(&dir.join(report::SUMMARY), summary.as_bytes())?;
    let mut files = vec![report::SUMMARY.to_string()];
    for (name, bytes) in report::plot_series(&reports) {
        report::write_bytes(&dir.join(&name), &bytes)?;
        files.push(name);
    }
    Ok(ReportOutcome { summary, reports, files })
}
