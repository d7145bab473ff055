//! Empirical diagnostics for tightness of solution sequences and for
//! continuity of `(s, η) ↦ ℙ^{s,η}` in the weak topology.
//!
//! Nothing here certifies convergence; reports state whether the estimates
//! are consistent with it at a stated tolerance.

use serde::Serialize;
use thiserror::Error;

use crate::parallel;
use crate::path::{same_grid, InitialCondition, PathError};
use crate::projectors::{PathRandomVariable, ProjectorError};
use crate::rng::Seed;
use crate::scalar::{dot, Real};
use crate::sde::{Engine, SimulationError};
use crate::skorokhod::{skorokhod_distance, summarize, tightness_from_summaries, SkorokhodError, TightnessConfig, TightnessVerdict};
use crate::stats::{z_score, RunningStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinuityError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Skorokhod(#[from] SkorokhodError),
    #[error("test bank is empty")]
    EmptyBank,
    #[error("scenario has no approximants")]
    EmptyScenario,
    #[error("approximant distances increase at level {level} ({prev} -> {next})")]
    NotConverging { level: usize, prev: f64, next: f64 },
    #[error("approximants must share the target grid")]
    GridMismatch,
    #[error("the diagnostic needs bounded coefficients; declared bounds are not finite")]
    UnboundedCoefficients,
}

/// Target `(s, η)`, approximants `(s_n, η_n)` and bounded test functionals.
#[derive(Debug, Clone)]
pub struct ConvergenceScenario<T: Real> {
    target: InitialCondition<T>,
    approximants: Vec<InitialCondition<T>>,
    bank: Vec<PathRandomVariable<T>>,
    distances: Vec<f64>,
}

/// `|s_n − s| + d(η_n^{s_n}, η^s)` with the J1 surrogate.
fn scenario_distance<T: Real>(a: &InitialCondition<T>, b: &InitialCondition<T>) -> Result<f64, ContinuityError> {
    let d = skorokhod_distance(&a.eta().stop_at_node(a.s_index()), &b.eta().stop_at_node(b.s_index()))?;
    Ok((a.s() - b.s()).abs().as_f64() + d.as_f64())
}

impl<T: Real> ConvergenceScenario<T> {
    pub fn new(
        target: InitialCondition<T>,
        approximants: Vec<InitialCondition<T>>,
        bank: Vec<PathRandomVariable<T>>,
    ) -> Result<Self, ContinuityError> {
        if approximants.is_empty() {
            return Err(ContinuityError::EmptyScenario);
        }
        if approximants.iter().any(|a| !same_grid(a.grid(), target.grid())) {
            return Err(ContinuityError::GridMismatch);
        }
        let distances = approximants.iter().map(|a| scenario_distance(a, &target)).collect::<Result<Vec<_>, _>>()?;
        for (n, w) in distances.windows(2).enumerate() {
            if w[1] > w[0] + 1e-12 {
                return Err(ContinuityError::NotConverging { level: n + 2, prev: w[0], next: w[1] });
            }
        }
        Ok(Self { target, approximants, bank, distances })
    }

    pub fn target(&self) -> &InitialCondition<T> {
        &self.target
    }

    pub fn approximants(&self) -> &[InitialCondition<T>] {
        &self.approximants
    }

    pub fn bank(&self) -> &[PathRandomVariable<T>] {
        &self.bank
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }
}

/// `cos(θ·X_T)`, `sin(θ·X_T)` for every `θ`, then the running maximum of
/// the first coordinate clamped to `[−1, 1]`.
pub fn default_bank<T: Real>(horizon: T, thetas: &[Vec<T>]) -> Vec<PathRandomVariable<T>> {
    let mut out = vec![];
    for th in thetas {
        let label: Vec<String> = th.iter().map(|v| format!("{}", v.as_f64())).collect();
        let label = label.join(",");
        let (a, b) = (th.clone(), th.clone());
        out.push(PathRandomVariable::at_time(format!("cos({label}·X_T)"), horizon, T::one(), move |x: &[T]| dot(&a, x).cos()));
        out.push(PathRandomVariable::at_time(format!("sin({label}·X_T)"), horizon, T::one(), move |x: &[T]| dot(&b, x).sin()));
    }
    out.push(PathRandomVariable::new("clamp(max X1)", T::one(), |p| {
        let m = p.values().iter().step_by(p.dim()).fold(T::neg_infinity(), |a, &b| a.max(b));
        m.max(-T::one()).min(T::one())
    }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    /// 1-based approximant index.
    pub n: usize,
    pub g: String,
    pub distance: f64,
    pub estimate_n: f64,
    pub stderr_n: f64,
    pub estimate_target: f64,
    pub stderr_target: f64,
    /// `Ê^{s_n,η_n}[g] − Ê^{s,η}[g]`.
    pub difference: f64,
    /// Standard error of the per-path paired difference.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendRow {
    pub g: String,
    /// `(#shrinking − #growing) / #steps` over consecutive `|difference|`.
    pub score: f64,
    /// `|difference| + z_crit · stderr` at the last level.
    pub tolerance: f64,
    pub statement: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub n_paths: usize,
    pub rows: Vec<ConvergenceRow>,
    pub trends: Vec<TrendRow>,
}

/// Estimates `E^{s_n,η_n}[g]` and `E^{s,η}[g]` with common random numbers:
/// path `i` of every level uses stream `i` of the same seed, so differences
/// are paired per path.
pub fn run_convergence_diagnostic<T: Real>(
    engine: &Engine<T>,
    scenario: &ConvergenceScenario<T>,
    n_paths: usize,
    seed: Seed,
    z_crit: f64,
) -> Result<ConvergenceReport, ContinuityError> {
    if scenario.bank.is_empty() {
        return Err(ContinuityError::EmptyBank);
    }
    if !engine.coefficients().bounds().is_bounded() {
        return Err(ContinuityError::UnboundedCoefficients);
    }
    if n_paths < 2 {
        return Err(ProjectorError::Budget { min: 2, got: n_paths }.into());
    }
    engine.check_init(&scenario.target)?;
    for a in &scenario.approximants {
        engine.check_init(a)?;
    }
    let ng = scenario.bank.len();
    let nl = scenario.approximants.len();
    struct Acc<T: Real> {
        target: Vec<RunningStats<T>>,
        levels: Vec<RunningStats<T>>,
        diffs: Vec<RunningStats<T>>,
    }
    let out = parallel::fold_indexed(
        n_paths,
        || {
            (
                Acc { target: vec![RunningStats::new(); ng], levels: vec![RunningStats::new(); ng * nl], diffs: vec![RunningStats::new(); ng * nl] },
                engine.workspace(),
                scenario.target.eta().clone(),
                vec![T::zero(); ng],
            )
        },
        |(acc, ws, buf, base), i| {
            engine.simulate_path_into(&scenario.target, seed, i as u64, buf, ws)?;
            for (gi, g) in scenario.bank.iter().enumerate() {
                base[gi] = g.eval(buf)?;
                acc.target[gi].push(base[gi]);
            }
            for (n, init) in scenario.approximants.iter().enumerate() {
                engine.simulate_path_into(init, seed, i as u64, buf, ws)?;
                for (gi, g) in scenario.bank.iter().enumerate() {
                    let v = g.eval(buf)?;
                    acc.levels[n * ng + gi].push(v);
                    acc.diffs[n * ng + gi].push(v - base[gi]);
                }
            }
            Ok::<_, ContinuityError>(())
        },
        |a, b| {
            for (x, y) in a.0.target.iter_mut().zip(&b.0.target) {
                x.merge(y);
            }
            for (x, y) in a.0.levels.iter_mut().zip(&b.0.levels) {
                x.merge(y);
            }
            for (x, y) in a.0.diffs.iter_mut().zip(&b.0.diffs) {
                x.merge(y);
            }
        },
    )?;
    let acc = out.0;
    let mut rows = vec![];
    for n in 0..nl {
        for (gi, g) in scenario.bank.iter().enumerate() {
            let (lv, tg, df) = (&acc.levels[n * ng + gi], &acc.target[gi], &acc.diffs[n * ng + gi]);
            rows.push(ConvergenceRow {
                n: n + 1,
                g: g.label().to_string(),
                distance: scenario.distances[n],
                estimate_n: lv.mean().as_f64(),
                stderr_n: lv.stderr().as_f64(),
                estimate_target: tg.mean().as_f64(),
                stderr_target: tg.stderr().as_f64(),
                difference: df.mean().as_f64(),
                stderr: df.stderr().as_f64(),
            });
        }
    }
    let mut trends = vec![];
    for (gi, g) in scenario.bank.iter().enumerate() {
        let series: Vec<&ConvergenceRow> = (0..nl).map(|n| &rows[n * ng + gi]).collect();
        let steps = series.len().saturating_sub(1);
        let mut score = 0i64;
        for w in series.windows(2) {
            let (a, b) = (w[0].difference.abs(), w[1].difference.abs());
            if b < a {
                score += 1;
            } else if b > a {
                score -= 1;
            }
        }
        let last = series[series.len() - 1];
        let tolerance = last.difference.abs() + z_crit * last.stderr;
        trends.push(TrendRow {
            g: g.label().to_string(),
            score: if steps == 0 { 0.0 } else { score as f64 / steps as f64 },
            tolerance,
            statement: format!("consistent with convergence at tolerance {tolerance:e}"),
        });
    }
    Ok(ConvergenceReport { n_paths, rows, trends })
}

/// z-score of an estimated difference against a closed-form value.
pub fn difference_z(row: &ConvergenceRow, expected: f64) -> f64 {
    z_score(row.difference - expected, row.stderr)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightnessDiagnostic {
    pub verdict: TightnessVerdict,
    pub levels: usize,
    pub n_paths: usize,
    /// Whether finite coefficient bounds were declared.
    pub bounded_coefficients: bool,
}

/// Simulates every approximant law and evaluates the tightness criterion.
/// Level `n` uses `seed.child(n)`.
pub fn run_tightness_diagnostic<T: Real>(
    engine: &Engine<T>,
    scenario: &ConvergenceScenario<T>,
    n_paths: usize,
    cfg: &TightnessConfig<T>,
    seed: Seed,
) -> Result<TightnessDiagnostic, ContinuityError> {
    let grid = scenario.target.grid().clone();
    let thetas = cfg.theta_schedule(&grid);
    let mut levels = Vec::with_capacity(scenario.approximants.len());
    for (n, init) in scenario.approximants.iter().enumerate() {
        let summaries = engine.fold_paths(
            init,
            n_paths,
            seed.child(n as u64),
            Vec::new,
            |acc, _, p| {
                acc.push(summarize(p, cfg.n, &thetas)?);
                Ok::<_, ContinuityError>(())
            },
            |a, b| a.extend(b),
        )?;
        levels.push(summaries);
    }
    let verdict = tightness_from_summaries(&levels, &grid, cfg)?;
    Ok(TightnessDiagnostic {
        verdict,
        levels: levels.len(),
        n_paths,
        bounded_coefficients: engine.coefficients().bounds().is_bounded(),
    })
}
