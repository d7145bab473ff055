//! Verification suites run from an experiment config.

use std::fmt::Display;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::continuity::{default_bank, run_convergence_diagnostic, run_tightness_diagnostic, ConvergenceScenario};
use crate::events::Event;
use crate::experiment::config::{ConfigError, DriftConfig, ExperimentConfig, Suite};
use crate::experiment::ExperimentError;
use crate::generator::{trig_family, verify_martingale_problem, verify_martingale_problem_on, verify_weak_generator, Clock, CylinderFunctional, GeneratorVariant, MartingaleDesign};
use crate::maf::{halving_ratios, qv_against_bracket, quadratic_variation, rn_density, DeterministicAf, PartitionScheme};
use crate::path::{CadlagPath, InitialCondition};
use crate::projectors::{verify_composition, verify_flow_property, PathRandomVariable, DEFAULT_BUDGET_CAP};
use crate::rng::Seed;
use crate::scalar::dot;
use crate::sde::{Engine, PathEnsemble, SimulationError};
use crate::skorokhod::TightnessConfig;
use crate::stats::bonferroni_z;

/// A config resolved into an engine and an initial condition.
#[derive(Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub engine: Engine<f64>,
    pub init: InitialCondition<f64>,
    pub hash: String,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ConfigError> {
        let engine = config.engine()?;
        let init = config.initial()?;
        let hash = config.hash()?;
        Ok(Self { config, engine, init, hash })
    }

    pub fn root_seed(&self) -> Seed {
        Seed(self.config.run.seed)
    }

    pub fn suite_seed(&self, suite: Suite) -> Seed {
        self.root_seed().named(suite.name())
    }

    /// Seed of the ensemble written by `simulate`.
    pub fn ensemble_seed(&self) -> Seed {
        self.root_seed().named("simulate")
    }

    fn thetas(&self) -> Vec<Vec<f64>> {
        self.config.verify.thetas.clone().unwrap_or_else(|| {
            [1.0, -1.0, 2.0, -2.0].iter().map(|&k| vec![k; self.config.model.dim]).collect()
        })
    }

    fn times(&self) -> Vec<f64> {
        if let Some(t) = &self.config.verify.times {
            let grid = self.engine.grid();
            let mut out: Vec<f64> = t.iter().map(|&t| grid.time(grid.snap(t).unwrap_or(0))).collect();
            out.sort_by(f64::total_cmp);
            out.dedup();
            return out;
        }
        let grid = self.engine.grid();
        let (s, horizon) = (self.init.s(), grid.horizon());
        let mut out = vec![];
        for q in 1..=4 {
            let k = grid.snap(s + (horizon - s) * q as f64 / 4.0).unwrap_or(grid.last_index());
            let t = grid.time(k);
            if t >= s && out.last() != Some(&t) {
                out.push(t);
            }
        }
        out
    }

    fn variant(&self) -> GeneratorVariant {
        if self.config.verify.sabotage {
            GeneratorVariant::DropJumpCompensation
        } else {
            GeneratorVariant::Exact
        }
    }

    /// Approximants `(s, η + 2^{-n})` for `n = 1..=approximants`.
    fn scenario(&self, bank: Vec<PathRandomVariable<f64>>) -> Result<ConvergenceScenario<f64>, ExperimentError> {
        let eta = self.init.eta();
        let approx = (1..=self.config.verify.approximants)
            .map(|n| {
                let shift = 2f64.powi(-(n as i32));
                let vals = eta.values().iter().map(|v| v + shift).collect();
                let p = CadlagPath::new(eta.grid().clone(), eta.dim(), vals).expect("same shape");
                InitialCondition::at_node(self.init.s_index(), &p)
            })
            .collect();
        ConvergenceScenario::new(self.init.clone(), approx, bank).map_err(suite_err(Suite::Continuity))
    }
}

/// One reported test with its decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub pass: bool,
    /// Test statistic; `None` when it is not finite.
    pub statistic: Option<f64>,
    pub threshold: Option<f64>,
}

impl Cell {
    fn new(id: impl Into<String>, pass: bool, statistic: f64, threshold: f64) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        Self { id: id.into(), pass, statistic: finite(statistic), threshold: finite(threshold) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub pass: bool,
    pub config_hash: String,
    pub root_seed: u64,
    /// Seed every number in this report derives from.
    pub suite_seed: u64,
    pub n_cells: usize,
    pub n_failed: usize,
    pub cells: Vec<Cell>,
    pub detail: Value,
}

impl SuiteReport {
    pub fn failed(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| !c.pass)
    }
}

fn suite_err<E: Display>(suite: Suite) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Suite { suite: suite.name(), message: e.to_string() }
}

fn to_value<S: Serialize>(v: &S) -> Value {
    serde_json::to_value(v).expect("report types serialise")
}

/// Runs one suite. `ensemble` replaces fresh simulation where a fixed
/// sample is meaningful (pinning and the martingale-problem cells).
pub fn run_suite(x: &Experiment, suite: Suite, ensemble: Option<&PathEnsemble<f64>>) -> Result<SuiteReport, ExperimentError> {
    let seed = x.suite_seed(suite);
    log::info!("suite {} (seed {:#x})", suite.name(), seed.0);
    let (cells, detail) = match suite {
        Suite::Canonical => canonical(x, seed, ensemble)?,
        Suite::Mp => martingale(x, seed, ensemble)?,
        Suite::Generator => weak_generator(x, seed)?,
        Suite::Maf => maf(x, seed)?,
        Suite::Tightness => tightness(x, seed)?,
        Suite::Continuity => continuity(x, seed)?,
    };
    let n_failed = cells.iter().filter(|c| !c.pass).count();
    Ok(SuiteReport {
        suite,
        pass: n_failed == 0,
        config_hash: x.hash.clone(),
        root_seed: x.root_seed().0,
        suite_seed: seed.0,
        n_cells: cells.len(),
        n_failed,
        cells,
        detail,
    })
}

fn is_pinned(init: &InitialCondition<f64>, p: &CadlagPath<f64>) -> bool {
    let cut = (init.s_index() + 1) * init.dim();
    p.values()[..cut].iter().zip(&init.eta().values()[..cut]).all(|(a, b)| a.to_bits() == b.to_bits())
}

fn canonical(x: &Experiment, seed: Seed, ensemble: Option<&PathEnsemble<f64>>) -> Result<(Vec<Cell>, Value), ExperimentError> {
    let (e, init, v) = (&x.engine, &x.init, &x.config.verify);
    let grid = e.grid();
    let pinning = match ensemble {
        Some(ens) => ens.pinning_fraction(),
        None => {
            let n = x.config.run.n_paths;
            let pinned = e
                .fold_paths(
                    init,
                    n,
                    seed.named("pinning"),
                    || 0usize,
                    |acc, _, p| {
                        *acc += usize::from(is_pinned(init, p));
                        Ok::<_, SimulationError>(())
                    },
                    |a, b| *a += b,
                )
                .map_err(suite_err(Suite::Canonical))?;
            pinned as f64 / n as f64
        }
    };
    let mut cells = vec![Cell::new("canonical/pinning", pinning == 1.0, pinning, 1.0)];

    let times = x.times();
    let mid = (init.s() + grid.horizon()) / 2.0;
    let t = times.iter().copied().min_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs())).unwrap_or(init.s());
    let x0 = init.start_point().to_vec();
    let horizon = grid.horizon();
    let thetas = x.thetas();
    let conditioning = crate::events::event_bank(grid, t, &x0, v.flow_conditioning, v.bank_spacing).map_err(suite_err(Suite::Canonical))?;
    let targets = vec![
        Event::Above { time: horizon, coord: 0, level: x0[0] },
        Event::ball(horizon, x0.clone(), 2.0 * v.bank_spacing),
    ];
    let z = bonferroni_z(v.z_crit, thetas.len() + conditioning.len() * targets.len());

    let mut composition = vec![];
    for (i, th) in thetas.iter().enumerate() {
        let a = th.clone();
        let label = format!("cos({}·X_T)", th.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        let zv = PathRandomVariable::at_time(label, horizon, 1.0, move |y: &[f64]| dot(&a, y).cos());
        let r = verify_composition(e, init, &zv, t, v.nested_outer, v.nested_inner, seed.named("composition").child(i as u64), z, DEFAULT_BUDGET_CAP)
            .map_err(suite_err(Suite::Canonical))?;
        cells.push(Cell::new(format!("canonical/composition/{}", r.z), r.pass, r.z_score, z));
        composition.push(r);
    }
    let flow = verify_flow_property(e, init, &conditioning, &targets, t, v.nested_outer, v.nested_inner, seed.named("flow"), z).map_err(suite_err(Suite::Canonical))?;
    for (i, c) in flow.cells.iter().enumerate() {
        cells.push(Cell::new(format!("canonical/flow/{i}"), c.pass, c.z, z));
    }
    let detail = json!({
        "pinning_fraction": pinning,
        "pinning_source": if ensemble.is_some() { "ensemble" } else { "streamed" },
        "t": t,
        "z_crit": z,
        "composition": to_value(&composition),
        "flow": to_value(&flow),
    });
    Ok((cells, detail))
}

fn design(x: &Experiment) -> Result<MartingaleDesign<f64>, ExperimentError> {
    let v = &x.config.verify;
    let mut d = MartingaleDesign::with_default_banks(x.engine.grid(), trig_family(&x.thetas()), &x.times(), x.init.start_point(), v.bank_size, v.bank_spacing)
        .map_err(suite_err(Suite::Mp))?;
    d.z_crit = v.z_crit;
    d.variant = x.variant();
    Ok(d)
}

fn martingale(x: &Experiment, seed: Seed, ensemble: Option<&PathEnsemble<f64>>) -> Result<(Vec<Cell>, Value), ExperimentError> {
    let d = design(x)?;
    let report = match ensemble {
        Some(ens) => verify_martingale_problem_on(&x.engine, ens, &d),
        None => verify_martingale_problem(&x.engine, &x.init, &d, x.config.run.n_paths, seed),
    }
    .map_err(suite_err(Suite::Mp))?;
    let cells = report.cells.iter().map(|c| Cell::new(c.test_id.clone(), c.pass, c.z, report.z_crit)).collect();
    let mut detail = to_value(&report);
    detail["source"] = json!(if ensemble.is_some() { "ensemble" } else { "streamed" });
    detail["variant"] = json!(format!("{:?}", d.variant));
    detail["event_bank"] = to_value(&d.banks);
    Ok((cells, detail))
}

fn weak_generator(x: &Experiment, seed: Seed) -> Result<(Vec<Cell>, Value), ExperimentError> {
    let e = &x.engine;
    let clock = Clock::identity(e.grid());
    let times: Vec<f64> = x.times().into_iter().filter(|&t| t > x.init.s()).collect();
    let family = trig_family(&x.thetas());
    let z = bonferroni_z(x.config.verify.z_crit, family.len() * times.len());
    let mut cells = vec![];
    let mut reports = vec![];
    for f in family {
        let mut phi = CylinderFunctional::new(f, e.clone());
        phi.variant = x.variant();
        for &t in &times {
            let idx = reports.len() as u64;
            let r = verify_weak_generator(e, &phi, &clock, &x.init, t, x.config.run.n_paths.max(2), seed.child(idx), z, 1e-12).map_err(suite_err(Suite::Generator))?;
            cells.push(Cell::new(format!("generator/{}/t={}", r.phi, r.t), r.pass, r.z, z));
            reports.push(r);
        }
    }
    Ok((cells, json!({ "z_crit": z, "cells": to_value(&reports) })))
}

fn maf(x: &Experiment, seed: Seed) -> Result<(Vec<Cell>, Value), ExperimentError> {
    let (e, init, v) = (&x.engine, &x.init, &x.config.verify);
    let grid = e.grid();
    let [a, b] = v.qv_interval.unwrap_or([init.s(), grid.horizon()]);
    let family = trig_family(&x.thetas());
    let z = bonferroni_z(v.z_crit, family.len());
    let mut cells = vec![];
    let mut qv = vec![];
    for (i, f) in family.into_iter().enumerate() {
        let r = qv_against_bracket(e, init, f, a, b, x.config.run.n_paths.max(2), seed.child(i as u64), z).map_err(suite_err(Suite::Maf))?;
        cells.push(Cell::new(format!("maf/qv/{}", r.f), r.pass, r.z, z));
        qv.push(r);
    }

    // A bounded-variation input: [A] vanishes linearly in the mesh.
    let eta = init.eta();
    let bv = DeterministicAf::new("t^2", |t: f64| t * t);
    let scheme = PartitionScheme::dyadic(grid, a, b).map_err(suite_err(Suite::Maf))?;
    let bv_qv = quadratic_variation(&bv, &scheme, eta).map_err(suite_err(Suite::Maf))?;
    let ratios = halving_ratios(&bv_qv.levels);
    // The decay is linear only asymptotically; the ratio test starts at
    // four subintervals.
    let fine = bv_qv.levels.iter().position(|l| l.mesh <= (b - a) / 4.0 * (1.0 + 1e-9)).unwrap_or(bv_qv.levels.len());
    let worst = ratios.iter().skip(fine).map(|r| (r - 0.5).abs()).fold(0.0, f64::max);
    cells.push(Cell::new("maf/bv-halving", worst <= 0.1, worst, 0.1));

    let clock = Clock::identity(grid);
    let linear = DeterministicAf::new("r^2/2", |t: f64| 0.5 * t * t);
    let mut densities = vec![];
    for &w in &v.rn_windows {
        let d = rn_density(&linear, &clock, eta, w).map_err(suite_err(Suite::Maf))?;
        let worst = d.times.iter().zip(&d.h).map(|(t, h)| (h - t).abs()).fold(0.0, f64::max);
        cells.push(Cell::new(format!("maf/rn/window={w}"), worst <= d.delta, worst, d.delta));
        densities.push(json!({ "window": w, "delta": d.delta, "max_error": worst, "h": d.h, "times": d.times }));
    }
    let unit = DeterministicAf::new("r", |t: f64| t);
    let d = rn_density(&unit, &clock, eta, v.rn_windows[0]).map_err(suite_err(Suite::Maf))?;
    let worst = d.h.iter().map(|h| (h - 1.0).abs()).fold(0.0, f64::max);
    cells.push(Cell::new("maf/rn/constant", worst == 0.0, worst, 0.0));

    let detail = json!({
        "interval": [a, b],
        "z_crit": z,
        "qv": to_value(&qv),
        "bv": { "levels": to_value(&bv_qv.levels), "ratios": ratios },
        "rn": densities,
    });
    Ok((cells, detail))
}

fn tightness(x: &Experiment, seed: Seed) -> Result<(Vec<Cell>, Value), ExperimentError> {
    let v = &x.config.verify;
    let scenario = x.scenario(vec![])?;
    let cfg = TightnessConfig::new(v.tightness_n, v.tightness_epsilon, v.tightness_alphas.clone());
    let d = run_tightness_diagnostic(&x.engine, &scenario, x.config.run.n_paths, &cfg, seed).map_err(suite_err(Suite::Tightness))?;
    let mut cells = vec![];
    let k_pass = d.verdict.k.is_some();
    cells.push(Cell::new(
        format!("tightness/{}", crate::skorokhod::COMPACT_CONTAINMENT),
        k_pass,
        d.verdict.k.unwrap_or(f64::NAN),
        v.tightness_epsilon,
    ));
    for (alpha, theta) in &d.verdict.theta_per_alpha {
        cells.push(Cell::new(
            format!("tightness/{}(alpha={alpha})", crate::skorokhod::OSCILLATION),
            theta.is_some(),
            theta.unwrap_or(f64::NAN),
            v.tightness_epsilon,
        ));
    }
    let mut detail = to_value(&d);
    detail["distances"] = json!(scenario.distances());
    Ok((cells, detail))
}

/// `E[e^{iθ·X_T}]` from `x` at time `s` for constant coefficients, as
/// `(E cos, E sin)`. `None` when the drift is not constant.
fn closed_form(x: &Experiment, theta: &[f64], start: &[f64]) -> Option<(f64, f64)> {
    if !matches!(x.config.model.drift, DriftConfig::Constant { .. }) {
        return None;
    }
    let e = &x.engine;
    let m = e.dim();
    let view = x.init.eta().view(x.init.s_index());
    let c = e.coefficients();
    let mut beta = vec![0.0; m];
    c.drift(&view, &mut beta);
    let mut sigma = vec![0.0; m * m];
    c.diffusion(&view, &mut sigma);
    let tau = e.grid().horizon() - x.init.s();
    // θᵀσσᵀθ = ‖σᵀθ‖²
    let var: f64 = (0..m).map(|j| (0..m).map(|i| theta[i] * sigma[i * m + j]).sum::<f64>().powi(2)).sum();
    let mut log_mag = -0.5 * tau * var;
    let mut phase = dot(theta, start) + tau * dot(theta, &beta);
    let mut w = vec![0.0; m];
    for atom in e.jumps().atoms() {
        c.jump(&view, &atom.y, &mut w);
        let tw = dot(theta, &w);
        log_mag += tau * atom.mass * (tw.cos() - 1.0);
        phase += tau * atom.mass * (tw.sin() - tw);
    }
    let mag = log_mag.exp();
    Some((mag * phase.cos(), mag * phase.sin()))
}

fn continuity(x: &Experiment, seed: Seed) -> Result<(Vec<Cell>, Value), ExperimentError> {
    let v = &x.config.verify;
    let thetas = x.thetas();
    let bank = default_bank(x.engine.grid().horizon(), &thetas);
    let scenario = x.scenario(bank)?;
    let report = run_convergence_diagnostic(&x.engine, &scenario, x.config.run.n_paths.max(2), seed, v.z_crit).map_err(suite_err(Suite::Continuity))?;
    let ng = 2 * thetas.len() + 1;
    let start = x.init.start_point().to_vec();
    let mut cells = vec![];
    let mut expected = vec![];
    if closed_form(x, &thetas[0], &start).is_some() {
        let z = bonferroni_z(v.z_crit, 2 * thetas.len() * scenario.approximants().len());
        for (ri, row) in report.rows.iter().enumerate() {
            let gi = ri % ng;
            if gi == ng - 1 {
                expected.push(Value::Null);
                continue;
            }
            let th = &thetas[gi / 2];
            let shifted = scenario.approximants()[row.n - 1].start_point().to_vec();
            let (c0, s0) = closed_form(x, th, &start).expect("constant drift");
            let (c1, s1) = closed_form(x, th, &shifted).expect("constant drift");
            let diff = if gi % 2 == 0 { c1 - c0 } else { s1 - s0 };
            let zs = crate::continuity::difference_z(row, diff);
            cells.push(Cell::new(format!("continuity/n={}/{}", row.n, row.g), zs.abs() <= z, zs, z));
            expected.push(json!(diff));
        }
    } else {
        for g in 0..ng {
            let first = &report.rows[g];
            let last = &report.rows[report.rows.len() - ng + g];
            let slack = first.difference.abs() + v.z_crit * (first.stderr + last.stderr);
            cells.push(Cell::new(format!("continuity/trend/{}", first.g), last.difference.abs() <= slack, last.difference.abs(), slack));
        }
    }
    let mut detail = to_value(&report);
    detail["expected"] = Value::Array(expected);
    Ok((cells, detail))
}

/// Martingale-problem design used by the `mp` suite, exposed for tests.
pub fn mp_design(x: &Experiment) -> Result<MartingaleDesign<f64>, ExperimentError> {
    design(x)
}
