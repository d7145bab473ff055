//! Monte Carlo projectors `P_s[Z](η) = E^{s,η}[Z]` and checks of the
//! projector axioms and of the tower property.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::events::{probe_non_anticipative, Event, EventError, PathEvent};
use crate::parallel;
use crate::path::{CadlagPath, InitialCondition, PathError};
use crate::rng::Seed;
use crate::scalar::Real;
use crate::sde::{Engine, SimulationError};
use crate::stats::{z_score, RunningStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectorError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error("`{label}` exceeded its bound {bound} (value {value})")]
    Unbounded { label: String, value: f64, bound: f64 },
    #[error("`{label}` is not measurable at time {t}")]
    NotMeasurable { label: String, t: f64 },
    #[error("need at least {min} paths, got {got}")]
    Budget { min: usize, got: usize },
    #[error("nested budget {requested} exceeds the cap {cap}")]
    BudgetExhausted { requested: usize, cap: usize },
    #[error("need s <= t, got s = {s}, t = {t}")]
    Order { s: f64, t: f64 },
    #[error("event bank is empty")]
    EmptyBank,
}

type PathFn<T> = dyn Fn(&CadlagPath<T>) -> T + Send + Sync;

/// A bounded path functional `Z`.
#[derive(Clone)]
pub struct PathRandomVariable<T: Real> {
    f: Arc<PathFn<T>>,
    bound: T,
    measurability_time: Option<T>,
    label: String,
}

impl<T: Real> std::fmt::Debug for PathRandomVariable<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PathRandomVariable")
            .field("label", &self.label)
            .field("bound", &self.bound)
            .field("measurability_time", &self.measurability_time)
            .finish()
    }
}

impl<T: Real> PathRandomVariable<T> {
    pub fn new(label: impl Into<String>, bound: T, f: impl Fn(&CadlagPath<T>) -> T + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), bound, measurability_time: None, label: label.into() }
    }

    /// Declares that `Z` depends only on the path stopped at `u`.
    pub fn measurable_at(mut self, u: T) -> Self {
        self.measurability_time = Some(u);
        self
    }

    /// `Z ≡ c`.
    pub fn constant(c: T) -> Self {
        Self::new(format!("const({})", c.as_f64()), c.abs(), move |_| c).measurable_at(T::zero())
    }

    /// `g(ω(t))` for a bounded `g`.
    pub fn at_time(label: impl Into<String>, t: T, bound: T, g: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        Self::new(label, bound, move |p| p.evaluate(t).map(|x| g(x)).unwrap_or(T::nan())).measurable_at(t)
    }

    /// `1_F`.
    pub fn indicator(event: Event<T>) -> Self {
        let t = event.time();
        let label = event.label();
        Self::new(label, T::one(), move |p| if event.contains(p) { T::one() } else { T::zero() }).measurable_at(t)
    }

    /// `a·Z1 + b·Z2`.
    pub fn combine(a: T, z1: &Self, b: T, z2: &Self) -> Self {
        let (f1, f2) = (z1.f.clone(), z2.f.clone());
        let m = match (z1.measurability_time, z2.measurability_time) {
            (Some(x), Some(y)) => Some(x.max(y)),
            _ => None,
        };
        Self {
            f: Arc::new(move |p| a * f1(p) + b * f2(p)),
            bound: a.abs() * z1.bound + b.abs() * z2.bound,
            measurability_time: m,
            label: format!("{}*{}+{}*{}", a.as_f64(), z1.label, b.as_f64(), z2.label),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn bound(&self) -> T {
        self.bound
    }

    pub fn measurability_time(&self) -> Option<T> {
        self.measurability_time
    }

    /// `Z(ω)`, failing if the value leaves `[−bound, bound]`.
    pub fn eval(&self, path: &CadlagPath<T>) -> Result<T, ProjectorError> {
        let v = (self.f)(path);
        if !(v.abs() <= self.bound) {
            return Err(ProjectorError::Unbounded { label: self.label.clone(), value: v.as_f64(), bound: self.bound.as_f64() });
        }
        Ok(v)
    }

    /// Checks `Z(ω) = Z(ω stopped at u)` on the given paths.
    pub fn check_measurability(&self, paths: &[CadlagPath<T>]) -> Result<(), ProjectorError> {
        let Some(u) = self.measurability_time else { return Ok(()) };
        for p in paths {
            let stopped = p.stop(u)?;
            if self.eval(p)? != self.eval(&stopped)? {
                return Err(ProjectorError::NotMeasurable { label: self.label.clone(), t: u.as_f64() });
            }
        }
        Ok(())
    }
}

/// `P_s[Z](η)` estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectorEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub s: f64,
}

fn mean_of<T: Real>(
    engine: &Engine<T>,
    init: &InitialCondition<T>,
    z: &PathRandomVariable<T>,
    n_paths: usize,
    seed: Seed,
) -> Result<RunningStats<T>, ProjectorError> {
    engine.fold_paths(
        init,
        n_paths,
        seed,
        RunningStats::new,
        |acc, _, p| {
            acc.push(z.eval(p)?);
            Ok::<_, ProjectorError>(())
        },
        |a, b| a.merge(&b),
    )
}

/// Sample mean of `Z` over `n_paths` fresh paths from `(s, η)`.
pub fn estimate_projector<T: Real>(
    engine: &Engine<T>,
    init: &InitialCondition<T>,
    z: &PathRandomVariable<T>,
    n_paths: usize,
    seed: Seed,
) -> Result<ProjectorEstimate, ProjectorError> {
    if n_paths < 2 {
        return Err(ProjectorError::Budget { min: 2, got: n_paths });
    }
    let st = mean_of(engine, init, z, n_paths, seed)?;
    Ok(ProjectorEstimate { value: st.mean().as_f64(), stderr: st.stderr().as_f64(), n: n_paths, s: init.s().as_f64() })
}

/// Default cap on `n_outer · n_inner`.
pub const DEFAULT_BUDGET_CAP: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionReport {
    pub z: String,
    pub s: f64,
    pub t: f64,
    /// `mean_i P̂_t[Z](ω_i)` over outer paths `ω_i` from `(s, η)`.
    pub nested: f64,
    /// `P̂_s[Z](η)` in blocks of `n_inner` sharing the inner seeds.
    pub direct: f64,
    pub discrepancy: f64,
    /// Standard error of the mean of the paired block differences.
    pub stderr: f64,
    pub z_score: f64,
    pub pass: bool,
    pub n_outer: usize,
    pub n_inner: usize,
}

/// Nested Monte Carlo check of `P_s ∘ P_t = P_s`.
///
/// Outer path `i` runs from `(s, η)` to `t`; block `i` of `n_inner` inner
/// paths restarts from `(t, ω_i)` while the matching direct block restarts
/// from `(s, η)` with the same inner seed. The blocks are i.i.d. pairs, so
/// the paired difference carries its own standard error. When `t = s` both
/// blocks are identical and the discrepancy is exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn verify_composition<T: Real>(
    engine: &Engine<T>,
    init: &InitialCondition<T>,
    z: &PathRandomVariable<T>,
    t: T,
    n_outer: usize,
    n_inner: usize,
    seed: Seed,
    z_crit: f64,
    budget_cap: usize,
) -> Result<CompositionReport, ProjectorError> {
    if t < init.s() {
        return Err(ProjectorError::Order { s: init.s().as_f64(), t: t.as_f64() });
    }
    if n_outer < 2 || n_inner < 2 {
        return Err(ProjectorError::Budget { min: 2, got: n_outer.min(n_inner) });
    }
    let requested = n_outer.saturating_mul(n_inner);
    if requested > budget_cap {
        return Err(ProjectorError::BudgetExhausted { requested, cap: budget_cap });
    }
    let kt = init.grid().node_index(t)?;
    engine.check_init(init)?;
    let outer_seed = seed.named("outer");
    let inner_seed = seed.named("inner");

    #[derive(Default)]
    struct Acc<T: Real> {
        nested: RunningStats<T>,
        direct: RunningStats<T>,
        diff: RunningStats<T>,
    }
    let out = parallel::fold_indexed(
        n_outer,
        || (Acc::<T>::default(), engine.workspace(), init.eta().clone(), init.eta().clone()),
        |(acc, ws, outer, buf), i| {
            engine.simulate_path_into(init, outer_seed, i as u64, outer, ws)?;
            let restart = InitialCondition::at_node(kt, outer);
            let block = inner_seed.child(i as u64);
            let mut nested = RunningStats::new();
            let mut direct = RunningStats::new();
            for j in 0..n_inner as u64 {
                engine.simulate_path_into(&restart, block, j, buf, ws)?;
                nested.push(z.eval(buf)?);
                engine.simulate_path_into(init, block, j, buf, ws)?;
                direct.push(z.eval(buf)?);
            }
            let (a, b) = (nested.mean(), direct.mean());
            acc.nested.push(a);
            acc.direct.push(b);
            acc.diff.push(a - b);
            Ok::<_, ProjectorError>(())
        },
        |a, b| {
            a.0.nested.merge(&b.0.nested);
            a.0.direct.merge(&b.0.direct);
            a.0.diff.merge(&b.0.diff);
        },
    )?;
    let acc = out.0;
    let discrepancy = acc.diff.mean().as_f64();
    let stderr = acc.diff.stderr().as_f64();
    let zs = z_score(discrepancy, stderr);
    Ok(CompositionReport {
        z: z.label().to_string(),
        s: init.s().as_f64(),
        t: t.as_f64(),
        nested: acc.nested.mean().as_f64(),
        direct: acc.direct.mean().as_f64(),
        discrepancy,
        stderr,
        z_score: zs,
        pass: zs.abs() <= z_crit,
        n_outer,
        n_inner,
    })
}

/// One `(G, F)` cell of the integrated tower property.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowCell {
    pub g: String,
    pub f: String,
    /// `Ê[1_G 1_F]` over outer paths.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `Ê[1_G P̂^{t,ω}(F)]`.
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub discrepancy: f64,
    /// Standard error of the per-path difference `1_G (1_F − P̂^{t,ω}(F))`,
    /// floored at its value under the null, `E[1_G p(1−p)] (1 + 1/n_inner)`.
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowReport {
    pub t: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub cells: Vec<FlowCell>,
    pub pass: bool,
}

/// Checks `E[1_G 1_F] = E[1_G P^{t,ω}(F)]` for conditioning events `G`
/// measurable at `t` and events `F` of the whole path.
#[allow(clippy::too_many_arguments)]
pub fn verify_flow_property<T: Real>(
    engine: &Engine<T>,
    init: &InitialCondition<T>,
    conditioning: &[Event<T>],
    targets: &[Event<T>],
    t: T,
    n_outer: usize,
    n_inner: usize,
    seed: Seed,
    z_crit: f64,
) -> Result<FlowReport, ProjectorError> {
    if conditioning.is_empty() || targets.is_empty() {
        return Err(ProjectorError::EmptyBank);
    }
    if t < init.s() {
        return Err(ProjectorError::Order { s: init.s().as_f64(), t: t.as_f64() });
    }
    if n_outer < 2 || n_inner < 1 {
        return Err(ProjectorError::Budget { min: 2, got: n_outer.min(n_inner) });
    }
    let kt = init.grid().node_index(t)?;
    engine.check_init(init)?;
    let probe_seed = seed.named("event-probe");
    let probes = (0..4).map(|i| engine.simulate_path(init, probe_seed, i)).collect::<Result<Vec<_>, _>>()?;
    for g in conditioning {
        probe_non_anticipative(g, t, &probes, probe_seed)?;
    }
    let (ng, nf) = (conditioning.len(), targets.len());
    let outer_seed = seed.named("outer");
    let inner_seed = seed.named("inner");

    struct Acc<T: Real> {
        lhs: Vec<RunningStats<T>>,
        rhs: Vec<RunningStats<T>>,
        diff: Vec<RunningStats<T>>,
        null: Vec<RunningStats<T>>,
    }
    let fresh = || Acc {
        lhs: vec![RunningStats::new(); ng * nf],
        rhs: vec![RunningStats::new(); ng * nf],
        diff: vec![RunningStats::new(); ng * nf],
        null: vec![RunningStats::new(); ng * nf],
    };
    // unbiased p(1−p) from n_inner Bernoulli draws
    let bessel = if n_inner > 1 { T::count(n_inner) / T::count(n_inner - 1) } else { T::zero() };
    let out = parallel::fold_indexed(
        n_outer,
        || (fresh(), engine.workspace(), init.eta().clone(), init.eta().clone(), vec![T::zero(); nf]),
        |(acc, ws, outer, buf, p_hat), i| {
            engine.simulate_path_into(init, outer_seed, i as u64, outer, ws)?;
            let restart = InitialCondition::at_node(kt, outer);
            let block = inner_seed.child(i as u64);
            p_hat.iter_mut().for_each(|p| *p = T::zero());
            for j in 0..n_inner as u64 {
                engine.simulate_path_into(&restart, block, j, buf, ws)?;
                for (p, f) in p_hat.iter_mut().zip(targets) {
                    if f.contains(buf) {
                        *p = *p + T::one();
                    }
                }
            }
            let scale = T::count(n_inner);
            for (gi, g) in conditioning.iter().enumerate() {
                let in_g = g.contains(outer);
                for (fi, f) in targets.iter().enumerate() {
                    let c = gi * nf + fi;
                    let (l, r) = if in_g {
                        (if f.contains(outer) { T::one() } else { T::zero() }, p_hat[fi] / scale)
                    } else {
                        (T::zero(), T::zero())
                    };
                    acc.lhs[c].push(l);
                    acc.rhs[c].push(r);
                    acc.diff[c].push(l - r);
                    acc.null[c].push(if in_g { r * (T::one() - r) * bessel } else { T::zero() });
                }
            }
            Ok::<_, ProjectorError>(())
        },
        |a, b| {
            for c in 0..ng * nf {
                a.0.lhs[c].merge(&b.0.lhs[c]);
                a.0.rhs[c].merge(&b.0.rhs[c]);
                a.0.diff[c].merge(&b.0.diff[c]);
                a.0.null[c].merge(&b.0.null[c]);
            }
        },
    )?;
    let acc = out.0;
    let mut cells = vec![];
    for (gi, g) in conditioning.iter().enumerate() {
        for (fi, f) in targets.iter().enumerate() {
            let c = gi * nf + fi;
            let discrepancy = acc.diff[c].mean().as_f64();
            let null_var = acc.null[c].mean().as_f64() * (1.0 + 1.0 / n_inner as f64);
            let stderr = acc.diff[c].stderr().as_f64().max((null_var / n_outer as f64).sqrt());
            let z = z_score(discrepancy, stderr);
            cells.push(FlowCell {
                g: g.label(),
                f: f.label(),
                lhs: acc.lhs[c].mean().as_f64(),
                lhs_stderr: acc.lhs[c].stderr().as_f64(),
                rhs: acc.rhs[c].mean().as_f64(),
                rhs_stderr: acc.rhs[c].stderr().as_f64(),
                discrepancy,
                stderr,
                z,
                pass: z.abs() <= z_crit,
            });
        }
    }
    Ok(FlowReport { t: t.as_f64(), n_outer, n_inner, pass: cells.iter().all(|c| c.pass), cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::TimeGrid;
    use crate::sde::{JumpMeasure, PresetCoefficients};
    use proptest::prelude::*;

    fn engine(beta: f64, sigma: f64, jumps: JumpMeasure<f64>, n: usize) -> Engine<f64> {
        let g = Arc::new(TimeGrid::uniform(1.0, 1.0 / n as f64).unwrap());
        let c = PresetCoefficients::scalar(beta, sigma, &jumps).unwrap();
        Engine::with_preset(c, jumps, g).unwrap()
    }

    fn eta(e: &Engine<f64>) -> CadlagPath<f64> {
        CadlagPath::from_fn(e.grid().clone(), 1, |t| vec![(5.0 * t).sin()]).unwrap()
    }

    #[test]
    fn constants_and_pinned_functionals() {
        let e = engine(0.1, 0.5, JumpMeasure::single(vec![1.0], 0.5).unwrap(), 16);
        let init = InitialCondition::new(0.5, &eta(&e)).unwrap();
        let one = estimate_projector(&e, &init, &PathRandomVariable::constant(1.0), 100, Seed(1)).unwrap();
        assert_eq!((one.value, one.stderr), (1.0, 0.0));
        let z = PathRandomVariable::at_time("cos@0.25", 0.25, 1.0, |x: &[f64]| (3.0 * x[0]).cos());
        let est = estimate_projector(&e, &init, &z, 100, Seed(2)).unwrap();
        assert_eq!(est.value, (3.0 * (5.0f64 * 0.25).sin()).cos());
        assert_eq!(est.stderr, 0.0);
        let ens = e.simulate(&init, 20, Seed(3)).unwrap();
        z.check_measurability(ens.paths()).unwrap();
        let peek = PathRandomVariable::new("peek", 10.0, |p: &CadlagPath<f64>| p.node(16)[0]).measurable_at(0.25);
        assert!(peek.check_measurability(ens.paths()).is_err());
        assert!(estimate_projector(&e, &init, &z, 1, Seed(2)).is_err());
    }

    #[test]
    fn bound_violation_is_hard_error() {
        let e = engine(0.0, 1.0, JumpMeasure::empty(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
        let z = PathRandomVariable::new("x", 0.1, |p: &CadlagPath<f64>| p.node(16)[0]);
        assert!(matches!(estimate_projector(&e, &init, &z, 100, Seed(1)), Err(ProjectorError::Unbounded { .. })));
    }

    #[test]
    fn gaussian_characteristic_function() {
        let (beta, sigma) = (0.3, 0.6);
        let e = engine(beta, sigma, JumpMeasure::empty(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.25, &[0.2]).unwrap();
        let z = PathRandomVariable::at_time("cos(X_T)", 1.0, 1.0, |x: &[f64]| x[0].cos());
        let est = estimate_projector(&e, &init, &z, 20_000, Seed(4)).unwrap();
        let exact = (-sigma * sigma * 0.75 / 2.0).exp() * (0.2 + beta * 0.75).cos();
        assert!((est.value - exact).abs() <= 3.0 * est.stderr, "{est:?} vs {exact}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn linear_and_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..100) {
            let e = engine(0.1, 0.4, JumpMeasure::single(vec![0.5], 1.0).unwrap(), 8);
            let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
            let z1 = PathRandomVariable::at_time("c", 1.0, 1.0, |x: &[f64]| x[0].cos());
            let z2 = PathRandomVariable::at_time("s2", 1.0, 1.0, |x: &[f64]| x[0].sin().powi(2));
            let comb = PathRandomVariable::combine(a, &z1, b, &z2);
            let e1 = estimate_projector(&e, &init, &z1, 64, Seed(seed)).unwrap();
            let e2 = estimate_projector(&e, &init, &z2, 64, Seed(seed)).unwrap();
            let ec = estimate_projector(&e, &init, &comb, 64, Seed(seed)).unwrap();
            prop_assert!((ec.value - (a * e1.value + b * e2.value)).abs() <= 1e-12);
            prop_assert!(e2.value >= 0.0);
            // z1 <= 1 pointwise
            prop_assert!(e1.value <= 1.0);
        }
    }

    #[test]
    fn composition_identical_when_t_equals_s() {
        let e = engine(0.1, 0.4, JumpMeasure::single(vec![1.0], 0.5).unwrap(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.25, &[0.0]).unwrap();
        let z = PathRandomVariable::at_time("cos(X_T)", 1.0, 1.0, |x: &[f64]| x[0].cos());
        let r = verify_composition(&e, &init, &z, 0.25, 20, 20, Seed(5), 3.0, DEFAULT_BUDGET_CAP).unwrap();
        assert_eq!(r.discrepancy, 0.0);
        assert_eq!(r.stderr, 0.0);
        assert!(r.pass);
        assert!(verify_composition(&e, &init, &z, 0.5, 200, 200, Seed(5), 3.0, 1000).is_err());
        assert!(verify_composition(&e, &init, &z, 0.0, 20, 20, Seed(5), 3.0, DEFAULT_BUDGET_CAP).is_err());
    }

    #[test]
    fn composition_with_early_measurable_z() {
        let e = engine(0.1, 0.4, JumpMeasure::single(vec![1.0], 0.5).unwrap(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
        let z = PathRandomVariable::at_time("cos(X_0.5)", 0.5, 1.0, |x: &[f64]| x[0].cos());
        let r = verify_composition(&e, &init, &z, 0.5, 200, 50, Seed(6), 3.0, DEFAULT_BUDGET_CAP).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn flow_property_deterministic_and_pinned() {
        let e = engine(0.5, 0.0, JumpMeasure::empty(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
        let g = vec![Event::Whole, Event::ball(0.5, vec![0.25], 0.1)];
        let f = vec![Event::Above { time: 1.0, coord: 0, level: 0.4 }];
        let r = verify_flow_property(&e, &init, &g, &f, 0.5, 10, 3, Seed(1), 3.0).unwrap();
        for c in &r.cells {
            assert_eq!(c.discrepancy, 0.0);
            assert_eq!(c.stderr, 0.0);
        }
        let e = engine(0.1, 0.5, JumpMeasure::single(vec![1.0], 0.5).unwrap(), 16);
        let early = vec![Event::Above { time: 0.25, coord: 0, level: 0.0 }];
        let r = verify_flow_property(&e, &init, &g, &early, 0.5, 100, 5, Seed(2), 3.0).unwrap();
        for c in &r.cells {
            assert_eq!(c.discrepancy, 0.0);
        }
        assert!(verify_flow_property(&e, &init, &[Event::ball(0.75, vec![0.0], 1.0)], &f, 0.5, 10, 3, Seed(1), 3.0).is_err());
        assert!(verify_flow_property(&e, &init, &[], &f, 0.5, 10, 3, Seed(1), 3.0).is_err());
    }
}
