//! The operator `A_t f`, martingale-problem statistics and the weak
//! generator identity.
//!
//! ```text
//! A_t f(ω) = β·∇f(x) + ½ Tr(σσᵀ ∇²f(x)) + Σ_j m_j (f(x + w_j) − f(x) − ∇f(x)·w_j),   x = ω(t)
//! ```

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::events::{probe_non_anticipative, Event, EventError, PathEvent};
use crate::path::{CadlagPath, InitialCondition, PathError, PathView, TimeGrid};
use crate::rng::Seed;
use crate::scalar::{dot, Real};
use crate::sde::{Engine, SimulationError};
use crate::stats::{bonferroni_z, z_score, Estimate, RunningStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error("`{label}` exceeded its declared bound {bound} (value {value})")]
    Unbounded { label: String, value: f64, bound: f64 },
    #[error("clock must be finite and non-decreasing on the grid")]
    BadClock,
    #[error("need t <= u, got t = {t}, u = {u}")]
    Order { t: f64, u: f64 },
    #[error("time {t} precedes the start time {s}")]
    BeforeStart { t: f64, s: f64 },
    #[error("no test functions")]
    EmptyFamily,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// A `C²_b` function with exact derivatives. Hessians are row-major `m × m`.
pub trait TestFunction<T: Real>: Send + Sync {
    fn value(&self, x: &[T]) -> T;
    fn gradient(&self, x: &[T], out: &mut [T]);
    fn hessian(&self, x: &[T], out: &mut [T]);
    /// Sup-norm bound of `f`.
    fn bound(&self) -> T;
    fn label(&self) -> String;

    /// Value, gradient and Hessian in one call.
    fn jet(&self, x: &[T], grad: &mut [T], hess: &mut [T]) -> T {
        self.gradient(x, grad);
        self.hessian(x, hess);
        self.value(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Wave {
    Cos,
    Sin,
}

/// `cos(θ·x)` or `sin(θ·x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trig<T> {
    pub theta: Vec<T>,
    pub wave: Wave,
}

impl<T: Real> TestFunction<T> for Trig<T> {
    fn value(&self, x: &[T]) -> T {
        let a = dot(&self.theta, x);
        match self.wave {
            Wave::Cos => a.cos(),
            Wave::Sin => a.sin(),
        }
    }

    fn gradient(&self, x: &[T], out: &mut [T]) {
        let a = dot(&self.theta, x);
        let d = match self.wave {
            Wave::Cos => -a.sin(),
            Wave::Sin => a.cos(),
        };
        for (o, &th) in out.iter_mut().zip(&self.theta) {
            *o = d * th;
        }
    }

    fn hessian(&self, x: &[T], out: &mut [T]) {
        let v = -self.value(x);
        let m = self.theta.len();
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = v * self.theta[i] * self.theta[j];
            }
        }
    }

    fn bound(&self) -> T {
        T::one()
    }

    fn label(&self) -> String {
        let th: Vec<String> = self.theta.iter().map(|t| format!("{}", t.as_f64())).collect();
        let name = match self.wave {
            Wave::Cos => "cos",
            Wave::Sin => "sin",
        };
        format!("{name}({})", th.join(","))
    }

    fn jet(&self, x: &[T], grad: &mut [T], hess: &mut [T]) -> T {
        let (s, c) = dot(&self.theta, x).sin_cos();
        let (f, d) = match self.wave {
            Wave::Cos => (c, -s),
            Wave::Sin => (s, c),
        };
        let m = self.theta.len();
        for i in 0..m {
            grad[i] = d * self.theta[i];
            for j in 0..m {
                hess[i * m + j] = -f * self.theta[i] * self.theta[j];
            }
        }
        f
    }
}

/// `cos(θ·x)` and `sin(θ·x)` for every `θ` in the set, in that order.
pub fn trig_family<T: Real>(thetas: &[Vec<T>]) -> Vec<Arc<dyn TestFunction<T>>> {
    let mut out: Vec<Arc<dyn TestFunction<T>>> = Vec::with_capacity(2 * thetas.len());
    for th in thetas {
        out.push(Arc::new(Trig { theta: th.clone(), wave: Wave::Cos }));
        out.push(Arc::new(Trig { theta: th.clone(), wave: Wave::Sin }));
    }
    out
}

/// `Σ c_i f_i`.
#[derive(Clone)]
pub struct LinearCombination<T: Real> {
    pub terms: Vec<(T, Arc<dyn TestFunction<T>>)>,
}

impl<T: Real> TestFunction<T> for LinearCombination<T> {
    fn value(&self, x: &[T]) -> T {
        self.terms.iter().map(|(c, f)| *c * f.value(x)).sum()
    }

    fn gradient(&self, x: &[T], out: &mut [T]) {
        let mut tmp = vec![T::zero(); out.len()];
        out.iter_mut().for_each(|o| *o = T::zero());
        for (c, f) in &self.terms {
            f.gradient(x, &mut tmp);
            for (o, &v) in out.iter_mut().zip(&tmp) {
                *o = *o + *c * v;
            }
        }
    }

    fn hessian(&self, x: &[T], out: &mut [T]) {
        let mut tmp = vec![T::zero(); out.len()];
        out.iter_mut().for_each(|o| *o = T::zero());
        for (c, f) in &self.terms {
            f.hessian(x, &mut tmp);
            for (o, &v) in out.iter_mut().zip(&tmp) {
                *o = *o + *c * v;
            }
        }
    }

    fn bound(&self) -> T {
        self.terms.iter().map(|(c, f)| c.abs() * f.bound()).sum()
    }

    fn label(&self) -> String {
        let parts: Vec<String> = self.terms.iter().map(|(c, f)| format!("{}*{}", c.as_f64(), f.label())).collect();
        parts.join("+")
    }
}

/// Largest relative errors of exact derivatives against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub max_rel_gradient: f64,
    pub max_rel_hessian: f64,
    pub pass: bool,
}

/// Cross-checks `∇f`, `∇²f` by central differences at random points of
/// `[−2, 2]^m`. Relative errors use `max(1, |exact|)` as the denominator.
pub fn check_derivatives(f: &dyn TestFunction<f64>, dim: usize, probes: usize, seed: Seed) -> DerivativeCheck {
    let h = 1e-4;
    let mut rng = seed.stream(0);
    let (mut g, mut hs) = (vec![0.0; dim], vec![0.0; dim * dim]);
    let (mut gp, mut gm) = (vec![0.0; dim], vec![0.0; dim]);
    let (mut eg, mut eh): (f64, f64) = (0.0, 0.0);
    for _ in 0..probes {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        f.gradient(&x, &mut g);
        f.hessian(&x, &mut hs);
        for i in 0..dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
            eg = eg.max((fd - g[i]).abs() / g[i].abs().max(1.0));
            f.gradient(&xp, &mut gp);
            f.gradient(&xm, &mut gm);
            for j in 0..dim {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                let ex = hs[j * dim + i];
                eh = eh.max((fd - ex).abs() / ex.abs().max(1.0));
            }
        }
    }
    DerivativeCheck { max_rel_gradient: eg, max_rel_hessian: eh, pass: eg <= 1e-5 && eh <= 1e-5 }
}

/// Hook for negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum GeneratorVariant {
    #[default]
    Exact,
    /// Omits the `−∇f·w` compensation inside the jump integral.
    DropJumpCompensation,
}

/// Coefficients frozen at one `(t, ω)`.
#[derive(Debug, Clone)]
pub struct Snapshot<T> {
    m: usize,
    pub beta: Vec<T>,
    sigma: Vec<T>,
    /// `σσᵀ`, row-major.
    pub a: Vec<T>,
    /// `w(t, ω, y_j)`, atom-major.
    pub w: Vec<T>,
    pub mass: Vec<T>,
    grad: Vec<T>,
    hess: Vec<T>,
    shifted: Vec<T>,
}

impl<T: Real> Snapshot<T> {
    pub fn new(engine: &Engine<T>) -> Self {
        let m = engine.dim();
        let atoms = engine.jumps().len();
        Self {
            m,
            beta: vec![T::zero(); m],
            sigma: vec![T::zero(); m * m],
            a: vec![T::zero(); m * m],
            w: vec![T::zero(); atoms * m],
            mass: engine.jumps().atoms().iter().map(|a| a.mass).collect(),
            grad: vec![T::zero(); m],
            hess: vec![T::zero(); m * m],
            shifted: vec![T::zero(); m],
        }
    }

    pub fn load(&mut self, engine: &Engine<T>, view: &PathView<'_, T>) {
        let m = self.m;
        let c = engine.coefficients();
        c.drift(view, &mut self.beta);
        c.diffusion(view, &mut self.sigma);
        for i in 0..m {
            for j in 0..m {
                let mut s = T::zero();
                for l in 0..m {
                    s = s + self.sigma[i * m + l] * self.sigma[j * m + l];
                }
                self.a[i * m + j] = s;
            }
        }
        for (j, atom) in engine.jumps().atoms().iter().enumerate() {
            c.jump(view, &atom.y, &mut self.w[j * m..(j + 1) * m]);
        }
    }

    /// `A f` at the point `x` with the loaded coefficients.
    pub fn generator(&mut self, f: &dyn TestFunction<T>, x: &[T], variant: GeneratorVariant) -> T {
        let m = self.m;
        let fx = f.jet(x, &mut self.grad, &mut self.hess);
        let mut out = dot(&self.beta, &self.grad);
        let mut tr = T::zero();
        for (a, h) in self.a.iter().zip(&self.hess) {
            tr = tr + *a * *h;
        }
        out = out + T::half() * tr;
        for (j, &mass) in self.mass.iter().enumerate() {
            let w = &self.w[j * m..(j + 1) * m];
            for ((s, &xi), &wi) in self.shifted.iter_mut().zip(x).zip(w) {
                *s = xi + wi;
            }
            let mut term = f.value(&self.shifted) - fx;
            if variant == GeneratorVariant::Exact {
                term = term - dot(&self.grad, w);
            }
            out = out + mass * term;
        }
        out
    }

    /// `∇fᵀ a ∇g + Σ_j m_j (f(x+w_j) − f(x))(g(x+w_j) − g(x))`.
    pub fn bracket_density(&mut self, f: &dyn TestFunction<T>, g: &dyn TestFunction<T>, x: &[T]) -> T {
        let m = self.m;
        let mut gf = vec![T::zero(); m];
        f.gradient(x, &mut gf);
        g.gradient(x, &mut self.grad);
        let mut out = T::zero();
        for i in 0..m {
            for j in 0..m {
                out = out + gf[i] * self.a[i * m + j] * self.grad[j];
            }
        }
        let (fx, gx) = (f.value(x), g.value(x));
        for (j, &mass) in self.mass.iter().enumerate() {
            let w = &self.w[j * m..(j + 1) * m];
            for ((s, &xi), &wi) in self.shifted.iter_mut().zip(x).zip(w) {
                *s = xi + wi;
            }
            out = out + mass * (f.value(&self.shifted) - fx) * (g.value(&self.shifted) - gx);
        }
        out
    }
}

/// `A_t f(ω)` for the engine's coefficients at grid time `t`.
pub fn apply_generator<T: Real>(
    engine: &Engine<T>,
    f: &dyn TestFunction<T>,
    t: T,
    path: &CadlagPath<T>,
    variant: GeneratorVariant,
) -> Result<T, GeneratorError> {
    let k = path.grid().node_index(t)?;
    if path.dim() != engine.dim() {
        return Err(GeneratorError::Dimension { expected: engine.dim(), got: path.dim() });
    }
    let view = path.view(k);
    let mut snap = Snapshot::new(engine);
    snap.load(engine, &view);
    let value = snap.generator(f, view.current(), variant);
    let fx = f.value(view.current());
    if fx.abs() > f.bound() || !value.is_finite() {
        return Err(GeneratorError::Unbounded { label: f.label(), value: fx.as_f64(), bound: f.bound().as_f64() });
    }
    Ok(value)
}

/// Martingale-problem design: functions, time pairs and per-`t` event banks.
#[derive(Clone)]
pub struct MartingaleDesign<T: Real> {
    pub functions: Vec<Arc<dyn TestFunction<T>>>,
    /// `(t, u)` with `t <= u`.
    pub pairs: Vec<(T, T)>,
    /// Conditioning events for each distinct `t`.
    pub banks: Vec<(T, Vec<Event<T>>)>,
    /// Single-test threshold before the Bonferroni adjustment.
    pub z_crit: f64,
    pub variant: GeneratorVariant,
}

impl<T: Real> MartingaleDesign<T> {
    /// All pairs `t < u` from `times`, with [`crate::events::event_bank`]
    /// banks centred at `x0`.
    pub fn with_default_banks(
        grid: &TimeGrid<T>,
        functions: Vec<Arc<dyn TestFunction<T>>>,
        times: &[T],
        x0: &[T],
        bank_size: usize,
        spacing: T,
    ) -> Result<Self, GeneratorError> {
        let mut pairs = vec![];
        let mut banks = vec![];
        for (i, &t) in times.iter().enumerate() {
            let later: Vec<T> = times[i + 1..].iter().copied().filter(|&u| u > t).collect();
            if later.is_empty() {
                continue;
            }
            banks.push((t, crate::events::event_bank(grid, t, x0, bank_size, spacing)?));
            pairs.extend(later.into_iter().map(|u| (t, u)));
        }
        Ok(Self { functions, pairs, banks, z_crit: 3.0, variant: GeneratorVariant::Exact })
    }

    pub fn cells(&self) -> usize {
        self.functions.len() * self.pairs.iter().map(|(t, _)| self.bank(*t).map_or(0, |b| b.len())).sum::<usize>()
    }

    fn bank(&self, t: T) -> Option<&[Event<T>]> {
        self.banks.iter().find(|(bt, _)| *bt == t).map(|(_, b)| b.as_slice())
    }
}

/// One `(f, t, u, G)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpCell {
    pub test_id: String,
    pub f: String,
    pub t: f64,
    pub u: f64,
    pub event: String,
    pub estimate: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleTestReport {
    pub cells: Vec<MpCell>,
    pub n_paths: usize,
    pub z_base: f64,
    /// Bonferroni-adjusted threshold actually applied.
    pub z_crit: f64,
    pub pass_fraction: f64,
    pub pass: bool,
    /// Integrability is only checked on the simulated paths.
    pub integrability: &'static str,
}

/// Resolved layout of a design on a grid.
struct Plan<T: Real> {
    start: usize,
    /// Sorted distinct query nodes.
    nodes: Vec<usize>,
    /// `(t slot, u slot, event offset, events)` per pair.
    pairs: Vec<(usize, usize, usize, usize)>,
    /// Events flattened in pair order of their `t`.
    events: Vec<Event<T>>,
    bank_offset: Vec<(usize, usize, usize)>,
}

impl<T: Real> Plan<T> {
    fn new(design: &MartingaleDesign<T>, init: &InitialCondition<T>) -> Result<Self, GeneratorError> {
        let grid = init.grid();
        let mut nodes = vec![];
        for &(t, u) in &design.pairs {
            if t > u {
                return Err(GeneratorError::Order { t: t.as_f64(), u: u.as_f64() });
            }
            if t < init.s() {
                return Err(GeneratorError::BeforeStart { t: t.as_f64(), s: init.s().as_f64() });
            }
            nodes.push(grid.node_index(t)?);
            nodes.push(grid.node_index(u)?);
        }
        nodes.sort_unstable();
        nodes.dedup();
        let slot = |k: usize| nodes.binary_search(&k).unwrap();
        let mut events = vec![];
        let mut bank_offset = vec![];
        for (t, bank) in &design.banks {
            let k = grid.node_index(*t)?;
            for e in bank {
                if e.time() > *t {
                    return Err(EventError::Anticipating { label: e.label(), t: t.as_f64() }.into());
                }
            }
            bank_offset.push((k, events.len(), bank.len()));
            events.extend(bank.iter().cloned());
        }
        let mut pairs = vec![];
        for &(t, u) in &design.pairs {
            let kt = grid.node_index(t)?;
            let (_, off, len) = bank_offset.iter().copied().find(|b| b.0 == kt).unwrap_or((kt, 0, 0));
            pairs.push((slot(kt), slot(grid.node_index(u)?), off, len));
        }
        Ok(Self { start: init.s_index(), nodes, pairs, events, bank_offset })
    }
}

/// Per-path kernel: `M` at the query nodes for every function.
struct Kernel<T: Real> {
    snap: Snapshot<T>,
    /// function-major, node-slot-minor.
    m_values: Vec<T>,
    integral: Vec<T>,
    hits: Vec<bool>,
}

impl<T: Real> Kernel<T> {
    fn new(engine: &Engine<T>, n_functions: usize, slots: usize, events: usize) -> Self {
        Self {
            snap: Snapshot::new(engine),
            m_values: vec![T::zero(); n_functions * slots],
            integral: vec![T::zero(); n_functions],
            hits: vec![false; events],
        }
    }

    fn run(
        &mut self,
        engine: &Engine<T>,
        design: &MartingaleDesign<T>,
        plan: &Plan<T>,
        path: &CadlagPath<T>,
    ) -> Result<(), GeneratorError> {
        let grid = path.grid();
        let slots = plan.nodes.len();
        let last = *plan.nodes.last().unwrap_or(&plan.start);
        self.integral.iter_mut().for_each(|v| *v = T::zero());
        let mut slot = 0;
        for k in plan.start..=last {
            let view = path.view(k);
            let x = view.current();
            if slot < slots && plan.nodes[slot] == k {
                for (fi, f) in design.functions.iter().enumerate() {
                    let fx = f.value(x);
                    if fx.abs() > f.bound() {
                        return Err(GeneratorError::Unbounded { label: f.label(), value: fx.as_f64(), bound: f.bound().as_f64() });
                    }
                    self.m_values[fi * slots + slot] = fx - self.integral[fi];
                }
                slot += 1;
            }
            if k == last {
                break;
            }
            self.snap.load(engine, &view);
            let dt = grid.step(k);
            for (fi, f) in design.functions.iter().enumerate() {
                let a = self.snap.generator(f.as_ref(), x, design.variant);
                self.integral[fi] = self.integral[fi] + a * dt;
            }
        }
        for &(_, off, len) in &plan.bank_offset {
            for e in off..off + len {
                self.hits[e] = plan.events[e].contains(path);
            }
        }
        Ok(())
    }
}

struct MpAccumulator<T: Real> {
    cells: Vec<RunningStats<T>>,
}

fn accumulate<T: Real>(acc: &mut MpAccumulator<T>, kernel: &Kernel<T>, design: &MartingaleDesign<T>, plan: &Plan<T>) {
    let slots = plan.nodes.len();
    let mut c = 0;
    for fi in 0..design.functions.len() {
        for &(st, su, off, len) in &plan.pairs {
            let inc = kernel.m_values[fi * slots + su] - kernel.m_values[fi * slots + st];
            for e in off..off + len {
                acc.cells[c].push(if kernel.hits[e] { inc } else { T::zero() });
                c += 1;
            }
        }
    }
}

fn finish_report<T: Real>(acc: MpAccumulator<T>, design: &MartingaleDesign<T>, plan: &Plan<T>, n_paths: usize) -> MartingaleTestReport {
    let z_crit = bonferroni_z(design.z_crit, acc.cells.len());
    let mut cells = Vec::with_capacity(acc.cells.len());
    let mut c = 0;
    for (fi, f) in design.functions.iter().enumerate() {
        for (pi, &(t, u)) in design.pairs.iter().enumerate() {
            let (_, _, off, len) = plan.pairs[pi];
            for (ei, e) in plan.events[off..off + len].iter().enumerate() {
                let st = &acc.cells[c];
                let (est, se) = (st.mean().as_f64(), st.stderr().as_f64());
                let z = z_score(est, se);
                cells.push(MpCell {
                    test_id: format!("mp/f{fi}/p{pi}/e{ei}"),
                    f: f.label(),
                    t: t.as_f64(),
                    u: u.as_f64(),
                    event: e.label(),
                    estimate: est,
                    stderr: se,
                    z,
                    pass: z.abs() <= z_crit,
                });
                c += 1;
            }
        }
    }
    let passed = cells.iter().filter(|c| c.pass).count();
    let pass_fraction = if cells.is_empty() { 1.0 } else { passed as f64 / cells.len() as f64 };
    MartingaleTestReport {
        pass: passed == cells.len(),
        cells,
        n_paths,
        z_base: design.z_crit,
        z_crit,
        pass_fraction,
        integrability: "partial: checked on simulated paths only",
    }
}

fn probe_events<T: Real>(engine: &Engine<T>, design: &MartingaleDesign<T>, init: &InitialCondition<T>, seed: Seed) -> Result<(), GeneratorError> {
    let probe_seed = seed.named("event-probe");
    let samples = (0..4).map(|i| engine.simulate_path(init, probe_seed, i)).collect::<Result<Vec<_>, _>>()?;
    for (t, bank) in &design.banks {
        for e in bank {
            probe_non_anticipative(e, *t, &samples, probe_seed)?;
        }
    }
    Ok(())
}

/// Streams `n_paths` fresh paths from `(s, η)` and estimates
/// `E[(M_u − M_t) 1_G]` for every cell, where
/// `M_t = f(X_t) − Σ_{s ≤ t_k < t} A_{t_k} f Δ_k`.
pub fn verify_martingale_problem<T: Real>(
    engine: &Engine<T>,
    init: &InitialCondition<T>,
    design: &MartingaleDesign<T>,
    n_paths: usize,
    seed: Seed,
) -> Result<MartingaleTestReport, GeneratorError> {
    if design.functions.is_empty() {
        return Err(GeneratorError::EmptyFamily);
    }
    let plan = Plan::new(design, init)?;
    probe_events(engine, design, init, seed)?;
    let n_cells = design.cells();
    let acc = engine.fold_paths(
        init,
        n_paths,
        seed,
        || (MpAccumulator { cells: vec![RunningStats::new(); n_cells] }, None::<Kernel<T>>),
        |(acc, kernel), _, path| {
            let kernel = kernel.get_or_insert_with(|| Kernel::new(engine, design.functions.len(), plan.nodes.len(), plan.events.len()));
            kernel.run(engine, design, &plan, path)?;
            accumulate(acc, kernel, design, &plan);
            Ok::<_, GeneratorError>(())
        },
        |a, b| {
            for (x, y) in a.0.cells.iter_mut().zip(&b.0.cells) {
                x.merge(y);
            }
        },
    )?;
    Ok(finish_report(acc.0, design, &plan, n_paths))
}

/// Same statistics over an already simulated ensemble.
pub fn verify_martingale_problem_on<T: Real>(
    engine: &Engine<T>,
    ensemble: &crate::sde::PathEnsemble<T>,
    design: &MartingaleDesign<T>,
) -> Result<MartingaleTestReport, GeneratorError> {
    if design.functions.is_empty() {
        return Err(GeneratorError::EmptyFamily);
    }
    let plan = Plan::new(design, ensemble.init())?;
    for (t, bank) in &design.banks {
        let probe: Vec<_> = ensemble.paths().iter().take(4).cloned().collect();
        for e in bank {
            probe_non_anticipative(e, *t, &probe, ensemble.seed().named("event-probe"))?;
        }
    }
    let n_cells = design.cells();
    let paths = ensemble.paths();
    let acc = crate::parallel::fold_indexed(
        paths.len(),
        || (MpAccumulator { cells: vec![RunningStats::new(); n_cells] }, None::<Kernel<T>>),
        |(acc, kernel), i| {
            let kernel = kernel.get_or_insert_with(|| Kernel::new(engine, design.functions.len(), plan.nodes.len(), plan.events.len()));
            kernel.run(engine, design, &plan, &paths[i])?;
            accumulate(acc, kernel, design, &plan);
            Ok::<_, GeneratorError>(())
        },
        |a, b| {
            for (x, y) in a.0.cells.iter_mut().zip(&b.0.cells) {
                x.merge(y);
            }
        },
    )?;
    Ok(finish_report(acc.0, design, &plan, paths.len()))
}

/// Reference clock `V` sampled at grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Clock<T> {
    values: Vec<T>,
}

impl<T: Real> Clock<T> {
    /// `V_t = t`.
    pub fn identity(grid: &TimeGrid<T>) -> Self {
        Self { values: grid.times().to_vec() }
    }

    pub fn from_fn(grid: &TimeGrid<T>, v: impl Fn(T) -> T) -> Result<Self, GeneratorError> {
        Self::from_values(grid.times().iter().map(|&t| v(t)).collect())
    }

    pub fn from_values(values: Vec<T>) -> Result<Self, GeneratorError> {
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] < w[0]) {
            return Err(GeneratorError::BadClock);
        }
        Ok(Self { values })
    }

    pub fn value(&self, k: usize) -> T {
        self.values[k]
    }

    /// `V_{t_{k+1}} − V_{t_k}`.
    pub fn increment(&self, k: usize) -> T {
        self.values[k + 1] - self.values[k]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// An element `Φ` of the domain together with `A(Φ)`.
pub trait ProcessFunctional<T: Real>: Send + Sync {
    fn phi(&self, path: &PathView<'_, T>) -> T;
    fn a_phi(&self, path: &PathView<'_, T>) -> T;
    /// Sup-norm bound of `Φ`.
    fn bound(&self) -> T;
    fn label(&self) -> String;

    /// `AΦ` at nodes `from..to`, appended to `out`.
    fn a_phi_along(&self, path: &CadlagPath<T>, from: usize, to: usize, out: &mut Vec<T>) {
        out.extend((from..to).map(|k| self.a_phi(&path.view(k))));
    }
}

/// `Φ_t = t`, `AΦ = 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimeFunctional;

impl<T: Real> ProcessFunctional<T> for TimeFunctional {
    fn phi(&self, path: &PathView<'_, T>) -> T {
        path.time()
    }
    fn a_phi(&self, _: &PathView<'_, T>) -> T {
        T::one()
    }
    fn bound(&self) -> T {
        T::infinity()
    }
    fn label(&self) -> String {
        "time".into()
    }
}

/// `Φ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFunctional;

impl<T: Real> ProcessFunctional<T> for ZeroFunctional {
    fn phi(&self, _: &PathView<'_, T>) -> T {
        T::zero()
    }
    fn a_phi(&self, _: &PathView<'_, T>) -> T {
        T::zero()
    }
    fn bound(&self) -> T {
        T::zero()
    }
    fn label(&self) -> String {
        "zero".into()
    }
}

/// `Φ_t(ω) = f(ω(t))` with `AΦ = A_t f` for the engine's coefficients.
#[derive(Clone)]
pub struct CylinderFunctional<T: Real> {
    pub f: Arc<dyn TestFunction<T>>,
    pub engine: Engine<T>,
    pub variant: GeneratorVariant,
}

impl<T: Real> CylinderFunctional<T> {
    pub fn new(f: Arc<dyn TestFunction<T>>, engine: Engine<T>) -> Self {
        Self { f, engine, variant: GeneratorVariant::Exact }
    }
}

impl<T: Real> ProcessFunctional<T> for CylinderFunctional<T> {
    fn phi(&self, path: &PathView<'_, T>) -> T {
        self.f.value(path.current())
    }
    fn a_phi(&self, path: &PathView<'_, T>) -> T {
        let mut snap = Snapshot::new(&self.engine);
        snap.load(&self.engine, path);
        snap.generator(self.f.as_ref(), path.current(), self.variant)
    }
    fn bound(&self) -> T {
        self.f.bound()
    }
    fn label(&self) -> String {
        self.f.label()
    }
    fn a_phi_along(&self, path: &CadlagPath<T>, from: usize, to: usize, out: &mut Vec<T>) {
        let mut snap = Snapshot::new(&self.engine);
        for k in from..to {
            let view = path.view(k);
            snap.load(&self.engine, &view);
            out.push(snap.generator(self.f.as_ref(), view.current(), self.variant));
        }
    }
}

fn checked_phi<T: Real>(phi: &dyn ProcessFunctional<T>, view: &PathView<'_, T>) -> Result<T, GeneratorError> {
    let v = phi.phi(view);
    if !(v.abs() <= phi.bound()) {
        return Err(GeneratorError::Unbounded { label: phi.label(), value: v.as_f64(), bound: phi.bound().as_f64() });
    }
    Ok(v)
}

/// `M[Φ]_{t,u}(ω) = Φ_u(ω) − Φ_t(ω) − Σ_{t ≤ t_k < u} AΦ_{t_k}(ω) (V_{k+1} − V_k)`.
pub fn maf_from_generator<T: Real>(
    phi: &dyn ProcessFunctional<T>,
    clock: &Clock<T>,
    t: T,
    u: T,
    path: &CadlagPath<T>,
) -> Result<T, GeneratorError> {
    if t > u {
        return Err(GeneratorError::Order { t: t.as_f64(), u: u.as_f64() });
    }
    let grid = path.grid();
    let (kt, ku) = (grid.node_index(t)?, grid.node_index(u)?);
    Ok(maf_nodes(phi, clock, kt, ku, path))
}

pub(crate) fn maf_nodes<T: Real>(phi: &dyn ProcessFunctional<T>, clock: &Clock<T>, kt: usize, ku: usize, path: &CadlagPath<T>) -> T {
    if kt == ku {
        return T::zero();
    }
    let mut a = Vec::with_capacity(ku - kt);
    phi.a_phi_along(path, kt, ku, &mut a);
    let mut integral = T::zero();
    for (k, v) in (kt..ku).zip(a) {
        integral = integral + v * clock.increment(k);
    }
    phi.phi(&path.view(ku)) - phi.phi(&path.view(kt)) - integral
}

/// Both sides of the weak-generator identity at one `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakGeneratorReport {
    pub phi: String,
    pub t: f64,
    /// `Ê^{s,η}[Φ_t]`.
    pub lhs: Estimate,
    /// `Φ_s(η) + Σ Ê^{s,η}[AΦ_{t_k}] ΔV_k`.
    pub rhs: Estimate,
    pub discrepancy: f64,
    /// `sqrt(se_lhs² + se_rhs²)`; the two sides use independent paths.
    pub stderr: f64,
    pub z: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Monte Carlo check of `P_s[Φ_t](η) = Φ_s(η) + ∫_s^t P_s[AΦ_r](η) dV_r`.
///
/// Passes if `|discrepancy| <= z_crit · stderr + tolerance`; `tolerance`
/// absorbs rounding in deterministic cases.
#[allow(clippy::too_many_arguments)]
pub fn verify_weak_generator<T: Real>(
    engine: &Engine<T>,
    phi: &dyn ProcessFunctional<T>,
    clock: &Clock<T>,
    init: &InitialCondition<T>,
    t: T,
    n_paths: usize,
    seed: Seed,
    z_crit: f64,
    tolerance: f64,
) -> Result<WeakGeneratorReport, GeneratorError> {
    if t < init.s() {
        return Err(GeneratorError::BeforeStart { t: t.as_f64(), s: init.s().as_f64() });
    }
    if clock.len() != init.grid().len() {
        return Err(GeneratorError::BadClock);
    }
    let kt = init.grid().node_index(t)?;
    let ks = init.s_index();
    let merge = |a: &mut RunningStats<T>, b: RunningStats<T>| a.merge(&b);
    let lhs = engine.fold_paths(
        init,
        n_paths,
        seed.named("lhs"),
        RunningStats::new,
        |acc, _, path| {
            acc.push(checked_phi(phi, &path.view(kt))?);
            Ok::<_, GeneratorError>(())
        },
        merge,
    )?;
    let rhs = engine.fold_paths(
        init,
        n_paths,
        seed.named("rhs"),
        || (RunningStats::new(), Vec::new()),
        |(acc, a), _, path| {
            a.clear();
            phi.a_phi_along(path, ks, kt, a);
            let mut integral = T::zero();
            for (k, &v) in (ks..kt).zip(a.iter()) {
                integral = integral + v * clock.increment(k);
            }
            acc.push(integral);
            Ok::<_, GeneratorError>(())
        },
        |a, b| a.0.merge(&b.0),
    )?
    .0;
    let phi_s = checked_phi(phi, &init.eta().view(ks))?.as_f64();
    let lhs = lhs.estimate();
    let mut rhs = rhs.estimate();
    rhs.value += phi_s;
    let discrepancy = lhs.value - rhs.value;
    let stderr = lhs.stderr.hypot(rhs.stderr);
    let z = z_score(discrepancy, stderr);
    let pass = discrepancy.abs() <= z_crit * stderr + tolerance;
    Ok(WeakGeneratorReport { phi: phi.label(), t: t.as_f64(), lhs, rhs, discrepancy, stderr, z, tolerance, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{Drift, JumpMeasure, PresetCoefficients};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn engine(beta: f64, sigma: f64, jumps: JumpMeasure<f64>, n: usize) -> Engine<f64> {
        let g = Arc::new(TimeGrid::uniform(1.0, 1.0 / n as f64).unwrap());
        let c = PresetCoefficients::scalar(beta, sigma, &jumps).unwrap();
        Engine::with_preset(c, jumps, g).unwrap()
    }

    fn cos1() -> Trig<f64> {
        Trig { theta: vec![1.0], wave: Wave::Cos }
    }

    #[test]
    fn generator_examples() {
        let e = engine(0.0, 1.0, JumpMeasure::empty(), 8);
        let p = CadlagPath::constant(e.grid().clone(), &[0.0]);
        for th in [0.5, 1.0, 3.0] {
            let f = Trig { theta: vec![th], wave: Wave::Cos };
            let v = apply_generator(&e, &f, 0.5, &p, GeneratorVariant::Exact).unwrap();
            assert_relative_eq!(v, -0.5 * th * th, epsilon = 1e-15);
        }
        let zero = engine(0.0, 0.0, JumpMeasure::empty(), 8);
        let q = CadlagPath::constant(zero.grid().clone(), &[0.7]);
        assert_eq!(apply_generator(&zero, &cos1(), 0.25, &q, GeneratorVariant::Exact).unwrap(), 0.0);
        let lambda = 0.8;
        let jumps = JumpMeasure::single(vec![1.0], lambda).unwrap();
        let j = engine(0.0, 0.0, jumps, 8);
        let sin = Trig { theta: vec![1.0], wave: Wave::Sin };
        let v = apply_generator(&j, &sin, 0.0, &p, GeneratorVariant::Exact).unwrap();
        assert_relative_eq!(v, lambda * (1f64.sin() - 1.0), epsilon = 1e-15);
        let dropped = apply_generator(&j, &sin, 0.0, &p, GeneratorVariant::DropJumpCompensation).unwrap();
        assert_relative_eq!(dropped - v, lambda, epsilon = 1e-15);
        assert!(apply_generator(&j, &sin, 0.3, &p, GeneratorVariant::Exact).is_err());
    }

    #[test]
    fn trig_family_shape() {
        let fam = trig_family(&[vec![0.0], vec![1.0], vec![-2.0]]);
        assert_eq!(fam.len(), 6);
        let e = engine(0.3, 0.7, JumpMeasure::single(vec![1.0], 0.5).unwrap(), 8);
        let p = CadlagPath::constant(e.grid().clone(), &[0.4]);
        assert_eq!(apply_generator(&e, fam[0].as_ref(), 0.5, &p, GeneratorVariant::Exact).unwrap(), 0.0);
        let mut g = [0.0];
        fam[2].gradient(&[0.4], &mut g);
        assert_eq!(g[0], -(0.4f64).sin());
        for f in &fam {
            assert!(check_derivatives(f.as_ref(), 1, 50, Seed(1)).pass);
        }
        let f2 = Trig { theta: vec![1.0, -0.5, 2.0], wave: Wave::Sin };
        let c = check_derivatives(&f2, 3, 50, Seed(2));
        assert!(c.pass, "{c:?}");
    }

    #[test]
    fn second_order_part_matches_finite_differences() {
        let g = Arc::new(TimeGrid::uniform(1.0, 0.125).unwrap());
        let sigma = vec![0.5, 0.1, -0.2, 0.9];
        let c = PresetCoefficients::constant(vec![0.3, -0.4], sigma, &JumpMeasure::empty()).unwrap();
        let e = Engine::with_preset(c, JumpMeasure::empty(), g.clone()).unwrap();
        let f = Trig { theta: vec![1.5, -0.5], wave: Wave::Cos };
        let x = [0.3, -0.8];
        let p = CadlagPath::constant(g, &x);
        let exact = apply_generator(&e, &f, 0.5, &p, GeneratorVariant::Exact).unwrap();
        let h = 1e-4;
        let fv = |a: f64, b: f64| f.value(&[x[0] + a, x[1] + b]);
        let gx = (fv(h, 0.0) - fv(-h, 0.0)) / (2.0 * h);
        let gy = (fv(0.0, h) - fv(0.0, -h)) / (2.0 * h);
        let hxx = (fv(h, 0.0) - 2.0 * fv(0.0, 0.0) + fv(-h, 0.0)) / (h * h);
        let hyy = (fv(0.0, h) - 2.0 * fv(0.0, 0.0) + fv(0.0, -h)) / (h * h);
        let hxy = (fv(h, h) - fv(h, -h) - fv(-h, h) + fv(-h, -h)) / (4.0 * h * h);
        let a = [0.5 * 0.5 + 0.1 * 0.1, 0.5 * -0.2 + 0.1 * 0.9, 0.0, 0.2 * 0.2 + 0.9 * 0.9];
        let fd = 0.3 * gx - 0.4 * gy + 0.5 * (a[0] * hxx + 2.0 * a[1] * hxy + a[3] * hyy);
        assert!((fd - exact).abs() / exact.abs().max(1.0) < 1e-5, "{fd} vs {exact}");
    }

    proptest! {
        #[test]
        fn generator_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in -2.0f64..2.0, th in -2.0f64..2.0) {
            let jumps = JumpMeasure::single(vec![0.7], 1.3).unwrap();
            let c = PresetCoefficients::new(1, Drift::RunningMax { kappa: 0.5 }, Some(2.0), vec![0.4], 1.0, &jumps).unwrap();
            let g = Arc::new(TimeGrid::uniform(1.0, 0.125).unwrap());
            let e = Engine::with_preset(c, jumps, g.clone()).unwrap();
            let p = CadlagPath::from_fn(g, 1, |t| vec![x + t]).unwrap();
            let f: Arc<dyn TestFunction<f64>> = Arc::new(Trig { theta: vec![th], wave: Wave::Cos });
            let h: Arc<dyn TestFunction<f64>> = Arc::new(Trig { theta: vec![1.0], wave: Wave::Sin });
            let comb = LinearCombination { terms: vec![(a, f.clone()), (b, h.clone())] };
            let lhs = apply_generator(&e, &comb, 0.5, &p, GeneratorVariant::Exact).unwrap();
            let rhs = a * apply_generator(&e, f.as_ref(), 0.5, &p, GeneratorVariant::Exact).unwrap()
                + b * apply_generator(&e, h.as_ref(), 0.5, &p, GeneratorVariant::Exact).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn maf_is_additive(t in 0usize..=16, du in 0usize..=16, dv in 0usize..=16, seed in 0u64..1000) {
            let jumps = JumpMeasure::single(vec![1.0], 0.5).unwrap();
            let e = engine(0.1, 0.2, jumps, 16);
            let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
            let p = e.simulate_path(&init, Seed(seed), 0).unwrap();
            let (u, v) = ((t + du).min(16), (t + du + dv).min(16));
            let at = |k: usize| k as f64 / 16.0;
            let phi = CylinderFunctional::new(Arc::new(cos1()), e.clone());
            let clock = Clock::identity(e.grid());
            let tu = maf_from_generator(&phi, &clock, at(t), at(u), &p).unwrap();
            let uv = maf_from_generator(&phi, &clock, at(u), at(v), &p).unwrap();
            let tv = maf_from_generator(&phi, &clock, at(t), at(v), &p).unwrap();
            prop_assert!((tu + uv - tv).abs() <= 1e-12);
        }
    }

    #[test]
    fn maf_examples_and_double_entry() {
        let jumps = JumpMeasure::single(vec![1.0], 0.5).unwrap();
        let e = engine(0.1, 0.2, jumps, 64);
        let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
        let p = e.simulate_path(&init, Seed(11), 3).unwrap();
        let clock = Clock::identity(e.grid());
        let phi = CylinderFunctional::new(Arc::new(cos1()), e.clone());
        assert_eq!(maf_from_generator(&phi, &clock, 0.25, 0.25, &p).unwrap(), 0.0);
        assert!(maf_from_generator(&phi, &clock, 0.5, 0.25, &p).is_err());
        for (t, u) in [(0.0, 1.0), (0.25, 0.75)] {
            assert!(maf_from_generator(&TimeFunctional, &clock, t, u, &p).unwrap().abs() < 1e-15);
        }
        // independent recomputation with hand-written A cos
        let (t, u) = (0.125, 0.875);
        let (kt, ku) = (8, 56);
        let mut integral = 0.0;
        for k in kt..ku {
            let x = p.node(k)[0];
            let a = 0.1 * -x.sin() + 0.5 * 0.04 * -x.cos() + 0.5 * ((x + 1.0).cos() - x.cos() + x.sin());
            integral += a / 64.0;
        }
        let oracle = p.node(ku)[0].cos() - p.node(kt)[0].cos() - integral;
        let got = maf_from_generator(&phi, &clock, t, u, &p).unwrap();
        assert!((got - oracle).abs() < 1e-13, "{got} vs {oracle}");
    }

    #[test]
    fn martingale_cells_zero_when_t_equals_u() {
        let e = engine(0.1, 0.3, JumpMeasure::single(vec![1.0], 0.5).unwrap(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
        let mut design =
            MartingaleDesign::with_default_banks(e.grid(), trig_family(&[vec![1.0]]), &[0.25, 0.5], &[0.0], 4, 0.25).unwrap();
        design.pairs.push((0.25, 0.25));
        let r = verify_martingale_problem(&e, &init, &design, 300, Seed(1)).unwrap();
        assert_eq!(r.cells.len(), 2 * 2 * 4);
        for c in r.cells.iter().filter(|c| c.t == c.u) {
            assert_eq!(c.estimate, 0.0);
            assert_eq!(c.stderr, 0.0);
            assert!(c.pass);
        }
    }

    #[test]
    fn streaming_and_materialised_agree() {
        let e = engine(0.1, 0.3, JumpMeasure::single(vec![1.0], 0.5).unwrap(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
        let design =
            MartingaleDesign::with_default_banks(e.grid(), trig_family(&[vec![1.0], vec![2.0]]), &[0.25, 0.5, 1.0], &[0.0], 8, 0.25)
                .unwrap();
        let a = verify_martingale_problem(&e, &init, &design, 700, Seed(2)).unwrap();
        let ens = e.simulate(&init, 700, Seed(2)).unwrap();
        let b = verify_martingale_problem_on(&e, &ens, &design).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn anticipating_events_rejected() {
        let e = engine(0.1, 0.3, JumpMeasure::empty(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.0, &[0.0]).unwrap();
        let mut design =
            MartingaleDesign::with_default_banks(e.grid(), trig_family(&[vec![1.0]]), &[0.25, 0.5], &[0.0], 2, 0.25).unwrap();
        design.banks[0].1.push(Event::ball(0.75, vec![0.0], 1.0));
        let err = verify_martingale_problem(&e, &init, &design, 10, Seed(1)).unwrap_err();
        assert!(matches!(err, GeneratorError::Event(EventError::Anticipating { .. })));
    }

    #[test]
    fn weak_generator_deterministic_cases() {
        let e = engine(0.1, 0.3, JumpMeasure::empty(), 16);
        let init = InitialCondition::constant(e.grid().clone(), 0.25, &[0.0]).unwrap();
        let clock = Clock::identity(e.grid());
        let r = verify_weak_generator(&e, &TimeFunctional, &clock, &init, 1.0, 50, Seed(1), 3.0, 1e-12).unwrap();
        assert!(r.pass && r.stderr == 0.0 && r.discrepancy.abs() < 1e-15, "{r:?}");
        let r = verify_weak_generator(&e, &ZeroFunctional, &clock, &init, 1.0, 50, Seed(1), 3.0, 0.0).unwrap();
        assert_eq!((r.lhs.value, r.rhs.value, r.discrepancy), (0.0, 0.0, 0.0));
        assert!(verify_weak_generator(&e, &ZeroFunctional, &clock, &init, 0.0, 50, Seed(1), 3.0, 0.0).is_err());
    }

    #[test]
    fn clock_validation() {
        let g = TimeGrid::uniform(1.0, 0.25).unwrap();
        assert!(Clock::from_fn(&g, |t| -t).is_err());
        let c = Clock::from_fn(&g, |t| t * t).unwrap();
        assert_eq!(c.increment(1), 0.25 - 0.0625);
    }
}
