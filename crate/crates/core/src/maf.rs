//! Path-dependent additive functionals: quadratic variation along refining
//! partitions, the angular bracket of cylinder martingales, Radon–Nikodym
//! densities and the Jordan split.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::generator::{maf_nodes, Clock, CylinderFunctional, GeneratorError, ProcessFunctional, Snapshot, TestFunction};
use crate::path::{CadlagPath, InitialCondition, PathError, TimeGrid};
use crate::rng::Seed;
use crate::scalar::Real;
use crate::sde::{Engine, SimulationError};
use crate::stats::{z_score, RunningStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MafError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("need t <= u, got t = {t}, u = {u}")]
    Order { t: f64, u: f64 },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("functional decreases on [{t}, {u}]")]
    Decreasing { t: f64, u: f64 },
    #[error("window must span at least one grid step")]
    ZeroWindow,
}

/// `A_{t,u}(ω)` between grid nodes.
pub trait AdditiveFunctional<T: Real>: Send + Sync {
    /// Increment between nodes `from <= to`.
    fn increment(&self, path: &CadlagPath<T>, from: usize, to: usize) -> T;
    fn label(&self) -> String;
}

fn nodes_of<T: Real>(grid: &TimeGrid<T>, t: T, u: T) -> Result<(usize, usize), MafError> {
    if t > u {
        return Err(MafError::Order { t: t.as_f64(), u: u.as_f64() });
    }
    Ok((grid.node_index(t)?, grid.node_index(u)?))
}

/// `A_{t,u}(ω)` at grid times.
pub fn increment_between<T: Real>(a: &dyn AdditiveFunctional<T>, path: &CadlagPath<T>, t: T, u: T) -> Result<T, MafError> {
    let (i, j) = nodes_of(path.grid(), t, u)?;
    Ok(a.increment(path, i, j))
}

/// `M[Φ]_{t,u} = Φ_u − Φ_t − ∫_t^u AΦ dV`.
#[derive(Clone)]
pub struct GeneratorMaf<T: Real> {
    pub phi: Arc<dyn ProcessFunctional<T>>,
    pub clock: Clock<T>,
}

impl<T: Real> AdditiveFunctional<T> for GeneratorMaf<T> {
    fn increment(&self, path: &CadlagPath<T>, from: usize, to: usize) -> T {
        maf_nodes(self.phi.as_ref(), &self.clock, from, to, path)
    }
    fn label(&self) -> String {
        format!("M[{}]", self.phi.label())
    }
}

impl<T: Real> GeneratorMaf<T> {
    /// Precomputes `Φ` and the running integral along one path so that
    /// every increment costs O(1).
    pub fn track(&self, path: &CadlagPath<T>) -> TrackedMaf<T> {
        let n = path.grid().len();
        let mut a = Vec::with_capacity(n);
        self.phi.a_phi_along(path, 0, n - 1, &mut a);
        let mut cum = Vec::with_capacity(n);
        let mut acc = T::zero();
        cum.push(acc);
        for (k, v) in a.into_iter().enumerate() {
            acc = acc + v * self.clock.increment(k);
            cum.push(acc);
        }
        let phi = (0..n).map(|k| self.phi.phi(&path.view(k))).collect();
        TrackedMaf { phi, cum, label: self.label() }
    }
}

/// [`GeneratorMaf`] frozen on one path.
#[derive(Debug, Clone)]
pub struct TrackedMaf<T> {
    phi: Vec<T>,
    cum: Vec<T>,
    label: String,
}

impl<T: Real> AdditiveFunctional<T> for TrackedMaf<T> {
    fn increment(&self, _: &CadlagPath<T>, from: usize, to: usize) -> T {
        if from == to {
            return T::zero();
        }
        self.phi[to] - self.phi[from] - (self.cum[to] - self.cum[from])
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Path-independent `A_{t,u} = F(u) − F(t)`.
#[derive(Clone)]
pub struct DeterministicAf<T: Real> {
    pub antiderivative: Arc<dyn Fn(T) -> T + Send + Sync>,
    pub label: String,
}

impl<T: Real> DeterministicAf<T> {
    pub fn new(label: impl Into<String>, f: impl Fn(T) -> T + Send + Sync + 'static) -> Self {
        Self { antiderivative: Arc::new(f), label: label.into() }
    }
}

impl<T: Real> AdditiveFunctional<T> for DeterministicAf<T> {
    fn increment(&self, path: &CadlagPath<T>, from: usize, to: usize) -> T {
        let g = path.grid();
        (self.antiderivative)(g.time(to)) - (self.antiderivative)(g.time(from))
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// `ω(u)_i − ω(t)_i`.
#[derive(Debug, Clone, Copy)]
pub struct CoordinateAf {
    pub coord: usize,
}

impl<T: Real> AdditiveFunctional<T> for CoordinateAf {
    fn increment(&self, path: &CadlagPath<T>, from: usize, to: usize) -> T {
        path.node(to)[self.coord] - path.node(from)[self.coord]
    }
    fn label(&self) -> String {
        format!("X{}", self.coord + 1)
    }
}

/// `Σ_{from ≤ k < to} a(ω, k)` for a per-step increment `a`.
#[derive(Clone)]
pub struct StepSumAf<T: Real> {
    pub step: Arc<dyn Fn(&CadlagPath<T>, usize) -> T + Send + Sync>,
    pub label: String,
}

impl<T: Real> AdditiveFunctional<T> for StepSumAf<T> {
    fn increment(&self, path: &CadlagPath<T>, from: usize, to: usize) -> T {
        (from..to).map(|k| (self.step)(path, k)).sum()
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Nested subdivisions of `[t, u]` by grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionScheme {
    levels: Vec<Vec<usize>>,
}

impl PartitionScheme {
    /// Dyadic refinement of `[t, u]` down to the grid mesh.
    ///
    /// Level `k` uses every `n/2^k`-th node while `2^k` divides the node
    /// count `n`; a final level at the grid itself is appended when needed.
    pub fn dyadic<T: Real>(grid: &TimeGrid<T>, t: T, u: T) -> Result<Self, MafError> {
        let (i, j) = nodes_of(grid, t, u)?;
        let n = j - i;
        if n == 0 {
            return Ok(Self { levels: vec![vec![i]] });
        }
        let mut levels = vec![];
        let mut parts = 1;
        while n % parts == 0 {
            let stride = n / parts;
            levels.push((0..=parts).map(|k| i + k * stride).collect());
            if stride == 1 {
                break;
            }
            parts *= 2;
        }
        if levels.last().map(|l: &Vec<usize>| l.len()) != Some(n + 1) {
            levels.push((i..=j).collect());
        }
        Ok(Self { levels })
    }

    /// Explicit levels given as times. Every level must start at the same
    /// `t`, end at the same `u`, increase strictly and sit on grid nodes.
    pub fn from_times<T: Real>(grid: &TimeGrid<T>, levels: &[Vec<T>]) -> Result<Self, MafError> {
        let mut out = vec![];
        for l in levels {
            let nodes = l.iter().map(|&t| grid.node_index(t)).collect::<Result<Vec<_>, _>>()?;
            if nodes.is_empty() || nodes.windows(2).any(|w| w[1] <= w[0]) {
                return Err(MafError::Partition("levels must be non-empty and strictly increasing".into()));
            }
            out.push(nodes);
        }
        if out.is_empty() {
            return Err(MafError::Partition("no levels".into()));
        }
        let (a, b) = (out[0][0], *out[0].last().unwrap());
        if out.iter().any(|l| l[0] != a || *l.last().unwrap() != b) {
            return Err(MafError::Partition("levels must share both endpoints".into()));
        }
        Ok(Self { levels: out })
    }

    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    pub fn mesh<T: Real>(&self, grid: &TimeGrid<T>, level: usize) -> T {
        self.levels[level].windows(2).map(|w| grid.time(w[1]) - grid.time(w[0])).fold(T::zero(), T::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QvLevel {
    pub level: usize,
    pub mesh: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QvReport {
    pub levels: Vec<QvLevel>,
    /// `|Q_k − Q_{k−1}|` for consecutive levels.
    pub cauchy: Vec<f64>,
    /// Finest level, the estimate of `[M]_{t,u}`.
    pub finest: f64,
}

fn qv_sums<T: Real>(a: &dyn AdditiveFunctional<T>, scheme: &PartitionScheme, path: &CadlagPath<T>) -> Vec<T> {
    scheme
        .levels()
        .iter()
        .map(|l| {
            l.windows(2)
                .map(|w| {
                    let d = a.increment(path, w[0], w[1]);
                    d * d
                })
                .sum()
        })
        .collect()
}

/// `Σ_i A_{t^k_i, t^k_{i+1}}²` for every level `k`.
pub fn quadratic_variation<T: Real>(
    a: &dyn AdditiveFunctional<T>,
    scheme: &PartitionScheme,
    path: &CadlagPath<T>,
) -> Result<QvReport, MafError> {
    let grid = path.grid();
    if scheme.levels().iter().flatten().any(|&k| k >= grid.len()) {
        return Err(MafError::Partition("node beyond the grid".into()));
    }
    let sums = qv_sums(a, scheme, path);
    let levels: Vec<QvLevel> = sums
        .iter()
        .enumerate()
        .map(|(k, v)| QvLevel { level: k, mesh: scheme.mesh(grid, k).as_f64(), value: v.as_f64() })
        .collect();
    let cauchy = levels.windows(2).map(|w| (w[1].value - w[0].value).abs()).collect();
    let finest = levels.last().map_or(0.0, |l| l.value);
    Ok(QvReport { levels, cauchy, finest })
}

/// `Σ_{t ≤ t_k < u} [∇fᵀσσᵀ∇g + Σ_j m_j (f(x+w_j) − f(x))(g(x+w_j) − g(x))] Δ_k`.
pub fn angular_bracket_bilinear<T: Real>(
    engine: &Engine<T>,
    f: &dyn TestFunction<T>,
    g: &dyn TestFunction<T>,
    t: T,
    u: T,
    path: &CadlagPath<T>,
) -> Result<T, MafError> {
    let (i, j) = nodes_of(path.grid(), t, u)?;
    Ok(bracket_nodes(engine, f, g, i, j, path))
}

fn bracket_nodes<T: Real>(
    engine: &Engine<T>,
    f: &dyn TestFunction<T>,
    g: &dyn TestFunction<T>,
    i: usize,
    j: usize,
    path: &CadlagPath<T>,
) -> T {
    let mut snap = Snapshot::new(engine);
    let grid = path.grid();
    let mut out = T::zero();
    for k in i..j {
        let view = path.view(k);
        snap.load(engine, &view);
        out = out + snap.bracket_density(f, g, view.current()) * grid.step(k);
    }
    out
}

/// `⟨M[f]⟩_{t,u}` by left-endpoint quadrature of its compensator.
pub fn angular_bracket_cylinder<T: Real>(
    engine: &Engine<T>,
    f: &dyn TestFunction<T>,
    t: T,
    u: T,
    path: &CadlagPath<T>,
) -> Result<T, MafError> {
    angular_bracket_bilinear(engine, f, f, t, u, path)
}

/// Density process on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityProcess {
    pub times: Vec<f64>,
    pub h: Vec<f64>,
    /// `δ = n · mesh`.
    pub delta: f64,
}

/// Recovers `h` with `A = ∫ h dV` from the quotients
///
/// ```text
/// k_t = A_{t,t+δ} / (A_{t,t+δ} + δ + ΔV),  k'_t = ΔV / (A_{t,t+δ} + δ + ΔV),  h_t = (k_t / k'_t) 1{k'_t ≠ 0}
/// ```
///
/// with a forward window of `window` grid steps. Near the horizon the window
/// is truncated at `T`; at `T` itself it looks backwards. `δ` in the
/// denominator is the length of the window actually used.
pub fn rn_density<T: Real>(
    a: &dyn AdditiveFunctional<T>,
    clock: &Clock<T>,
    path: &CadlagPath<T>,
    window: usize,
) -> Result<DensityProcess, MafError> {
    let grid = path.grid();
    let last = grid.last_index();
    if window == 0 || last == 0 {
        return Err(MafError::ZeroWindow);
    }
    for k in 0..last {
        if a.increment(path, k, k + 1) < T::zero() {
            return Err(MafError::Decreasing { t: grid.time(k).as_f64(), u: grid.time(k + 1).as_f64() });
        }
    }
    let mut h = Vec::with_capacity(grid.len());
    for k in 0..=last {
        let (lo, hi) = if k < last { (k, (k + window).min(last)) } else { (k.saturating_sub(window), k) };
        let inc = a.increment(path, lo, hi);
        if inc < T::zero() {
            return Err(MafError::Decreasing { t: grid.time(lo).as_f64(), u: grid.time(hi).as_f64() });
        }
        let dv = clock.value(hi) - clock.value(lo);
        let len = grid.time(hi) - grid.time(lo);
        let den = inc + len + dv;
        let k1 = inc / den;
        let k2 = dv / den;
        h.push(if k2 != T::zero() { (k1 / k2).as_f64() } else { 0.0 });
    }
    Ok(DensityProcess {
        times: grid.times().iter().map(|t| t.as_f64()).collect(),
        h,
        delta: (grid.mesh() * T::count(window)).as_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariationSplit {
    pub positive: f64,
    pub negative: f64,
    pub total: f64,
    /// `A_{t,u}` itself.
    pub increment: f64,
}

/// Jordan decomposition of the grid increments of `A` on `[t, u]`.
pub fn variation_split<T: Real>(a: &dyn AdditiveFunctional<T>, path: &CadlagPath<T>, t: T, u: T) -> Result<VariationSplit, MafError> {
    let (i, j) = nodes_of(path.grid(), t, u)?;
    let (mut pos, mut neg) = (T::zero(), T::zero());
    for k in i..j {
        let d = a.increment(path, k, k + 1);
        if d > T::zero() {
            pos = pos + d;
        } else {
            neg = neg - d;
        }
    }
    Ok(VariationSplit {
        positive: pos.as_f64(),
        negative: neg.as_f64(),
        total: (pos + neg).as_f64(),
        increment: a.increment(path, i, j).as_f64(),
    })
}

/// Writes `t,value` rows.
pub fn write_series_csv<W: Write>(mut w: W, times: &[f64], values: &[f64]) -> std::io::Result<()> {
    w.write_all(b"t,value\n")?;
    for (t, v) in times.iter().zip(values) {
        writeln!(w, "{t},{v}")?;
    }
    Ok(())
}

/// Writes `level,mesh,value` rows.
pub fn write_qv_csv<W: Write>(mut w: W, levels: &[QvLevel]) -> std::io::Result<()> {
    w.write_all(b"level,mesh,value\n")?;
    for l in levels {
        writeln!(w, "{},{},{}", l.level, l.mesh, l.value)?;
    }
    Ok(())
}

/// Ensemble mean of one QV level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QvLevelMean {
    pub level: usize,
    pub mesh: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Finest-level `[M[f]]` against the compensator quadrature `⟨M[f]⟩` over
/// an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QvEnsembleReport {
    pub f: String,
    pub t: f64,
    pub u: f64,
    pub n_paths: usize,
    pub levels: Vec<QvLevelMean>,
    pub bracket_mean: f64,
    pub bracket_stderr: f64,
    /// Finest-level mean minus bracket mean.
    pub discrepancy: f64,
    /// Standard error of the finest-level mean.
    pub stderr: f64,
    pub z: f64,
    /// Standard error of the per-path difference `[M] − ⟨M⟩`.
    pub paired_stderr: f64,
    pub paired_z: f64,
    /// `Ê[(M_u − M_t)² − (⟨M⟩_u − ⟨M⟩_t)]`.
    pub martingale_gap: f64,
    pub martingale_gap_stderr: f64,
    pub pass: bool,
}

/// Simulates `n_paths` paths and compares QV levels of `M[f]` on `[t, u]`
/// with the angular bracket quadrature.
#[allow(clippy::too_many_arguments)]
pub fn qv_against_bracket<T: Real>(
    engine: &Engine<T>,
    init: &InitialCondition<T>,
    f: Arc<dyn TestFunction<T>>,
    t: T,
    u: T,
    n_paths: usize,
    seed: Seed,
    z_crit: f64,
) -> Result<QvEnsembleReport, MafError> {
    let grid = init.grid().clone();
    let scheme = PartitionScheme::dyadic(&grid, t, u)?;
    let (i, j) = nodes_of(&grid, t, u)?;
    let maf = GeneratorMaf { phi: Arc::new(CylinderFunctional::new(f.clone(), engine.clone())), clock: Clock::identity(&grid) };
    let nl = scheme.levels().len();
    struct Acc<T: Real> {
        levels: Vec<RunningStats<T>>,
        bracket: RunningStats<T>,
        diff: RunningStats<T>,
        gap: RunningStats<T>,
    }
    let acc = engine.fold_paths(
        init,
        n_paths,
        seed,
        || Acc { levels: vec![RunningStats::new(); nl], bracket: RunningStats::new(), diff: RunningStats::new(), gap: RunningStats::new() },
        |acc, _, path| {
            let tracked = maf.track(path);
            let sums = qv_sums(&tracked, &scheme, path);
            let br = bracket_nodes(engine, f.as_ref(), f.as_ref(), i, j, path);
            for (s, v) in acc.levels.iter_mut().zip(&sums) {
                s.push(*v);
            }
            acc.bracket.push(br);
            acc.diff.push(sums[nl - 1] - br);
            let m = tracked.increment(path, i, j);
            acc.gap.push(m * m - br);
            Ok::<_, MafError>(())
        },
        |a, b| {
            for (x, y) in a.levels.iter_mut().zip(&b.levels) {
                x.merge(y);
            }
            a.bracket.merge(&b.bracket);
            a.diff.merge(&b.diff);
            a.gap.merge(&b.gap);
        },
    )?;
    let levels: Vec<QvLevelMean> = acc
        .levels
        .iter()
        .enumerate()
        .map(|(k, s)| QvLevelMean { level: k, mesh: scheme.mesh(&grid, k).as_f64(), mean: s.mean().as_f64(), stderr: s.stderr().as_f64() })
        .collect();
    let finest = &levels[nl - 1];
    let bracket_mean = acc.bracket.mean().as_f64();
    let discrepancy = finest.mean - bracket_mean;
    let z = z_score(discrepancy, finest.stderr);
    let paired_stderr = acc.diff.stderr().as_f64();
    Ok(QvEnsembleReport {
        f: f.label(),
        t: t.as_f64(),
        u: u.as_f64(),
        n_paths,
        bracket_mean,
        bracket_stderr: acc.bracket.stderr().as_f64(),
        discrepancy,
        stderr: finest.stderr,
        z,
        paired_stderr,
        paired_z: z_score(acc.diff.mean().as_f64(), paired_stderr),
        martingale_gap: acc.gap.mean().as_f64(),
        martingale_gap_stderr: acc.gap.stderr().as_f64(),
        pass: z.abs() <= z_crit,
        levels,
    })
}

/// Ratios `Q_{k+1} / Q_k` of consecutive QV levels.
pub fn halving_ratios(levels: &[QvLevel]) -> Vec<f64> {
    levels.windows(2).map(|w| if w[0].value != 0.0 { w[1].value / w[0].value } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Trig, Wave};
    use crate::sde::{JumpMeasure, PresetCoefficients};
    use proptest::prelude::*;

    fn grid(n: usize) -> Arc<TimeGrid<f64>> {
        Arc::new(TimeGrid::uniform(1.0, 1.0 / n as f64).unwrap())
    }

    fn cos1() -> Arc<dyn TestFunction<f64>> {
        Arc::new(Trig { theta: vec![1.0], wave: Wave::Cos })
    }

    #[test]
    fn dyadic_levels() {
        let g = grid(16);
        let s = PartitionScheme::dyadic(&g, 0.0, 1.0).unwrap();
        assert_eq!(s.levels().len(), 5);
        assert_eq!(s.levels()[0], vec![0, 16]);
        assert_eq!(s.levels()[4].len(), 17);
        let s = PartitionScheme::dyadic(&g, 0.25, 0.625).unwrap();
        assert_eq!(s.levels(), &[vec![4, 10], vec![4, 7, 10], (4..=10).collect::<Vec<_>>()]);
        assert!(PartitionScheme::dyadic(&g, 0.3, 0.5).is_err());
        assert!(PartitionScheme::from_times(&g, &[vec![0.0, 1.0], vec![0.0, 0.5]]).is_err());
    }

    #[test]
    fn qv_of_zero_and_deterministic() {
        let g = grid(64);
        let p = CadlagPath::constant(g.clone(), &[0.0]);
        let scheme = PartitionScheme::dyadic(&g, 0.0, 1.0).unwrap();
        let zero = DeterministicAf::new("0", |_| 0.0);
        assert!(quadratic_variation(&zero, &scheme, &p).unwrap().levels.iter().all(|l| l.value == 0.0));
        let lin = DeterministicAf::new("u-t", |t| t);
        let r = quadratic_variation(&lin, &scheme, &p).unwrap();
        for l in &r.levels {
            // Σ (mesh)² over 1/mesh intervals = mesh
            assert!((l.value - l.mesh).abs() < 1e-15);
        }
        for ratio in halving_ratios(&r.levels) {
            assert!((ratio - 0.5).abs() < 1e-12);
        }
        assert!(r.levels.windows(2).all(|w| w[1].value < w[0].value));
    }

    #[test]
    fn bracket_examples_and_polarization() {
        let g = grid(32);
        let zero = Engine::with_preset(PresetCoefficients::scalar(0.3, 0.0, &JumpMeasure::empty()).unwrap(), JumpMeasure::empty(), g.clone()).unwrap();
        let p = CadlagPath::from_fn(g.clone(), 1, |t| vec![(3.0 * t).sin()]).unwrap();
        assert_eq!(angular_bracket_cylinder(&zero, cos1().as_ref(), 0.0, 1.0, &p).unwrap(), 0.0);

        let bm = Engine::with_preset(PresetCoefficients::scalar(0.0, 1.0, &JumpMeasure::empty()).unwrap(), JumpMeasure::empty(), g.clone()).unwrap();
        let got = angular_bracket_cylinder(&bm, cos1().as_ref(), 0.25, 0.75, &p).unwrap();
        let oracle: f64 = (8..24).map(|k| p.node(k)[0].sin().powi(2) / 32.0).sum();
        assert!((got - oracle).abs() < 1e-15);

        let jumps = JumpMeasure::single(vec![0.6], 0.9).unwrap();
        let jd = Engine::with_preset(PresetCoefficients::scalar(0.1, 0.4, &jumps).unwrap(), jumps, g.clone()).unwrap();
        let f = cos1();
        let h: Arc<dyn TestFunction<f64>> = Arc::new(Trig { theta: vec![2.0], wave: Wave::Sin });
        let sum = crate::generator::LinearCombination { terms: vec![(1.0, f.clone()), (1.0, h.clone())] };
        let lhs = angular_bracket_cylinder(&jd, &sum, 0.0, 1.0, &p).unwrap();
        let ff = angular_bracket_bilinear(&jd, f.as_ref(), f.as_ref(), 0.0, 1.0, &p).unwrap();
        let fh = angular_bracket_bilinear(&jd, f.as_ref(), h.as_ref(), 0.0, 1.0, &p).unwrap();
        let hh = angular_bracket_bilinear(&jd, h.as_ref(), h.as_ref(), 0.0, 1.0, &p).unwrap();
        assert!((lhs - (ff + 2.0 * fh + hh)).abs() < 1e-13);
        assert!(angular_bracket_cylinder(&jd, f.as_ref(), 0.5, 0.25, &p).is_err());
    }

    #[test]
    fn rn_density_examples() {
        let g = grid(64);
        let p = CadlagPath::constant(g.clone(), &[0.0]);
        let clock = Clock::identity(&g);
        let zero = DeterministicAf::new("0", |_| 0.0);
        assert!(rn_density(&zero, &clock, &p, 4).unwrap().h.iter().all(|&h| h == 0.0));
        let lin = DeterministicAf::new("t", |t| t);
        assert!(rn_density(&lin, &clock, &p, 4).unwrap().h.iter().all(|&h| h == 1.0));
        let quad = DeterministicAf::new("t^2/2", |t| t * t / 2.0);
        let d = rn_density(&quad, &clock, &p, 1).unwrap();
        assert_eq!(d.delta, 1.0 / 64.0);
        for (t, h) in d.times.iter().zip(&d.h) {
            assert!((h - t).abs() <= d.delta, "t={t} h={h}");
        }
        let down = DeterministicAf::new("-t", |t: f64| -t);
        assert!(matches!(rn_density(&down, &clock, &p, 1), Err(MafError::Decreasing { .. })));
        assert!(rn_density(&lin, &clock, &p, 0).is_err());
    }

    #[test]
    fn rn_density_piecewise_constant() {
        let g = grid(64);
        let p = CadlagPath::constant(g.clone(), &[0.0]);
        let clock = Clock::identity(&g);
        // h = 2 on [0, 1/2), 0.5 on [1/2, 1]
        let a = DeterministicAf::new("pw", |t: f64| if t <= 0.5 { 2.0 * t } else { 1.0 + 0.5 * (t - 0.5) });
        let d = rn_density(&a, &clock, &p, 4).unwrap();
        for (k, h) in d.h.iter().enumerate() {
            if k + 4 <= 32 {
                assert!((h - 2.0).abs() < 1e-14, "k={k} h={h}");
            } else if k >= 32 {
                assert!((h - 0.5).abs() < 1e-14, "k={k} h={h}");
            }
        }
    }

    #[test]
    fn variation_split_examples() {
        let g = grid(16);
        let p = CadlagPath::constant(g.clone(), &[0.0]);
        let alt = StepSumAf { step: Arc::new(|_: &CadlagPath<f64>, k: usize| if k % 2 == 0 { 1.0 } else { -1.0 }), label: "alt".into() };
        let v = variation_split(&alt, &p, 0.0, 1.0).unwrap();
        assert_eq!((v.positive, v.negative, v.total, v.increment), (8.0, 8.0, 16.0, 0.0));
        let up = DeterministicAf::new("t", |t| t);
        assert_eq!(variation_split(&up, &p, 0.0, 1.0).unwrap().negative, 0.0);
    }

    proptest! {
        #[test]
        fn jordan_identity(steps in proptest::collection::vec(-3.0f64..3.0, 16)) {
            let g = grid(16);
            let q = CadlagPath::new(g.clone(), 1, std::iter::once(0.0).chain(steps.iter().scan(0.0, |s, d| { *s += d; Some(*s) })).collect()).unwrap();
            let v = variation_split(&CoordinateAf { coord: 0 }, &q, 0.0, 1.0).unwrap();
            prop_assert!((v.positive - v.negative - v.increment).abs() <= 1e-12 * (1.0 + v.total));
            prop_assert!(v.positive >= 0.0 && v.negative >= 0.0);
        }

        #[test]
        fn qv_additive_across_shared_node(k in 1usize..16, seed in 0u64..500) {
            let g = grid(16);
            let jumps = JumpMeasure::single(vec![1.0], 0.5).unwrap();
            let e = Engine::with_preset(PresetCoefficients::scalar(0.1, 0.3, &jumps).unwrap(), jumps, g.clone()).unwrap();
            let init = InitialCondition::constant(g.clone(), 0.0, &[0.0]).unwrap();
            let p = e.simulate_path(&init, Seed(seed), 0).unwrap();
            let grid_level = |a: usize, b: usize| PartitionScheme::from_times(&g, &[(a..=b).map(|i| i as f64 / 16.0).collect()]).unwrap();
            let x = CoordinateAf { coord: 0 };
            let left = quadratic_variation(&x, &grid_level(0, k), &p).unwrap().finest;
            let right = quadratic_variation(&x, &grid_level(k, 16), &p).unwrap().finest;
            let whole = quadratic_variation(&x, &grid_level(0, 16), &p).unwrap().finest;
            prop_assert!((left + right - whole).abs() <= 1e-12 * (1.0 + whole));
        }
    }

    #[test]
    fn tracked_maf_matches_direct() {
        let g = grid(32);
        let jumps = JumpMeasure::single(vec![1.0], 0.5).unwrap();
        let e = Engine::with_preset(PresetCoefficients::scalar(0.1, 0.3, &jumps).unwrap(), jumps, g.clone()).unwrap();
        let init = InitialCondition::constant(g.clone(), 0.0, &[0.0]).unwrap();
        let p = e.simulate_path(&init, Seed(3), 1).unwrap();
        let maf = GeneratorMaf { phi: Arc::new(CylinderFunctional::new(cos1(), e.clone())), clock: Clock::identity(&g) };
        let tr = maf.track(&p);
        for (a, b) in [(0, 32), (5, 17), (9, 9)] {
            assert!((tr.increment(&p, a, b) - maf.increment(&p, a, b)).abs() < 1e-13);
        }
    }

    #[test]
    fn qv_matches_bracket_on_diffusion() {
        let g = grid(256);
        let e = Engine::with_preset(PresetCoefficients::scalar(0.0, 1.0, &JumpMeasure::empty()).unwrap(), JumpMeasure::empty(), g.clone()).unwrap();
        let init = InitialCondition::constant(g.clone(), 0.0, &[0.0]).unwrap();
        let r = qv_against_bracket(&e, &init, cos1(), 0.0, 1.0, 2000, Seed(8), 3.0).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.martingale_gap.abs() <= 3.0 * r.martingale_gap_stderr, "{r:?}");
    }

    #[test]
    fn csv_exports() {
        let mut buf = vec![];
        write_series_csv(&mut buf, &[0.0, 0.5], &[1.0, 2.5]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,value\n0,1\n0.5,2.5\n");
        let mut buf = vec![];
        write_qv_csv(&mut buf, &[QvLevel { level: 0, mesh: 1.0, value: 0.25 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "level,mesh,value\n0,1,0.25\n");
    }
}
