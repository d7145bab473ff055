//! Moduli of continuity on Skorokhod space, the two-condition tightness
//! criterion, and a J1 proximity score.
//!
//! Intervals `[a, b)` are half-open. In `W'_N` the last interval of a
//! subdivision is closed at `N`, so a jump exactly at `N` is seen.

use serde::Serialize;
use thiserror::Error;

use crate::path::{same_grid, CadlagPath, PathError, TimeGrid};
use crate::scalar::{distance, norm, Real};
use crate::stats::frequency_stderr;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkorokhodError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("empty or inverted interval [{a}, {b})")]
    EmptyInterval { a: f64, b: f64 },
    #[error("theta must be positive, got {0}")]
    NonPositiveTheta(f64),
    #[error("no subdivision of [0, {n}] with gaps >= {theta}")]
    InfeasibleSubdivision { n: f64, theta: f64 },
    #[error("window end {n} beyond horizon {horizon}")]
    WindowBeyondHorizon { n: f64, horizon: f64 },
    #[error("paths have different horizons")]
    HorizonMismatch,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
}

/// Oscillation over the nodes `i..=j` (both inclusive).
fn node_oscillation<T: Real>(path: &CadlagPath<T>, i: usize, j: usize) -> T {
    if path.dim() == 1 {
        let (lo, hi) = (i..=j).fold((T::infinity(), T::neg_infinity()), |(lo, hi), k| {
            let v = path.node(k)[0];
            (lo.min(v), hi.max(v))
        });
        return hi - lo;
    }
    let mut best = T::zero();
    for a in i..=j {
        for b in a + 1..=j {
            best = best.max(distance(path.node(a), path.node(b)));
        }
    }
    best
}

/// Incremental oscillation of a node set grown by one node at a time.
struct OscTracker<'a, T> {
    path: &'a CadlagPath<T>,
    lo: T,
    hi: T,
    value: T,
    first: usize,
    last: usize,
}

impl<'a, T: Real> OscTracker<'a, T> {
    fn start(path: &'a CadlagPath<T>, k: usize) -> Self {
        let v = path.node(k)[0];
        Self { path, lo: v, hi: v, value: T::zero(), first: k, last: k }
    }

    /// Adds node `first - 1`.
    fn extend_down(&mut self) {
        self.first -= 1;
        self.absorb(self.first);
    }

    fn absorb(&mut self, k: usize) {
        if self.path.dim() == 1 {
            let v = self.path.node(k)[0];
            self.lo = self.lo.min(v);
            self.hi = self.hi.max(v);
            self.value = self.hi - self.lo;
        } else {
            let p = self.path.node(k);
            for other in self.first..=self.last {
                if other != k {
                    let d = if other < k {
                        distance(self.path.node(other), p)
                    } else {
                        distance(p, self.path.node(other))
                    };
                    self.value = self.value.max(d);
                }
            }
        }
    }
}

/// Nodes whose constancy piece meets `[a, b)`.
fn half_open_nodes<T: Real>(grid: &TimeGrid<T>, a: T, b: T) -> Result<(usize, usize), SkorokhodError> {
    if !(a < b) {
        return Err(SkorokhodError::EmptyInterval { a: a.as_f64(), b: b.as_f64() });
    }
    let i = grid.locate(a)?;
    grid.locate(b)?;
    let j = grid.times().partition_point(|&x| x < b) - 1;
    Ok((i, j.max(i)))
}

/// `W(ω, [a, b)) = sup_{s,t ∈ [a,b)} ‖ω(t) − ω(s)‖`, exact for step paths.
pub fn oscillation<T: Real>(path: &CadlagPath<T>, a: T, b: T) -> Result<T, SkorokhodError> {
    let (i, j) = half_open_nodes(path.grid(), a, b)?;
    Ok(node_oscillation(path, i, j))
}

/// `W(ω, [a, b])`.
pub fn oscillation_closed<T: Real>(path: &CadlagPath<T>, a: T, b: T) -> Result<T, SkorokhodError> {
    if !(a <= b) {
        return Err(SkorokhodError::EmptyInterval { a: a.as_f64(), b: b.as_f64() });
    }
    let i = path.grid().locate(a)?;
    let j = path.grid().locate(b)?;
    Ok(node_oscillation(path, i, j))
}

fn window_end<T: Real>(grid: &TimeGrid<T>, n: T) -> Result<usize, SkorokhodError> {
    if n > grid.horizon() + grid.min_gap() * T::lit(1e-6) {
        return Err(SkorokhodError::WindowBeyondHorizon { n: n.as_f64(), horizon: grid.horizon().as_f64() });
    }
    Ok(grid.node_index(n)?)
}

/// `W_N(ω, θ) = sup { ‖ω(t) − ω(s)‖ : s, t ∈ [0, N], |t − s| ≤ θ }`.
///
/// Exact over real times: the constancy piece of node `i` reaches node
/// `j > i` within `θ` iff `t_j − t_{i+1} < θ`.
pub fn modulus_w<T: Real>(path: &CadlagPath<T>, n: T, theta: T) -> Result<T, SkorokhodError> {
    if !(theta > T::zero()) {
        return Err(SkorokhodError::NonPositiveTheta(theta.as_f64()));
    }
    let grid = path.grid();
    let end = window_end(grid, n)?;
    let tol = grid.min_gap() * T::lit(1e-6);
    let mut best = T::zero();
    for j in 1..=end {
        let tj = grid.time(j);
        let mut i = j - 1;
        loop {
            best = best.max(pair_distance(path, i, j));
            if i == 0 || !(tj - grid.time(i) < theta - tol) {
                break;
            }
            i -= 1;
        }
    }
    Ok(best)
}

#[inline]
fn pair_distance<T: Real>(path: &CadlagPath<T>, i: usize, j: usize) -> T {
    if path.dim() == 1 {
        let (a, b) = (path.node(i)[0], path.node(j)[0]);
        a.max(b) - a.min(b)
    } else {
        distance(path.node(i), path.node(j))
    }
}

/// Result of the `W'_N` minimisation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModulusReport<T> {
    /// Window end `N`.
    pub n: T,
    pub theta: T,
    /// `W_N(ω, θ)`.
    pub w_value: T,
    /// `W'_N(ω, θ)`.
    pub wprime_value: T,
    /// Achieving subdivision `0 = t_0 < ... < t_r = N`.
    pub subdivision: Vec<T>,
}

/// `W'_N(ω, θ)`: infimum over grid-node subdivisions of `[0, N]` with all
/// gaps `≥ θ` of the largest interval oscillation, by dynamic programming.
pub fn modulus_wprime<T: Real>(path: &CadlagPath<T>, n: T, theta: T) -> Result<ModulusReport<T>, SkorokhodError> {
    let (value, nodes) = wprime_nodes(path, n, theta)?;
    let grid = path.grid();
    Ok(ModulusReport {
        n,
        theta,
        w_value: modulus_w(path, n, theta)?,
        wprime_value: value,
        subdivision: nodes.into_iter().map(|k| grid.time(k)).collect(),
    })
}

/// `W'_N` value only.
pub fn wprime_value<T: Real>(path: &CadlagPath<T>, n: T, theta: T) -> Result<T, SkorokhodError> {
    Ok(wprime_nodes(path, n, theta)?.0)
}

fn wprime_nodes<T: Real>(path: &CadlagPath<T>, n: T, theta: T) -> Result<(T, Vec<usize>), SkorokhodError> {
    if !(theta > T::zero()) {
        return Err(SkorokhodError::NonPositiveTheta(theta.as_f64()));
    }
    let grid = path.grid();
    let end = window_end(grid, n)?;
    let tol = grid.min_gap() * T::lit(1e-6);
    if end == 0 || theta > grid.time(end) + tol {
        return Err(SkorokhodError::InfeasibleSubdivision { n: n.as_f64(), theta: theta.as_f64() });
    }
    // best[j]: optimal value over subdivisions of [0, t_j] ending at node j.
    let mut best = vec![T::infinity(); end + 1];
    let mut prev = vec![usize::MAX; end + 1];
    best[0] = T::zero();
    for j in 1..=end {
        let tj = grid.time(j);
        // Interval [t_i, t_j) covers nodes i..=j-1; the last one is closed.
        let top = if j == end { j } else { j - 1 };
        let mut osc = OscTracker::start(path, top);
        if j == end && top > 0 {
            osc.extend_down();
        }
        let mut i = j - 1;
        loop {
            while osc.first > i {
                osc.extend_down();
            }
            if tj - grid.time(i) >= theta - tol && best[i].is_finite() {
                let cand = best[i].max(osc.value);
                if cand < best[j] {
                    best[j] = cand;
                    prev[j] = i;
                }
            }
            if i == 0 {
                break;
            }
            i -= 1;
        }
    }
    let mut nodes = vec![end];
    let mut k = end;
    while k != 0 {
        k = prev[k];
        nodes.push(k);
    }
    nodes.reverse();
    Ok((best[end], nodes))
}

/// Tightness search settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TightnessConfig<T> {
    /// Window end `N`.
    pub n: T,
    pub epsilon: f64,
    pub alphas: Vec<T>,
    /// Largest `K` in the doubling schedule `1, 2, 4, ...`.
    pub k_cap: T,
    /// Smallest `θ` in the halving schedule `1, 1/2, ...`; defaults to the mesh.
    pub theta_floor: Option<T>,
}

impl<T: Real> TightnessConfig<T> {
    pub fn new(n: T, epsilon: f64, alphas: Vec<T>) -> Self {
        Self { n, epsilon, alphas, k_cap: T::lit(1_048_576.0), theta_floor: None }
    }

    pub fn k_schedule(&self) -> Vec<T> {
        let mut ks = vec![];
        let mut k = T::one();
        while k <= self.k_cap {
            ks.push(k);
            k = k + k;
        }
        ks
    }

    pub fn theta_schedule(&self, grid: &TimeGrid<T>) -> Vec<T> {
        let floor = self.theta_floor.unwrap_or(grid.mesh());
        let tol = grid.min_gap() * T::lit(1e-6);
        let mut out = vec![];
        let mut th = T::one();
        while th >= floor - tol {
            if th <= self.n + tol {
                out.push(th);
            }
            th = th * T::half();
        }
        out
    }
}

/// Per-path quantities the tightness criterion needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary<T> {
    /// `sup_{t ≤ N} ‖ω(t)‖`.
    pub sup_norm: T,
    /// `W'_N(ω, θ)` for each θ of the schedule.
    pub wprime: Vec<T>,
}

pub fn summarize<T: Real>(path: &CadlagPath<T>, n: T, thetas: &[T]) -> Result<PathSummary<T>, SkorokhodError> {
    let end = window_end(path.grid(), n)?;
    let wprime = thetas.iter().map(|&th| wprime_value(path, n, th)).collect::<Result<_, _>>()?;
    Ok(PathSummary { sup_norm: path.sup_norm_until(end), wprime })
}

/// One evaluated condition of the criterion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionRow {
    pub condition: String,
    pub parameter: f64,
    pub frequency: f64,
    pub stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightnessVerdict {
    /// Compactness radius found.
    pub k: Option<f64>,
    /// `(α, θ)` pairs; `θ = None` when the schedule was exhausted.
    pub theta_per_alpha: Vec<(f64, Option<f64>)>,
    pub pass: bool,
    /// Names of the conditions that failed.
    pub failed: Vec<String>,
    pub rows: Vec<ConditionRow>,
}

pub const COMPACT_CONTAINMENT: &str = "compact_containment";
pub const OSCILLATION: &str = "oscillation";

/// Evaluates both conditions from per-level path summaries computed with
/// `cfg.theta_schedule(grid)`.
pub fn tightness_from_summaries<T: Real>(
    levels: &[Vec<PathSummary<T>>],
    grid: &TimeGrid<T>,
    cfg: &TightnessConfig<T>,
) -> Result<TightnessVerdict, SkorokhodError> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(SkorokhodError::BadEpsilon(cfg.epsilon));
    }
    if levels.is_empty() || levels.iter().any(|l| l.is_empty()) {
        return Err(SkorokhodError::EmptyEnsemble);
    }
    let eps = cfg.epsilon;
    let mut rows = vec![];
    let mut failed = vec![];

    // sup_n P^n(sup ‖ω‖ > K) <= ε
    let mut found_k = None;
    for k in cfg.k_schedule() {
        let (freq, se) = levels
            .iter()
            .map(|l| {
                let p = l.iter().filter(|s| s.sup_norm > k).count() as f64 / l.len() as f64;
                (p, frequency_stderr(p, l.len()))
            })
            .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a });
        let pass = freq <= eps;
        rows.push(ConditionRow { condition: COMPACT_CONTAINMENT.into(), parameter: k.as_f64(), frequency: freq, stderr: se, pass });
        if pass {
            found_k = Some(k.as_f64());
            break;
        }
    }
    if found_k.is_none() {
        failed.push(COMPACT_CONTAINMENT.to_string());
    }

    // inf_n P^n(W'_N(θ) < α) >= 1 − ε
    let thetas = cfg.theta_schedule(grid);
    let mut theta_per_alpha = vec![];
    for &alpha in &cfg.alphas {
        let mut found = None;
        for (ti, &th) in thetas.iter().enumerate() {
            let (freq, se) = levels
                .iter()
                .map(|l| {
                    let p = l.iter().filter(|s| s.wprime[ti] < alpha).count() as f64 / l.len() as f64;
                    (p, frequency_stderr(p, l.len()))
                })
                .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
            let pass = freq >= 1.0 - eps;
            rows.push(ConditionRow {
                condition: format!("{OSCILLATION}(alpha={})", alpha.as_f64()),
                parameter: th.as_f64(),
                frequency: freq,
                stderr: se,
                pass,
            });
            if pass {
                found = Some(th.as_f64());
                break;
            }
        }
        if found.is_none() {
            failed.push(format!("{OSCILLATION}(alpha={})", alpha.as_f64()));
        }
        theta_per_alpha.push((alpha.as_f64(), found));
    }

    Ok(TightnessVerdict { k: found_k, theta_per_alpha, pass: failed.is_empty(), failed, rows })
}

/// Tightness criterion over a sequence of ensembles sharing one grid.
pub fn tightness_check<T: Real, E: AsRef<[CadlagPath<T>]>>(
    ensembles: &[E],
    cfg: &TightnessConfig<T>,
) -> Result<TightnessVerdict, SkorokhodError> {
    let first = ensembles
        .iter()
        .find_map(|e| e.as_ref().first())
        .ok_or(SkorokhodError::EmptyEnsemble)?;
    let grid = first.grid().clone();
    let thetas = cfg.theta_schedule(&grid);
    let levels = ensembles
        .iter()
        .map(|e| {
            let paths = e.as_ref();
            crate::parallel::map_indexed(paths.len(), |i| summarize(&paths[i], cfg.n, &thetas))
        })
        .collect::<Result<Vec<_>, _>>()?;
    tightness_from_summaries(&levels, &grid, cfg)
}

/// Default band (in nodes) of admissible time distortion for
/// [`skorokhod_distance`].
pub const DEFAULT_BAND: usize = 64;

/// Upper bound on the J1 distance
/// `inf_λ max(‖λ − id‖_∞, ‖p ∘ λ − q‖_∞)` over piecewise-linear time changes
/// whose knots map grid nodes to grid nodes. This is a proximity surrogate,
/// not the exact metric.
pub fn skorokhod_distance<T: Real>(p: &CadlagPath<T>, q: &CadlagPath<T>) -> Result<T, SkorokhodError> {
    skorokhod_distance_banded(p, q, DEFAULT_BAND)
}

/// [`skorokhod_distance`] with knots restricted to move at most `band` nodes.
pub fn skorokhod_distance_banded<T: Real>(p: &CadlagPath<T>, q: &CadlagPath<T>, band: usize) -> Result<T, SkorokhodError> {
    if p.horizon() != q.horizon() {
        return Err(SkorokhodError::HorizonMismatch);
    }
    if !same_grid(p.grid(), q.grid()) {
        return Err(PathError::GridMismatch.into());
    }
    if p.dim() != q.dim() {
        return Err(PathError::Dimension { expected: p.dim(), got: q.dim() }.into());
    }
    let a = directed_distance(p, q, band);
    let b = directed_distance(q, p, band);
    Ok(a.min(b))
}

/// Minimax alignment of q's constancy pieces onto ranges of p's nodes.
fn directed_distance<T: Real>(p: &CadlagPath<T>, q: &CadlagPath<T>, band: usize) -> T {
    let grid = p.grid();
    let n = grid.last_index();
    let inf = T::infinity();
    let mut cur = vec![inf; n + 1];
    cur[0] = T::zero();
    for k in 0..n {
        let mut next = vec![inf; n + 1];
        let target_last = k + 1 == n;
        let j_lo = k.saturating_sub(band);
        let j_hi = (k + band).min(n - 1);
        for j in j_lo..=j_hi {
            let base = cur[j];
            if !base.is_finite() {
                continue;
            }
            let jp_hi = if target_last { n } else { (k + 1 + band).min(n - 1) };
            let jp_lo = if target_last { n } else { j };
            // running max of ‖p_i − q_k‖ over i ∈ [j, max(j', j+1))
            let mut seg = dist_pq(p, q, j, k);
            let mut covered = j + 1;
            for jp in j..=jp_hi {
                while covered < jp {
                    seg = seg.max(dist_pq(p, q, covered, k));
                    covered += 1;
                }
                if jp < jp_lo {
                    continue;
                }
                let time = (grid.time(jp) - grid.time(k + 1)).abs();
                let cost = base.max(seg).max(time);
                if cost < next[jp] {
                    next[jp] = cost;
                }
            }
        }
        cur = next;
    }
    cur[n].max(dist_pq(p, q, n, n))
}

#[inline]
fn dist_pq<T: Real>(p: &CadlagPath<T>, q: &CadlagPath<T>, i: usize, k: usize) -> T {
    if p.dim() == 1 {
        let (a, b) = (p.node(i)[0], q.node(k)[0]);
        a.max(b) - a.min(b)
    } else {
        distance(p.node(i), q.node(k))
    }
}

/// `sup_{t ≤ N} ‖ω(t)‖`.
pub fn sup_norm<T: Real>(path: &CadlagPath<T>, n: T) -> Result<T, SkorokhodError> {
    let end = window_end(path.grid(), n)?;
    Ok((0..=end).map(|k| norm(path.node(k))).fold(T::zero(), T::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn grid(n: usize, h: f64) -> Arc<TimeGrid<f64>> {
        Arc::new(TimeGrid::uniform(h, h / n as f64).unwrap())
    }

    fn step(g: &Arc<TimeGrid<f64>>, jumps: &[(f64, f64)]) -> CadlagPath<f64> {
        CadlagPath::from_fn(g.clone(), 1, |t| {
            vec![jumps.iter().filter(|(tau, _)| t >= *tau).map(|(_, h)| h).sum()]
        })
        .unwrap()
    }

    /// All strictly increasing node subsequences from 0 to `end`.
    fn brute_wprime(p: &CadlagPath<f64>, end: usize, theta: f64) -> f64 {
        let g = p.grid();
        let mut best = f64::INFINITY;
        let inner = end - 1;
        for mask in 0u32..(1 << inner) {
            let mut nodes = vec![0];
            for b in 0..inner {
                if mask & (1 << b) != 0 {
                    nodes.push(b + 1);
                }
            }
            nodes.push(end);
            if nodes.windows(2).any(|w| g.time(w[1]) - g.time(w[0]) < theta - 1e-12) {
                continue;
            }
            let mut worst: f64 = 0.0;
            for (idx, w) in nodes.windows(2).enumerate() {
                let last = idx + 2 == nodes.len();
                let hi = if last { w[1] } else { w[1] - 1 };
                let vals: Vec<f64> = (w[0]..=hi).map(|k| p.node(k)[0]).collect();
                for a in &vals {
                    for b in &vals {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            best = best.min(worst);
        }
        best
    }

    /// Dense sampling over real (s, t) pairs with |t − s| ≤ θ.
    fn brute_w(p: &CadlagPath<f64>, n: f64, theta: f64) -> f64 {
        let steps = 4096;
        let mut best: f64 = 0.0;
        for a in 0..=steps {
            let s = n * a as f64 / steps as f64;
            for b in a..=steps {
                let t = n * b as f64 / steps as f64;
                if t - s > theta + 1e-12 {
                    break;
                }
                best = best.max((p.evaluate(t).unwrap()[0] - p.evaluate(s).unwrap()[0]).abs());
            }
        }
        best
    }

    #[test]
    fn oscillation_examples() {
        let g = grid(8, 1.0);
        let c = CadlagPath::constant(g.clone(), &[2.0]);
        assert_eq!(oscillation(&c, 0.0, 1.0).unwrap(), 0.0);
        let p = step(&g, &[(0.5, 1.0)]);
        assert_eq!(oscillation(&p, 0.25, 0.75).unwrap(), 1.0);
        assert_eq!(oscillation(&p, 0.0, 0.5).unwrap(), 0.0);
        assert_eq!(oscillation_closed(&p, 0.0, 0.5).unwrap(), 1.0);
        assert!(oscillation(&p, 0.6, 0.6).is_err());
        assert!(oscillation(&p, 0.7, 0.6).is_err());
        assert!(oscillation(&p, 0.25, 0.5).unwrap() <= oscillation(&p, 0.0, 1.0).unwrap());
    }

    #[test]
    fn modulus_w_staircase() {
        let g = grid(16, 1.0);
        let c = 0.3;
        let p = CadlagPath::from_fn(g.clone(), 1, |t| vec![c * (t * 16.0).round()]).unwrap();
        for k in 1..6 {
            let theta = k as f64 / 16.0;
            let w = modulus_w(&p, 1.0, theta).unwrap();
            assert!((w - k as f64 * c).abs() < 1e-12, "k={k} w={w}");
        }
        assert_eq!(modulus_w(&CadlagPath::constant(g.clone(), &[1.0]), 1.0, 0.1).unwrap(), 0.0);
        assert!(modulus_w(&p, 1.0, 0.0).is_err());
    }

    #[test]
    fn modulus_w_matches_dense_sampling() {
        // Dyadic grid and sample times keep the oracle free of rounding at nodes.
        let g = grid(16, 1.0);
        let p = CadlagPath::from_fn(g.clone(), 1, |t| vec![(7.3 * t).sin() + (t * 10.0).round() * 0.1]).unwrap();
        for theta in [0.05, 0.1, 0.125, 0.15, 0.2, 0.25, 0.33] {
            let w = modulus_w(&p, 1.0, theta).unwrap();
            assert!((w - brute_w(&p, 1.0, theta)).abs() < 1e-12, "theta {theta}");
        }
    }

    #[test]
    fn wprime_examples() {
        let g = grid(10, 1.0);
        let c = CadlagPath::constant(g.clone(), &[1.0]);
        assert_eq!(modulus_wprime(&c, 1.0, 0.3).unwrap().wprime_value, 0.0);
        // jumps at 0.3 and 0.6, theta 0.3: subdivision 0, 0.3, 0.6, 1.
        let p = step(&g, &[(0.3, 1.0), (0.6, -2.0)]);
        let rep = modulus_wprime(&p, 1.0, 0.3).unwrap();
        assert_eq!(rep.wprime_value, 0.0);
        assert_eq!(brute_wprime(&p, 10, 0.3), 0.0);
        assert!(modulus_wprime(&p, 1.0, 1.5).is_err());
    }

    #[test]
    fn wprime_matches_brute_force_and_is_monotone() {
        let g = grid(10, 1.0);
        let p = CadlagPath::from_fn(g.clone(), 1, |t| vec![(9.1 * t).cos() + if t >= 0.4 { 1.5 } else { 0.0 }]).unwrap();
        let mut last = 0.0;
        for theta in [0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0] {
            let rep = modulus_wprime(&p, 1.0, theta).unwrap();
            let brute = brute_wprime(&p, 10, theta);
            assert!((rep.wprime_value - brute).abs() < 1e-12, "theta {theta}: {} vs {brute}", rep.wprime_value);
            assert!(rep.wprime_value >= last);
            last = rep.wprime_value;
            assert!(rep.wprime_value <= modulus_w(&p, 1.0, 2.0 * theta).unwrap() + 1e-12);
        }
    }

    #[test]
    fn subdivision_rescores_exactly() {
        let g = grid(20, 1.0);
        let p = CadlagPath::from_fn(g.clone(), 1, |t| vec![(13.0 * t).sin() * t + if t >= 0.55 { 1.0 } else { 0.0 }]).unwrap();
        let rep = modulus_wprime(&p, 1.0, 0.15).unwrap();
        let sub = &rep.subdivision;
        assert_eq!(sub[0], 0.0);
        assert_eq!(*sub.last().unwrap(), 1.0);
        let mut worst: f64 = 0.0;
        for (i, w) in sub.windows(2).enumerate() {
            assert!(w[1] - w[0] >= 0.15 - 1e-12);
            let o = if i + 2 == sub.len() {
                oscillation_closed(&p, w[0], w[1]).unwrap()
            } else {
                oscillation(&p, w[0], w[1]).unwrap()
            };
            worst = worst.max(o);
        }
        assert_eq!(worst, rep.wprime_value);
    }

    #[test]
    fn multidimensional_moduli() {
        let g = grid(8, 1.0);
        let p = CadlagPath::from_fn(g.clone(), 2, |t| vec![t, if t >= 0.5 { 1.0 } else { 0.0 }]).unwrap();
        let w = modulus_w(&p, 1.0, 0.125).unwrap();
        assert!((w - (0.125f64.powi(2) + 1.0).sqrt()).abs() < 1e-12);
        let rep = modulus_wprime(&p, 1.0, 0.25).unwrap();
        // 0, 0.25, 0.5, 0.75, 1 leaves 0.25 on the closed last interval.
        assert_eq!(rep.wprime_value, 0.25);
    }

    #[test]
    fn tightness_constant_paths_pass() {
        let g = grid(16, 1.0);
        let ens: Vec<Vec<CadlagPath<f64>>> = (0..3)
            .map(|n| vec![CadlagPath::constant(g.clone(), &[3.0 - 0.1 * n as f64]); 5])
            .collect();
        let v = tightness_check(&ens, &TightnessConfig::new(1.0, 0.05, vec![0.5])).unwrap();
        assert!(v.pass);
        assert_eq!(v.k, Some(4.0));
        assert_eq!(v.theta_per_alpha, vec![(0.5, Some(1.0))]);
    }

    #[test]
    fn tightness_converging_single_paths_pass() {
        let g = grid(32, 1.0);
        let ens: Vec<Vec<CadlagPath<f64>>> =
            (1..6).map(|n| vec![step(&g, &[(0.5 + 1.0 / (1 << (n + 1)) as f64, 1.0)])]).collect();
        let v = tightness_check(&ens, &TightnessConfig::new(1.0, 0.05, vec![0.5, 0.25])).unwrap();
        assert!(v.pass, "{v:?}");
        assert_eq!(v.k, Some(1.0));
    }

    #[test]
    fn tightness_violator_fails_named() {
        let g = grid(8, 1.0);
        let mut cfg = TightnessConfig::new(1.0, 0.05, vec![0.5]);
        cfg.k_cap = 64.0;
        let ens = vec![vec![CadlagPath::constant(g.clone(), &[1000.0])]];
        let v = tightness_check(&ens, &cfg).unwrap();
        assert!(!v.pass);
        assert_eq!(v.failed, vec![COMPACT_CONTAINMENT.to_string()]);
        assert!(tightness_check::<f64, Vec<CadlagPath<f64>>>(&[], &cfg).is_err());
        cfg.epsilon = 1.0;
        assert!(matches!(tightness_check(&ens, &cfg), Err(SkorokhodError::BadEpsilon(_))));
    }

    #[test]
    fn skorokhod_distance_examples() {
        let g = grid(64, 1.0);
        let p = step(&g, &[(0.25, 1.0)]);
        assert_eq!(skorokhod_distance(&p, &p).unwrap(), 0.0);
        for d in [1, 3, 8] {
            let delta = d as f64 / 64.0;
            let q = step(&g, &[(0.25 + delta, 1.0)]);
            let dist = skorokhod_distance(&p, &q).unwrap();
            assert!(dist <= delta + 1e-12, "{dist} > {delta}");
            assert!(dist > 0.0);
            assert!((dist - skorokhod_distance(&q, &p).unwrap()).abs() <= 1e-9);
        }
        let a = CadlagPath::constant(g.clone(), &[1.0, 2.0]);
        let b = CadlagPath::constant(g.clone(), &[1.5, 2.0]);
        assert_eq!(skorokhod_distance(&a, &b).unwrap(), 0.5);
        let other = CadlagPath::constant(grid(8, 2.0), &[1.0, 2.0]);
        assert_eq!(skorokhod_distance(&a, &other), Err(SkorokhodError::HorizonMismatch));
    }
}
