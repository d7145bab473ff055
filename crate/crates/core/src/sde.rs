//! Euler simulation of path-dependent SDEs with finite-activity jumps.
//!
//! On `[s, T]` the scheme is
//!
//! ```text
//! X_{k+1} = X_k + β(t_k, X^{t_k}) Δ + σ(t_k, X^{t_k}) √Δ ξ_k
//!         + Σ_j (N_{k,j} − m_j Δ) w(t_k, X^{t_k}, y_j)
//! ```
//!
//! with `ξ_k` standard Gaussian and `N_{k,j} ~ Poisson(m_j Δ)` for every atom
//! `(y_j, m_j)` of the jump measure. Coefficients are evaluated on the path
//! stopped at the left endpoint, which is the discrete form of predictability.
//! The subtracted `m_j Δ w` term compensates the jump integral.
//!
//! Random stream contract: path `i` uses `seed.stream(i)`; each step draws `m`
//! standard normals and then one uniform per atom, in that order.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::parallel;
use crate::path::{same_grid, CadlagPath, InitialCondition, PathError, PathView, TimeGrid};
use crate::rng::Seed;
use crate::scalar::{frobenius, norm, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("jump measure charges the origin (atom {0})")]
    AtomAtOrigin(usize),
    #[error("jump atom {0} has non-positive or non-finite mass")]
    BadMass(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("coefficient evaluation produced a non-finite value at t = {t} (path {path})")]
    NonFinite { t: f64, path: u64 },
    #[error("initial condition lives on a different grid than the engine")]
    GridMismatch,
    #[error("need at least {min} paths, got {got}")]
    TooFewPaths { min: usize, got: usize },
}

/// One atom `mass · δ_y` of the jump measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Atom<T> {
    pub y: Vec<T>,
    pub mass: T,
}

/// Finite positive atomic measure on `ℝ^m` that does not charge `0`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct JumpMeasure<T> {
    atoms: Vec<Atom<T>>,
}

impl<T: Real> JumpMeasure<T> {
    pub fn empty() -> Self {
        Self { atoms: vec![] }
    }

    pub fn new(atoms: Vec<Atom<T>>) -> Result<Self, SimulationError> {
        let dim = atoms.first().map(|a| a.y.len());
        for (i, a) in atoms.iter().enumerate() {
            if Some(a.y.len()) != dim {
                return Err(SimulationError::Dimension { expected: dim.unwrap_or(0), got: a.y.len() });
            }
            if a.y.iter().all(|&v| v == T::zero()) {
                return Err(SimulationError::AtomAtOrigin(i));
            }
            if !(a.mass > T::zero()) || !a.mass.is_finite() || a.y.iter().any(|v| !v.is_finite()) {
                return Err(SimulationError::BadMass(i));
            }
        }
        Ok(Self { atoms })
    }

    /// `mass · δ_y`.
    pub fn single(y: Vec<T>, mass: T) -> Result<Self, SimulationError> {
        Self::new(vec![Atom { y, mass }])
    }

    pub fn atoms(&self) -> &[Atom<T>] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> T {
        self.atoms.iter().map(|a| a.mass).sum()
    }
}

/// Declared sup-norm bounds `‖β‖ ≤ beta`, `‖σ‖_F ≤ sigma`, `‖w‖ ≤ w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientBounds<T> {
    pub beta: T,
    pub sigma: T,
    pub w: T,
}

impl<T: Real> CoefficientBounds<T> {
    pub fn unbounded() -> Self {
        Self { beta: T::infinity(), sigma: T::infinity(), w: T::infinity() }
    }

    pub fn is_bounded(&self) -> bool {
        self.beta.is_finite() && self.sigma.is_finite() && self.w.is_finite()
    }
}

/// The SDE coefficients `β(t, ω)`, `σ(t, ω)` and `w(t, ω, y)`.
///
/// Every method receives the path stopped at the evaluation time, so
/// implementations are non-anticipative by construction. `sigma` is written
/// row-major into an `m × m` buffer.
pub trait Coefficients<T: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn drift(&self, path: &PathView<'_, T>, out: &mut [T]);
    fn diffusion(&self, path: &PathView<'_, T>, out: &mut [T]);
    fn jump(&self, path: &PathView<'_, T>, y: &[T], out: &mut [T]);
    fn bounds(&self) -> CoefficientBounds<T>;
}

/// Drift functionals available as presets.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift<T> {
    /// `β = b`.
    Constant(Vec<T>),
    /// `β = −κ (ω(t) − target)`.
    Markov { kappa: T, target: Vec<T> },
    /// `β = κ sup_{r ≤ t} ω(r)` (componentwise).
    RunningMax { kappa: T },
    /// `β = κ (avg_{[t−L, t]} ω − ω(t))`, time-weighted.
    MovingAverage { kappa: T, window: T },
    /// `β = κ ω(t − lag)`, reading `ω(0)` before time 0.
    Delay { kappa: T, lag: T },
}

/// Preset coefficients: a drift functional clipped in norm, a constant
/// diffusion matrix, and `w(t, ω, y) = jump_scale · y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetCoefficients<T> {
    dim: usize,
    drift: Drift<T>,
    clip: Option<T>,
    sigma: Vec<T>,
    jump_scale: T,
    bounds: CoefficientBounds<T>,
}

impl<T: Real> PresetCoefficients<T> {
    /// Bounds default to what the construction guarantees: the clip level
    /// (or `‖b‖` for constant drift), `‖σ‖_F`, and `|jump_scale| · max ‖y_j‖`.
    pub fn new(
        dim: usize,
        drift: Drift<T>,
        clip: Option<T>,
        sigma: Vec<T>,
        jump_scale: T,
        jumps: &JumpMeasure<T>,
    ) -> Result<Self, SimulationError> {
        if sigma.len() != dim * dim {
            return Err(SimulationError::Dimension { expected: dim * dim, got: sigma.len() });
        }
        let drift_dim = match &drift {
            Drift::Constant(b) => Some(b.len()),
            Drift::Markov { target, .. } => Some(target.len()),
            _ => None,
        };
        if let Some(d) = drift_dim.filter(|&d| d != dim) {
            return Err(SimulationError::Dimension { expected: dim, got: d });
        }
        let beta = match (&drift, clip) {
            (Drift::Constant(b), c) => c.map_or(norm(b), |c| c.min(norm(b))),
            (_, Some(c)) => c,
            (_, None) => T::infinity(),
        };
        let max_y = jumps.atoms().iter().map(|a| norm(&a.y)).fold(T::zero(), T::max);
        let bounds = CoefficientBounds { beta, sigma: frobenius(&sigma), w: jump_scale.abs() * max_y };
        Ok(Self { dim, drift, clip, sigma, jump_scale, bounds })
    }

    /// `β = b`, `σ = s`, `w(y) = y` with exact declared bounds.
    pub fn constant(beta: Vec<T>, sigma: Vec<T>, jumps: &JumpMeasure<T>) -> Result<Self, SimulationError> {
        let dim = beta.len();
        Self::new(dim, Drift::Constant(beta), None, sigma, T::one(), jumps)
    }

    /// Scalar constant model: `β = b`, `σ = s`, `w(y) = y`.
    pub fn scalar(beta: T, sigma: T, jumps: &JumpMeasure<T>) -> Result<Self, SimulationError> {
        Self::constant(vec![beta], vec![sigma], jumps)
    }

    /// Overrides the declared bounds (used to probe admissibility checks).
    pub fn with_bounds(mut self, bounds: CoefficientBounds<T>) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_jump_scale(mut self, scale: T, jumps: &JumpMeasure<T>) -> Self {
        self.jump_scale = scale;
        let max_y = jumps.atoms().iter().map(|a| norm(&a.y)).fold(T::zero(), T::max);
        self.bounds.w = scale.abs() * max_y;
        self
    }

    pub fn drift_kind(&self) -> &Drift<T> {
        &self.drift
    }
}

impl<T: Real> Coefficients<T> for PresetCoefficients<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, path: &PathView<'_, T>, out: &mut [T]) {
        let x = path.current();
        match &self.drift {
            Drift::Constant(b) => out.copy_from_slice(b),
            Drift::Markov { kappa, target } => {
                for ((o, &xi), &ti) in out.iter_mut().zip(x).zip(target) {
                    *o = -*kappa * (xi - ti);
                }
            }
            Drift::RunningMax { kappa } => {
                let m = path.running_max();
                for (o, &mi) in out.iter_mut().zip(m.iter()) {
                    *o = *kappa * mi;
                }
            }
            Drift::MovingAverage { kappa, window } => {
                let t = path.time();
                let a = (t - *window).max(T::zero());
                if t <= a {
                    out.iter_mut().for_each(|o| *o = T::zero());
                } else {
                    let grid = path.grid();
                    out.iter_mut().for_each(|o| *o = T::zero());
                    let mut i = grid.times().partition_point(|&r| r <= a).saturating_sub(1);
                    while i < path.index() {
                        let lo = grid.time(i).max(a);
                        let len = grid.time(i + 1) - lo;
                        for (o, &v) in out.iter_mut().zip(path.node(i)) {
                            *o = *o + v * len;
                        }
                        i += 1;
                    }
                    let span = t - a;
                    for (o, &xi) in out.iter_mut().zip(x) {
                        *o = *kappa * (*o / span - xi);
                    }
                }
            }
            Drift::Delay { kappa, lag } => {
                let lagged = path.evaluate(path.time() - *lag);
                for (o, &v) in out.iter_mut().zip(lagged) {
                    *o = *kappa * v;
                }
            }
        }
        if let Some(c) = self.clip {
            let n = norm(out);
            if n > c {
                let scale = c / n;
                out.iter_mut().for_each(|o| *o = *o * scale);
            }
        }
    }

    fn diffusion(&self, _path: &PathView<'_, T>, out: &mut [T]) {
        out.copy_from_slice(&self.sigma);
    }

    fn jump(&self, _path: &PathView<'_, T>, y: &[T], out: &mut [T]) {
        for (o, &v) in out.iter_mut().zip(y) {
            *o = self.jump_scale * v;
        }
    }

    fn bounds(&self) -> CoefficientBounds<T> {
        self.bounds
    }
}

/// `Poisson(λ)` by inversion, given `p0 = e^{−λ}`.
#[inline]
pub(crate) fn poisson_inversion(u: f64, lambda: f64, p0: f64) -> u32 {
    let mut k = 0u32;
    let mut p = p0;
    let mut cdf = p0;
    while u > cdf && k < 10_000 {
        k += 1;
        p *= lambda / f64::from(k);
        cdf += p;
        if p == 0.0 {
            break;
        }
    }
    k
}

/// Reusable per-worker buffers.
pub struct Workspace<T> {
    beta: Vec<T>,
    sigma: Vec<T>,
    w: Vec<T>,
    xi: Vec<T>,
    running_max: Vec<T>,
    path: Option<CadlagPath<T>>,
}

impl<T: Real> Workspace<T> {
    pub fn new(dim: usize, atoms: usize) -> Self {
        Self {
            beta: vec![T::zero(); dim],
            sigma: vec![T::zero(); dim * dim],
            w: vec![T::zero(); dim * atoms],
            xi: vec![T::zero(); dim],
            running_max: vec![T::zero(); dim],
            path: None,
        }
    }
}

/// Simulation engine: coefficients, jump measure and time grid.
#[derive(Clone)]
pub struct Engine<T: Real> {
    coeffs: Arc<dyn Coefficients<T>>,
    jumps: JumpMeasure<T>,
    grid: Arc<TimeGrid<T>>,
    sqrt_dt: Vec<T>,
    /// `(m_j Δ_k, e^{−m_j Δ_k})` per step and atom, step-major.
    rates: Vec<(f64, f64)>,
}

impl<T: Real> std::fmt::Debug for Engine<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("dim", &self.coeffs.dim())
            .field("jumps", &self.jumps)
            .field("nodes", &self.grid.len())
            .finish()
    }
}

impl<T: Real> Engine<T> {
    pub fn new(
        coeffs: Arc<dyn Coefficients<T>>,
        jumps: JumpMeasure<T>,
        grid: Arc<TimeGrid<T>>,
    ) -> Result<Self, SimulationError> {
        let dim = coeffs.dim();
        if let Some(a) = jumps.atoms().iter().find(|a| a.y.len() != dim) {
            return Err(SimulationError::Dimension { expected: dim, got: a.y.len() });
        }
        let steps = grid.len() - 1;
        let sqrt_dt = (0..steps).map(|k| grid.step(k).sqrt()).collect();
        let mut rates = Vec::with_capacity(steps * jumps.len());
        for k in 0..steps {
            for a in jumps.atoms() {
                let lambda = (a.mass * grid.step(k)).as_f64();
                rates.push((lambda, (-lambda).exp()));
            }
        }
        Ok(Self { coeffs, jumps, grid, sqrt_dt, rates })
    }

    pub fn with_preset(coeffs: PresetCoefficients<T>, jumps: JumpMeasure<T>, grid: Arc<TimeGrid<T>>) -> Result<Self, SimulationError> {
        Self::new(Arc::new(coeffs), jumps, grid)
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients<T>> {
        &self.coeffs
    }

    pub fn jumps(&self) -> &JumpMeasure<T> {
        &self.jumps
    }

    pub fn grid(&self) -> &Arc<TimeGrid<T>> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn workspace(&self) -> Workspace<T> {
        Workspace::new(self.dim(), self.jumps.len())
    }

    pub fn check_init(&self, init: &InitialCondition<T>) -> Result<(), SimulationError> {
        if !same_grid(init.grid(), &self.grid) {
            return Err(SimulationError::GridMismatch);
        }
        if init.dim() != self.dim() {
            return Err(SimulationError::Dimension { expected: self.dim(), got: init.dim() });
        }
        Ok(())
    }

    /// Simulates path `index` of the ensemble started at `init` under `seed`
    /// into `out` (which must be a path on the engine grid).
    pub fn simulate_path_into(
        &self,
        init: &InitialCondition<T>,
        seed: Seed,
        index: u64,
        out: &mut CadlagPath<T>,
        ws: &mut Workspace<T>,
    ) -> Result<(), SimulationError> {
        let m = self.dim();
        let s_idx = init.s_index();
        let last = self.grid.last_index();
        let n_atoms = self.jumps.len();
        let values = out.values_mut();
        values[..(s_idx + 1) * m].copy_from_slice(&init.eta().values()[..(s_idx + 1) * m]);

        ws.running_max.copy_from_slice(&values[..m]);
        for chunk in values[m..(s_idx + 1) * m].chunks(m) {
            for (r, &v) in ws.running_max.iter_mut().zip(chunk) {
                *r = r.max(v);
            }
        }

        let mut rng: ChaCha8Rng = seed.stream(index);
        for k in s_idx..last {
            let (head, tail) = values.split_at_mut((k + 1) * m);
            let view = PathView::new(&self.grid, m, head, Some(&ws.running_max));
            self.coeffs.drift(&view, &mut ws.beta);
            self.coeffs.diffusion(&view, &mut ws.sigma);
            for (j, a) in self.jumps.atoms().iter().enumerate() {
                self.coeffs.jump(&view, &a.y, &mut ws.w[j * m..(j + 1) * m]);
            }
            let dt = self.grid.step(k);
            let sq = self.sqrt_dt[k];
            for x in ws.xi.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x = T::lit(z);
            }
            let x = &head[k * m..];
            let next = &mut tail[..m];
            for i in 0..m {
                let mut diff = T::zero();
                for j in 0..m {
                    diff = diff + ws.sigma[i * m + j] * ws.xi[j];
                }
                next[i] = x[i] + ws.beta[i] * dt + diff * sq;
            }
            for j in 0..n_atoms {
                let (lambda, p0) = self.rates[k * n_atoms + j];
                let u: f64 = rng.random();
                let count = poisson_inversion(u, lambda, p0);
                let net = T::lit(f64::from(count) - lambda);
                for i in 0..m {
                    next[i] = next[i] + net * ws.w[j * m + i];
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SimulationError::NonFinite { t: self.grid.time(k).as_f64(), path: index });
            }
            for (r, &v) in ws.running_max.iter_mut().zip(next.iter()) {
                *r = r.max(v);
            }
        }
        Ok(())
    }

    /// Simulates a single path.
    pub fn simulate_path(&self, init: &InitialCondition<T>, seed: Seed, index: u64) -> Result<CadlagPath<T>, SimulationError> {
        self.check_init(init)?;
        let mut out = init.eta().clone();
        let mut ws = self.workspace();
        self.simulate_path_into(init, seed, index, &mut out, &mut ws)?;
        Ok(out)
    }

    /// Materialises an ensemble of `n_paths` paths.
    pub fn simulate(&self, init: &InitialCondition<T>, n_paths: usize, seed: Seed) -> Result<PathEnsemble<T>, SimulationError> {
        if n_paths == 0 {
            return Err(SimulationError::TooFewPaths { min: 1, got: 0 });
        }
        self.check_init(init)?;
        let paths = parallel::map_indexed(n_paths, |i| self.simulate_path(init, seed, i as u64))?;
        Ok(PathEnsemble { init: init.clone(), seed, paths })
    }

    /// Streams `n_paths` simulated paths through `fold` without storing them.
    ///
    /// Chunks of paths are folded in parallel and merged in index order; the
    /// result is independent of the worker count.
    pub fn fold_paths<A, E, I, F, M>(
        &self,
        init: &InitialCondition<T>,
        n_paths: usize,
        seed: Seed,
        identity: I,
        fold: F,
        merge: M,
    ) -> Result<A, E>
    where
        A: Send,
        E: From<SimulationError> + Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, usize, &CadlagPath<T>) -> Result<(), E> + Sync,
        M: Fn(&mut A, A),
    {
        self.check_init(init)?;
        let out = parallel::fold_indexed(
            n_paths,
            || (identity(), self.workspace()),
            |(acc, ws), i| {
                let mut path = ws.path.take().unwrap_or_else(|| init.eta().clone());
                let res = self.simulate_path_into(init, seed, i as u64, &mut path, ws);
                let res = res.map_err(E::from).and_then(|_| fold(acc, i, &path));
                ws.path = Some(path);
                res
            },
            |a, b| merge(&mut a.0, b.0),
        )?;
        Ok(out.0)
    }

    /// Characteristics `(B, C, ν)` of the scheme along `path` from node `s`.
    pub fn characteristics(&self, path: &CadlagPath<T>, s: T) -> Result<Characteristics<T>, SimulationError> {
        if !same_grid(path.grid(), &self.grid) {
            return Err(SimulationError::GridMismatch);
        }
        let m = self.dim();
        let s_idx = self.grid.node_index(s)?;
        let nodes = self.grid.len();
        let atoms = self.jumps.len();
        let mut b = vec![T::zero(); nodes * m];
        let mut c = vec![T::zero(); nodes * m * m];
        let mut nu = vec![T::zero(); nodes * atoms];
        let mut ws = self.workspace();
        for k in s_idx..nodes {
            let view = path.view(k);
            for (j, a) in self.jumps.atoms().iter().enumerate() {
                self.coeffs.jump(&view, &a.y, &mut ws.w[..m]);
                nu[k * atoms + j] = if ws.w[..m].iter().any(|&v| v != T::zero()) { a.mass } else { T::zero() };
            }
            if k + 1 == nodes {
                break;
            }
            let dt = self.grid.step(k);
            self.coeffs.drift(&view, &mut ws.beta);
            self.coeffs.diffusion(&view, &mut ws.sigma);
            for i in 0..m {
                b[(k + 1) * m + i] = b[k * m + i] + ws.beta[i] * dt;
                for j in 0..m {
                    let mut a = T::zero();
                    for l in 0..m {
                        a = a + ws.sigma[i * m + l] * ws.sigma[j * m + l];
                    }
                    c[(k + 1) * m * m + i * m + j] = c[k * m * m + i * m + j] + a * dt;
                }
            }
        }
        Ok(Characteristics { start_index: s_idx, dim: m, atoms, b, c, nu })
    }
}

/// Sampled paths of an empirical law `ℙ^{s,η}` (uniform weights `1/n`).
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble<T> {
    init: InitialCondition<T>,
    seed: Seed,
    paths: Vec<CadlagPath<T>>,
}

impl<T: Real> PathEnsemble<T> {
    /// Wraps previously simulated paths, e.g. read back from disk.
    pub fn from_paths(init: InitialCondition<T>, seed: Seed, paths: Vec<CadlagPath<T>>) -> Result<Self, SimulationError> {
        for p in &paths {
            if !same_grid(p.grid(), init.grid()) {
                return Err(SimulationError::GridMismatch);
            }
            if p.dim() != init.dim() {
                return Err(SimulationError::Dimension { expected: init.dim(), got: p.dim() });
            }
        }
        Ok(Self { init, seed, paths })
    }

    pub fn paths(&self) -> &[CadlagPath<T>] {
        &self.paths
    }

    pub fn init(&self) -> &InitialCondition<T> {
        &self.init
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn grid(&self) -> &Arc<TimeGrid<T>> {
        self.init.grid()
    }

    /// Fraction of paths that agree bit-for-bit with `η` on `[0, s]`.
    pub fn pinning_fraction(&self) -> f64 {
        let cut = (self.init.s_index() + 1) * self.init.dim();
        let eta = &self.init.eta().values()[..cut];
        let ok = self
            .paths
            .iter()
            .filter(|p| p.values()[..cut].iter().zip(eta).all(|(a, b)| a.to_bits_eq(b)))
            .count();
        ok as f64 / self.paths.len().max(1) as f64
    }
}

impl<T> AsRef<[CadlagPath<T>]> for PathEnsemble<T> {
    fn as_ref(&self) -> &[CadlagPath<T>] {
        &self.paths
    }
}

trait BitEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Real> BitEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        // Equal values with equal sign; NaN never pins.
        *self == *other && self.is_sign_negative() == other.is_sign_negative()
    }
}

/// Semimartingale characteristics on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Characteristics<T> {
    pub start_index: usize,
    pub dim: usize,
    pub atoms: usize,
    /// Drift integral, node-major `m`-vectors; zero up to `s`.
    pub b: Vec<T>,
    /// Continuous-part bracket, node-major row-major `m × m`.
    pub c: Vec<T>,
    /// Jump intensity `m_j 1{w(t, ω, y_j) ≠ 0}`, node-major per atom.
    pub nu: Vec<T>,
}

impl<T: Real> Characteristics<T> {
    pub fn b_at(&self, k: usize) -> &[T] {
        &self.b[k * self.dim..(k + 1) * self.dim]
    }

    pub fn c_at(&self, k: usize) -> &[T] {
        let mm = self.dim * self.dim;
        &self.c[k * mm..(k + 1) * mm]
    }

    pub fn nu_at(&self, k: usize, atom: usize) -> T {
        self.nu[k * self.atoms + atom]
    }
}

/// Witness of a declared bound being exceeded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub coefficient: &'static str,
    pub t: f64,
    pub observed: f64,
    pub declared: f64,
    /// The probing path up to `t`, node-major.
    pub path: Vec<f64>,
}

/// Result of [`validate_coefficients`]. Advisory only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub probes: usize,
    pub max_beta: f64,
    pub max_sigma: f64,
    pub max_w: f64,
    pub bounds_ok: bool,
    pub violations: Vec<BoundViolation>,
    /// Largest observed `‖β(ω) − β(ω')‖ / sup_{r≤t} ‖ω(r) − ω'(r)‖`.
    pub lipschitz_beta: f64,
    pub lipschitz_sigma: f64,
    pub lipschitz_w: f64,
}

const MAX_WITNESSES: usize = 8;

/// Probes boundedness and path-Lipschitz behaviour of the coefficients on
/// random walk paths and perturbed copies of them.
pub fn validate_coefficients<T: Real>(engine: &Engine<T>, probe_budget: usize, seed: Seed) -> AdmissibilityReport {
    let coeffs = engine.coefficients();
    let grid = engine.grid();
    let m = engine.dim();
    let bounds = coeffs.bounds();
    let ys: Vec<Vec<T>> = if engine.jumps().is_empty() {
        vec![vec![T::one(); m]]
    } else {
        engine.jumps().atoms().iter().map(|a| a.y.clone()).collect()
    };
    let mut report = AdmissibilityReport {
        probes: probe_budget.max(1),
        max_beta: 0.0,
        max_sigma: 0.0,
        max_w: 0.0,
        bounds_ok: true,
        violations: vec![],
        lipschitz_beta: 0.0,
        lipschitz_sigma: 0.0,
        lipschitz_w: 0.0,
    };
    let (mut b1, mut b2) = (vec![T::zero(); m], vec![T::zero(); m]);
    let (mut s1, mut s2) = (vec![T::zero(); m * m], vec![T::zero(); m * m]);
    let (mut w1, mut w2) = (vec![T::zero(); m], vec![T::zero(); m]);
    let diff_norm = |a: &[T], b: &[T]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| ((x - y) * (x - y)).as_f64()).sum::<f64>().sqrt()
    };
    for probe in 0..report.probes {
        let mut rng = seed.stream(probe as u64);
        let scale = 4.0f64.powf(rng.random_range(-1.0..2.0));
        let mut values = Vec::with_capacity(grid.len() * m);
        let mut x: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        for k in 0..grid.len() {
            if k > 0 {
                let sq = grid.step(k - 1).as_f64().sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += scale * sq * z;
                }
            }
            values.extend(x.iter().map(|&v| T::lit(v)));
        }
        let k = rng.random_range(0..grid.len());
        let eps = 10f64.powf(rng.random_range(-3.0..0.0));
        let mut perturbed = values.clone();
        for v in perturbed[..(k + 1) * m].iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = *v + T::lit(eps * z);
        }
        let view = PathView::new(grid, m, &values[..(k + 1) * m], None);
        let view2 = PathView::new(grid, m, &perturbed[..(k + 1) * m], None);
        let sup_dist = (0..=k)
            .map(|i| diff_norm(&values[i * m..(i + 1) * m], &perturbed[i * m..(i + 1) * m]))
            .fold(0.0, f64::max);
        let t = grid.time(k).as_f64();
        let check = |name: &'static str, observed: f64, declared: T, report: &mut AdmissibilityReport| {
            if observed > declared.as_f64() * (1.0 + 1e-12) {
                report.bounds_ok = false;
                if report.violations.len() < MAX_WITNESSES {
                    report.violations.push(BoundViolation {
                        coefficient: name,
                        t,
                        observed,
                        declared: declared.as_f64(),
                        path: values[..(k + 1) * m].iter().map(|v| v.as_f64()).collect(),
                    });
                }
            }
        };

        coeffs.drift(&view, &mut b1);
        coeffs.drift(&view2, &mut b2);
        let nb = norm(&b1).as_f64();
        report.max_beta = report.max_beta.max(nb);
        check("beta", nb, bounds.beta, &mut report);

        coeffs.diffusion(&view, &mut s1);
        coeffs.diffusion(&view2, &mut s2);
        let ns = frobenius(&s1).as_f64();
        report.max_sigma = report.max_sigma.max(ns);
        check("sigma", ns, bounds.sigma, &mut report);

        let mut w_lip: f64 = 0.0;
        for y in &ys {
            coeffs.jump(&view, y, &mut w1);
            coeffs.jump(&view2, y, &mut w2);
            let nw = norm(&w1).as_f64();
            report.max_w = report.max_w.max(nw);
            check("w", nw, bounds.w, &mut report);
            w_lip = w_lip.max(diff_norm(&w1, &w2));
        }
        if sup_dist > 0.0 {
            report.lipschitz_beta = report.lipschitz_beta.max(diff_norm(&b1, &b2) / sup_dist);
            report.lipschitz_sigma = report.lipschitz_sigma.max(diff_norm(&s1, &s2) / sup_dist);
            report.lipschitz_w = report.lipschitz_w.max(w_lip / sup_dist);
        }
    }
    report
}
