//! Finitely represented cadlag paths.
//!
//! A path is piecewise constant on a [`TimeGrid`]: the value on
//! `[t_k, t_{k+1})` is the k-th stored point, and the value at the horizon is
//! the last stored point. This is right-continuous with left limits at every
//! node by construction.

use std::borrow::Cow;
use std::io::{BufRead, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::{distance, norm, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("time {t} is not a grid node")]
    NotANode { t: f64 },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("paths live on different grids")]
    GridMismatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("malformed path file: {0}")]
    Parse(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Strictly increasing time nodes starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    times: Vec<T>,
    mesh: T,
    min_gap: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(times: Vec<T>) -> Result<Self, PathError> {
        if times.len() < 2 {
            return Err(PathError::InvalidGrid("need at least two nodes".into()));
        }
        if times[0] != T::zero() {
            return Err(PathError::InvalidGrid("first node must be 0".into()));
        }
        let mut mesh = T::zero();
        let mut min_gap = T::infinity();
        for w in times.windows(2) {
            let gap = w[1] - w[0];
            if !(gap > T::zero()) || !w[1].is_finite() {
                return Err(PathError::InvalidGrid("times must be finite and strictly increasing".into()));
            }
            mesh = mesh.max(gap);
            min_gap = min_gap.min(gap);
        }
        Ok(Self { times, mesh, min_gap })
    }

    /// Uniform grid `0, mesh, 2 mesh, ..., horizon`; `mesh` must divide `horizon`.
    pub fn uniform(horizon: T, mesh: T) -> Result<Self, PathError> {
        if !(mesh > T::zero()) || !(horizon > T::zero()) {
            return Err(PathError::InvalidGrid("horizon and mesh must be positive".into()));
        }
        let steps = (horizon / mesh).round();
        let n = steps
            .to_usize()
            .filter(|&n| n >= 1)
            .ok_or_else(|| PathError::InvalidGrid("mesh too small".into()))?;
        if ((steps * mesh - horizon) / horizon).abs() > T::lit(1e-9) {
            return Err(PathError::InvalidGrid(format!(
                "mesh {mesh} does not divide horizon {horizon}"
            )));
        }
        let mut times: Vec<T> = (0..=n).map(|k| T::count(k) * mesh).collect();
        times[n] = horizon;
        Self::new(times)
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> T {
        self.times[self.times.len() - 1]
    }

    pub fn last_index(&self) -> usize {
        self.times.len() - 1
    }

    /// Largest gap between consecutive nodes.
    pub fn mesh(&self) -> T {
        self.mesh
    }

    pub fn min_gap(&self) -> T {
        self.min_gap
    }

    #[inline]
    pub fn time(&self, k: usize) -> T {
        self.times[k]
    }

    /// `t_{k+1} - t_k`.
    #[inline]
    pub fn step(&self, k: usize) -> T {
        self.times[k + 1] - self.times[k]
    }

    fn tolerance(&self) -> T {
        self.min_gap * T::lit(1e-6)
    }

    fn check_range(&self, t: T) -> Result<(), PathError> {
        let tol = self.tolerance();
        if !(t >= -tol && t <= self.horizon() + tol) {
            return Err(PathError::OutOfRange { t: t.as_f64(), horizon: self.horizon().as_f64() });
        }
        Ok(())
    }

    /// Index `k` with `t ∈ [t_k, t_{k+1})`, or the last index at the horizon.
    pub fn locate(&self, t: T) -> Result<usize, PathError> {
        self.check_range(t)?;
        let k = self.times.partition_point(|&x| x <= t);
        Ok(k.saturating_sub(1))
    }

    /// Floor snap: the last node `t_k <= t` (nodes within a relative 1e-6 of
    /// the minimal gap count as equal to `t`).
    pub fn snap(&self, t: T) -> Result<usize, PathError> {
        self.check_range(t)?;
        let tol = self.tolerance();
        let k = self.times.partition_point(|&x| x <= t + tol);
        Ok(k.saturating_sub(1))
    }

    /// Index of the node equal to `t`, failing when `t` is not a node.
    pub fn node_index(&self, t: T) -> Result<usize, PathError> {
        let k = self.snap(t)?;
        if (self.times[k] - t).abs() <= self.tolerance() {
            Ok(k)
        } else {
            Err(PathError::NotANode { t: t.as_f64() })
        }
    }
}

/// A right-continuous step path `ℝ₊ ⊇ [0, T] → ℝ^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CadlagPath<T> {
    grid: Arc<TimeGrid<T>>,
    dim: usize,
    values: Vec<T>,
}

impl<T: Real> CadlagPath<T> {
    /// `values` holds one `dim`-vector per node, flattened node by node.
    pub fn new(grid: Arc<TimeGrid<T>>, dim: usize, values: Vec<T>) -> Result<Self, PathError> {
        if dim == 0 {
            return Err(PathError::Dimension { expected: 1, got: 0 });
        }
        if values.len() != grid.len() * dim {
            return Err(PathError::Dimension { expected: grid.len() * dim, got: values.len() });
        }
        Ok(Self { grid, dim, values })
    }

    pub fn constant(grid: Arc<TimeGrid<T>>, point: &[T]) -> Self {
        let values = point.iter().copied().cycle().take(grid.len() * point.len()).collect();
        Self { grid, dim: point.len(), values }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Arc<TimeGrid<T>>, dim: usize, mut f: impl FnMut(T) -> Vec<T>) -> Result<Self, PathError> {
        let mut values = Vec::with_capacity(grid.len() * dim);
        for &t in grid.times() {
            let v = f(t);
            if v.len() != dim {
                return Err(PathError::Dimension { expected: dim, got: v.len() });
            }
            values.extend(v);
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &Arc<TimeGrid<T>> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn horizon(&self) -> T {
        self.grid.horizon()
    }

    /// Value at node `k`.
    #[inline]
    pub fn node(&self, k: usize) -> &[T] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// The coordinate `X_t(ω) = ω(t)`.
    pub fn evaluate(&self, t: T) -> Result<&[T], PathError> {
        Ok(self.node(self.grid.locate(t)?))
    }

    /// The path stopped at `t` (snapped down to a node): `r ↦ ω(r ∧ t)`.
    pub fn stop(&self, t: T) -> Result<Self, PathError> {
        Ok(self.stop_at_node(self.grid.snap(t)?))
    }

    pub fn stop_at_node(&self, k: usize) -> Self {
        let mut out = self.clone();
        let (head, tail) = out.values.split_at_mut((k + 1) * self.dim);
        let last = &head[k * self.dim..];
        for chunk in tail.chunks_mut(self.dim) {
            chunk.copy_from_slice(last);
        }
        out
    }

    /// `η ⊗_s ω`: equals `self` on `[0, s)` and `omega` on `[s, T]`.
    pub fn concat(&self, s: T, omega: &Self) -> Result<Self, PathError> {
        if !same_grid(&self.grid, &omega.grid) {
            return Err(PathError::GridMismatch);
        }
        if self.dim != omega.dim {
            return Err(PathError::Dimension { expected: self.dim, got: omega.dim });
        }
        let k = self.grid.node_index(s)?;
        Ok(self.concat_at_node(k, omega))
    }

    pub(crate) fn concat_at_node(&self, k: usize, omega: &Self) -> Self {
        let mut out = omega.clone();
        let cut = k * self.dim;
        out.values[..cut].copy_from_slice(&self.values[..cut]);
        out
    }

    /// Read-only view of the path stopped at node `k`.
    pub fn view(&self, k: usize) -> PathView<'_, T> {
        PathView::new(&self.grid, self.dim, &self.values[..(k + 1) * self.dim], None)
    }

    /// `sup_{r ≤ t_k} ‖ω(r)‖`.
    pub fn sup_norm_until(&self, k: usize) -> T {
        (0..=k).map(|i| norm(self.node(i))).fold(T::zero(), T::max)
    }

    /// Sup distance between two paths on the same grid.
    pub fn sup_distance(&self, other: &Self) -> Result<T, PathError> {
        if !same_grid(&self.grid, &other.grid) {
            return Err(PathError::GridMismatch);
        }
        Ok((0..self.grid.len())
            .map(|k| distance(self.node(k), other.node(k)))
            .fold(T::zero(), T::max))
    }

    /// Writes the `t,x1,...,xm` CSV representation with LF line endings.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut line = String::from("t");
        for i in 1..=self.dim {
            line.push_str(&format!(",x{i}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for k in 0..self.grid.len() {
            line.clear();
            line.push_str(&format!("{}", self.grid.time(k).as_f64()));
            for v in self.node(k) {
                line.push_str(&format!(",{}", v.as_f64()));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Parses a `t,x1,...,xm` CSV file; the grid is read from the `t` column.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, PathError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = reader.headers().map_err(|e| PathError::Parse(e.to_string()))?.clone();
        if headers.get(0) != Some("t") || headers.len() < 2 {
            return Err(PathError::Parse("header must be t,x1,...,xm".into()));
        }
        for (i, h) in headers.iter().enumerate().skip(1) {
            if h != format!("x{i}") {
                return Err(PathError::Parse(format!("unexpected column {h}")));
            }
        }
        let dim = headers.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| PathError::Parse(e.to_string()))?;
            let parse = |s: &str| -> Result<T, PathError> {
                s.parse::<f64>()
                    .map(T::lit)
                    .map_err(|_| PathError::Parse(format!("row {}: bad number {s:?}", row + 1)))
            };
            times.push(parse(&rec[0])?);
            for i in 1..=dim {
                values.push(parse(rec.get(i).ok_or_else(|| PathError::Parse("short row".into()))?)?);
            }
        }
        let grid = TimeGrid::new(times)?;
        Self::new(Arc::new(grid), dim, values)
    }
}

pub(crate) fn same_grid<T: Real>(a: &Arc<TimeGrid<T>>, b: &Arc<TimeGrid<T>>) -> bool {
    Arc::ptr_eq(a, b) || a.times == b.times
}

/// The information available at node `k`: the path stopped at `t_k`.
///
/// Coefficients and functionals only ever see views, so they cannot look past
/// the current time.
#[derive(Debug, Clone)]
pub struct PathView<'a, T> {
    grid: &'a TimeGrid<T>,
    dim: usize,
    values: &'a [T],
    running_max: Option<&'a [T]>,
}

impl<'a, T: Real> PathView<'a, T> {
    /// `values` are the flattened nodes `0..=k`; `running_max`, when given,
    /// must be the componentwise maximum over those nodes.
    pub fn new(grid: &'a TimeGrid<T>, dim: usize, values: &'a [T], running_max: Option<&'a [T]>) -> Self {
        debug_assert!(values.len() >= dim && values.len() % dim == 0);
        Self { grid, dim, values, running_max }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn index(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    #[inline]
    pub fn time(&self) -> T {
        self.grid.time(self.index())
    }

    #[inline]
    pub fn current(&self) -> &'a [T] {
        &self.values[self.values.len() - self.dim..]
    }

    #[inline]
    pub fn node(&self, k: usize) -> &'a [T] {
        let k = k.min(self.index());
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// `ω(r ∧ t)`; times before 0 read the initial value.
    pub fn evaluate(&self, r: T) -> &'a [T] {
        if r >= self.time() {
            return self.current();
        }
        if r <= T::zero() {
            return self.node(0);
        }
        let k = self.grid.times().partition_point(|&x| x <= r).saturating_sub(1);
        self.node(k)
    }

    /// Componentwise `sup_{r ≤ t} ω(r)`.
    pub fn running_max(&self) -> Cow<'a, [T]> {
        match self.running_max {
            Some(m) => Cow::Borrowed(m),
            None => {
                let mut m = self.node(0).to_vec();
                for chunk in self.values.chunks(self.dim).skip(1) {
                    for (a, &b) in m.iter_mut().zip(chunk) {
                        *a = a.max(b);
                    }
                }
                Cow::Owned(m)
            }
        }
    }

    /// `sup_{r ≤ t} ‖ω(r)‖`.
    pub fn sup_norm(&self) -> T {
        self.values.chunks(self.dim).map(norm).fold(T::zero(), T::max)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &'a [T]> {
        self.values.chunks(self.dim)
    }
}

/// A starting point `(s, η)` with `η` constant after `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition<T> {
    s: T,
    s_index: usize,
    eta: CadlagPath<T>,
}

impl<T: Real> InitialCondition<T> {
    /// `s` must be a grid node of `eta`'s grid; `eta` is stopped at `s`.
    pub fn new(s: T, eta: &CadlagPath<T>) -> Result<Self, PathError> {
        let s_index = eta.grid().node_index(s)?;
        Ok(Self::at_node(s_index, eta))
    }

    pub fn at_node(s_index: usize, eta: &CadlagPath<T>) -> Self {
        Self { s: eta.grid().time(s_index), s_index, eta: eta.stop_at_node(s_index) }
    }

    /// `(s, constant path x0)`.
    pub fn constant(grid: Arc<TimeGrid<T>>, s: T, x0: &[T]) -> Result<Self, PathError> {
        let eta = CadlagPath::constant(grid, x0);
        Self::new(s, &eta)
    }

    pub fn s(&self) -> T {
        self.s
    }

    pub fn s_index(&self) -> usize {
        self.s_index
    }

    pub fn eta(&self) -> &CadlagPath<T> {
        &self.eta
    }

    /// `η(s)`.
    pub fn start_point(&self) -> &[T] {
        self.eta.node(self.s_index)
    }

    pub fn grid(&self) -> &Arc<TimeGrid<T>> {
        self.eta.grid()
    }

    pub fn dim(&self) -> usize {
        self.eta.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, h: f64) -> Arc<TimeGrid<f64>> {
        Arc::new(TimeGrid::uniform(h, h / n as f64).unwrap())
    }

    /// 1.0 on [0,1), 2.0 on [1,2].
    fn step_path() -> CadlagPath<f64> {
        CadlagPath::from_fn(grid(8, 2.0), 1, |t| vec![if t < 1.0 { 1.0 } else { 2.0 }]).unwrap()
    }

    // Direct step-convention lookup, independent of partition_point.
    fn oracle(p: &CadlagPath<f64>, t: f64) -> f64 {
        let times = p.grid().times();
        let mut k = 0;
        for (i, &ti) in times.iter().enumerate() {
            if ti <= t {
                k = i;
            }
        }
        p.node(k)[0]
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::<f64>::uniform(1.0, 0.3).is_err());
        let g = TimeGrid::<f64>::uniform(1.0, 0.25).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.mesh(), 0.25);
        assert_eq!(g.snap(0.6).unwrap(), 2);
        assert_eq!(g.node_index(0.75).unwrap(), 3);
        assert!(matches!(g.node_index(0.6), Err(PathError::NotANode { .. })));
    }

    #[test]
    fn evaluate_examples() {
        let c = CadlagPath::constant(grid(4, 1.0), &[3.5]);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(c.evaluate(t).unwrap(), &[3.5]);
        }
        let p = step_path();
        assert_eq!(p.evaluate(1.0).unwrap(), &[2.0]);
        assert_eq!(p.evaluate(0.999).unwrap()[0], oracle(&p, 0.999));
        assert_eq!(p.evaluate(0.999).unwrap(), &[1.0]);
        assert_eq!(p.evaluate(2.0).unwrap(), &[2.0]);
        assert!(matches!(p.evaluate(-0.1), Err(PathError::OutOfRange { .. })));
        assert!(matches!(p.evaluate(2.1), Err(PathError::OutOfRange { .. })));
    }

    #[test]
    fn right_continuity_at_nodes() {
        let p = CadlagPath::from_fn(grid(10, 1.0), 1, |t| vec![(7.0 * t).floor()]).unwrap();
        for k in 0..p.grid().last_index() {
            let tk = p.grid().time(k);
            let mid = 0.5 * (tk + p.grid().time(k + 1));
            assert_eq!(p.evaluate(tk).unwrap(), p.evaluate(mid).unwrap());
        }
    }

    #[test]
    fn stop_examples() {
        let p = step_path();
        assert_eq!(p.stop(2.0).unwrap(), p);
        let c = CadlagPath::constant(grid(4, 1.0), &[1.0, -1.0]);
        assert_eq!(c.stop(0.5).unwrap(), c);
        let stopped = p.stop(0.5).unwrap();
        for &r in p.grid().times() {
            assert_eq!(stopped.evaluate(r).unwrap()[0], oracle(&p, r.min(0.5)));
        }
        assert_eq!(stopped.stop(0.5).unwrap(), stopped);
        assert!(p.stop(3.0).is_err());
    }

    #[test]
    fn concat_examples() {
        let g = grid(8, 2.0);
        let eta = CadlagPath::from_fn(g.clone(), 1, |t| vec![t]).unwrap();
        let omega = CadlagPath::from_fn(g.clone(), 1, |t| vec![-t]).unwrap();
        assert_eq!(eta.concat(0.0, &omega).unwrap(), omega);
        assert_eq!(eta.concat(1.0, &eta).unwrap(), eta);
        let c = eta.concat(1.0, &omega).unwrap();
        for &t in g.times() {
            let expect = if t < 1.0 { t } else { -t };
            assert_eq!(c.evaluate(t).unwrap()[0], expect);
        }
        let other = CadlagPath::constant(grid(4, 2.0), &[0.0]);
        assert_eq!(eta.concat(1.0, &other), Err(PathError::GridMismatch));
    }

    #[test]
    fn view_is_stopped() {
        let p = CadlagPath::from_fn(grid(8, 1.0), 1, |t| vec![(10.0 * t).sin()]).unwrap();
        let v = p.view(3);
        assert_eq!(v.time(), 0.375);
        assert_eq!(v.evaluate(0.9), p.node(3));
        assert_eq!(v.evaluate(-1.0), p.node(0));
        let max = (0..=3).map(|k| p.node(k)[0]).fold(f64::MIN, f64::max);
        assert_eq!(v.running_max()[0], max);
    }

    #[test]
    fn csv_round_trip() {
        let p = CadlagPath::from_fn(grid(4, 1.0), 2, |t| vec![t, 1.0 - 3.0 * t]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2\n0,0,1\n0.25,0.25,0.25\n"));
        assert!(!text.contains('\r'));
        let q = CadlagPath::<f64>::read_csv(&buf[..]).unwrap();
        assert_eq!(q.values(), p.values());
        assert!(CadlagPath::<f64>::read_csv("t,y\n0,1\n1,2\n".as_bytes()).is_err());
        assert!(CadlagPath::<f64>::read_csv("t,x1\n0,1\n0,2\n".as_bytes()).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let g = Arc::new(TimeGrid::<f32>::uniform(1.0, 0.125).unwrap());
        let p = CadlagPath::from_fn(g, 1, |t| vec![if t < 0.5 { 0.0 } else { 1.0 }]).unwrap();
        assert_eq!(p.evaluate(0.5).unwrap(), &[1.0f32]);
        assert_eq!(p.stop(0.25).unwrap().evaluate(1.0).unwrap(), &[0.0f32]);
    }
}
