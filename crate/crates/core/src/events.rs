//! Conditioning events: finite truncations of the π-system generated by
//! cylinders `{ω(t_1) ∈ B(x_1, r_1), ..., ω(t_k) ∈ B(x_k, r_k)}`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::path::{CadlagPath, PathError, TimeGrid};
use crate::rng::Seed;
use crate::scalar::{distance, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("event `{label}` looks at the path after t = {t}")]
    Anticipating { label: String, t: f64 },
    #[error("event bank is empty")]
    EmptyBank,
}

/// An indicator `1_G(ω)`.
pub trait PathEvent<T: Real>: Send + Sync {
    /// Declared latest time the event depends on.
    fn time(&self) -> T;
    fn contains(&self, path: &CadlagPath<T>) -> bool;
    fn label(&self) -> String;
}

/// Open ball constraint `ω(time) ∈ B(center, radius)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ball<T> {
    pub time: T,
    pub center: Vec<T>,
    pub radius: T,
}

/// Cylinder event; `Whole` is `Ω`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Event<T> {
    Whole,
    Cylinder(Vec<Ball<T>>),
    /// `{ω(time)_coord > level}`.
    Above { time: T, coord: usize, level: T },
}

impl<T: Real> Event<T> {
    pub fn ball(time: T, center: Vec<T>, radius: T) -> Self {
        Event::Cylinder(vec![Ball { time, center, radius }])
    }
}

fn fmt_vec<T: Real>(v: &[T]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{}", x.as_f64())).collect();
    format!("({})", parts.join(","))
}

impl<T: Real> PathEvent<T> for Event<T> {
    fn time(&self) -> T {
        match self {
            Event::Whole => T::zero(),
            Event::Cylinder(balls) => balls.iter().map(|b| b.time).fold(T::zero(), T::max),
            Event::Above { time, .. } => *time,
        }
    }

    fn contains(&self, path: &CadlagPath<T>) -> bool {
        match self {
            Event::Whole => true,
            Event::Cylinder(balls) => balls.iter().all(|b| match path.evaluate(b.time) {
                Ok(x) => distance(x, &b.center) < b.radius,
                Err(_) => false,
            }),
            Event::Above { time, coord, level } => path.evaluate(*time).map(|x| x[*coord] > *level).unwrap_or(false),
        }
    }

    fn label(&self) -> String {
        match self {
            Event::Whole => "whole".into(),
            Event::Cylinder(balls) => balls
                .iter()
                .map(|b| format!("B(t={},c={},r={})", b.time.as_f64(), fmt_vec(&b.center), b.radius.as_f64()))
                .collect::<Vec<_>>()
                .join("&"),
            Event::Above { time, coord, level } => format!("X{}({})>{}", coord + 1, time.as_f64(), level.as_f64()),
        }
    }
}

/// Centre offsets `0, −1, 1, −2, 2, ...`.
fn lattice(j: usize) -> i64 {
    let h = j.div_ceil(2) as i64;
    if j % 2 == 1 {
        -h
    } else {
        h
    }
}

/// Deterministic bank of `size` events measurable at time `t`.
///
/// The bank starts with `Ω` and then cycles through balls at `t`, balls at
/// the grid node at or before `t/2`, and their intersection, with centres on
/// the lattice `x0 + j · spacing · (1, ..., 1)` for `j = 0, −1, 1, −2, ...`
/// and radius `spacing`.
pub fn event_bank<T: Real>(grid: &TimeGrid<T>, t: T, x0: &[T], size: usize, spacing: T) -> Result<Vec<Event<T>>, PathError> {
    let k = grid.node_index(t)?;
    let half = grid.time(grid.snap(t * T::half())?);
    let t = grid.time(k);
    let mut out = Vec::with_capacity(size);
    if size > 0 {
        out.push(Event::Whole);
    }
    let mut j = 0;
    while out.len() < size {
        let c: Vec<T> = x0.iter().map(|&x| x + T::lit(lattice(j) as f64) * spacing).collect();
        let at_t = Ball { time: t, center: c.clone(), radius: spacing };
        let at_half = Ball { time: half, center: c, radius: spacing };
        for e in [
            Event::Cylinder(vec![at_t.clone()]),
            Event::Cylinder(vec![at_half.clone()]),
            Event::Cylinder(vec![at_half, at_t]),
        ] {
            if out.len() < size {
                out.push(e);
            }
        }
        j += 1;
    }
    Ok(out)
}

/// Checks that `event` ignores the path strictly after `t`, both by its
/// declared time and by perturbing sample paths after `t`.
pub fn probe_non_anticipative<T: Real>(
    event: &dyn PathEvent<T>,
    t: T,
    samples: &[CadlagPath<T>],
    seed: Seed,
) -> Result<(), EventError> {
    let fail = || EventError::Anticipating { label: event.label(), t: t.as_f64() };
    if event.time() > t {
        return Err(fail());
    }
    for (i, p) in samples.iter().enumerate() {
        let k = p.grid().locate(t)?;
        let mut rng = seed.stream(i as u64);
        let mut q = p.clone();
        let m = p.dim();
        let vals = q.values_mut();
        for v in vals[(k + 1) * m..].iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = *v + T::lit(10.0 * z);
        }
        if event.contains(p) != event.contains(&q) {
            return Err(fail());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    struct Peek;

    impl PathEvent<f64> for Peek {
        fn time(&self) -> f64 {
            0.0
        }
        fn contains(&self, path: &CadlagPath<f64>) -> bool {
            path.node(path.grid().last_index())[0] > 0.0
        }
        fn label(&self) -> String {
            "peek".into()
        }
    }

    #[test]
    fn bank_shape() {
        let g = TimeGrid::uniform(1.0, 0.125).unwrap();
        let bank = event_bank(&g, 0.75, &[0.0], 8, 0.25).unwrap();
        assert_eq!(bank.len(), 8);
        assert_eq!(bank[0], Event::Whole);
        assert!(bank.iter().all(|e| e.time() <= 0.75));
        let labels: std::collections::BTreeSet<_> = bank.iter().map(|e| e.label()).collect();
        assert_eq!(labels.len(), 8);
        // t/2 = 0.375 snaps to the node 0.375
        assert_eq!(bank[2].time(), 0.375);
        assert!(event_bank(&g, 0.3, &[0.0], 8, 0.25).is_err());
    }

    #[test]
    fn cylinder_membership() {
        let g = Arc::new(TimeGrid::uniform(1.0, 0.25).unwrap());
        let p = CadlagPath::new(g, 1, vec![0.0, 0.1, 0.5, 0.9, 1.0]).unwrap();
        assert!(Event::ball(0.25, vec![0.0], 0.2).contains(&p));
        assert!(!Event::ball(0.5, vec![0.0], 0.5).contains(&p));
        let both = Event::Cylinder(vec![
            Ball { time: 0.25, center: vec![0.0], radius: 0.2 },
            Ball { time: 0.75, center: vec![1.0], radius: 0.2 },
        ]);
        assert!(both.contains(&p));
        assert!(Event::Above { time: 1.0, coord: 0, level: 0.95 }.contains(&p));
    }

    #[test]
    fn anticipation_is_caught() {
        let g = Arc::new(TimeGrid::uniform(1.0, 0.125).unwrap());
        let samples: Vec<_> = (0..4).map(|i| CadlagPath::constant(g.clone(), &[i as f64 * 0.1])).collect();
        assert!(probe_non_anticipative(&Event::ball(0.5, vec![0.0], 0.3), 0.5, &samples, Seed(1)).is_ok());
        assert!(probe_non_anticipative(&Event::ball(0.75, vec![0.0], 0.3), 0.5, &samples, Seed(1)).is_err());
        assert!(probe_non_anticipative(&Peek, 0.5, &samples, Seed(1)).is_err());
    }
}
