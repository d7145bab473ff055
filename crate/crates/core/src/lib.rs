//! Simulation and verification toolkit for path-dependent SDEs with jumps on
//! the space of cadlag paths.

pub mod continuity;
pub mod events;
pub mod experiment;
pub mod generator;
pub mod maf;
pub mod parallel;
pub mod path;
pub mod projectors;
pub mod rng;
pub mod scalar;
pub mod sde;
pub mod skorokhod;
pub mod stats;

pub use path::{CadlagPath, InitialCondition, PathError, PathView, TimeGrid};
pub use rng::Seed;
pub use scalar::Real;

pub type Grid = TimeGrid<f64>;
pub type Path = CadlagPath<f64>;
pub type Initial = InitialCondition<f64>;
pub type Grid32 = TimeGrid<f32>;
pub type Path32 = CadlagPath<f32>;
