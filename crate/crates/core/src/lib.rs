//! Numerical laboratory for mesoscopic Coulomb gases in dimension `d ≥ 3`.

mod entropic;
pub mod error;
pub mod equilibrium;
pub mod gibbs;
pub mod kernel;
pub mod linalg;
pub mod construction;
pub mod measures;
pub mod rate;

pub use error::{Error, Result};
