//! Eulerian cut finite element solver for the heat equation on a domain moved by
//! a rigid body, with ghost-penalty extension and BDF time stepping.

pub mod ale;
pub mod cutquad;
pub mod error;
pub mod fe;
pub mod forms;
pub mod geometry;
pub mod mesh;
pub mod quadrature;
pub mod solver;
pub mod sparse;
pub mod spaces;
pub mod stepper;
pub mod study;

pub use error::{Error, Result};
