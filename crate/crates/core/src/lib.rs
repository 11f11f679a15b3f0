//! Optimal control of perturbed sweeping processes whose moving set is a
//! translated polyhedral cone, with discrete and continuous optimality
//! certificates and an exact solver for the one-dimensional crowd model.

pub mod certificates;
pub mod config;
pub mod cost;
pub mod crowd;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod optimizer;
pub mod transcription;

pub use error::{Error, Result};
pub use geometry::{
    active_set, coderivative_generators, decompose_normal, featured_sets, project, CoderivativeGenerators,
    ConeDecomposition, Polyhedron,
};
