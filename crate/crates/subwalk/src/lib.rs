//! Subunit random walks on compact manifolds for degenerate subelliptic
//! operators: local universal blocks, chart atlases, the walk and its Markov
//! operator, and the spectral checks built on top.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod expr;
pub mod fefferman_phong;
pub mod manifold;
pub mod markov;
pub mod numeric;
pub mod operator;
pub mod subunit_geometry;
pub mod walk;

/// Scalar type of the geometric and spectral layers.
pub type Real = f64;
