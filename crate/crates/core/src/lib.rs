//! Berry–Esseen bound certificates for multivariate nonlinear statistics,
//! with Monte Carlo validation.
//!
//! The crate is organised bottom-up: [`linalg`] and [`convex_geom`] supply the
//! geometry, [`stats_core`] the randomness and Gaussian probabilities,
//! [`bound_engine`] the bound formulas, [`distance_lab`] the empirical
//! distances, and [`m_estimation`] / [`asgd`] the two statistical pipelines.

pub mod convex_geom;
pub mod linalg;
pub mod stats_core;
pub mod bound_engine;
pub mod distance_lab;
pub mod m_estimation;
pub mod asgd;
pub mod experiments;
