pub mod data;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nets;
pub mod rng;
pub mod theory;
pub mod tol;
