//! Metric–phase field surface reconstruction from unoriented point clouds.

pub mod cli;
pub mod config;
pub mod dual;
pub mod extract;
pub mod field;
pub mod fixtures;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod math;
pub mod pipeline;
pub mod spatial;
pub mod trainer;
