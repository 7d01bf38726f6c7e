//! Training, evaluation and reporting driver for the `agegrad` models.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod io;
pub mod plot;
pub mod report;
pub mod trainer;
