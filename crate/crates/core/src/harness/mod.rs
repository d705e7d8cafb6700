//! Experiment layer: data, initialisation, optimiser, training and
//! evaluation for the sorting and mosaic tasks.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod idx;
pub mod init;
pub mod model;
pub mod train;
