//! Cost models, pipeline schedules, timeline simulation and a numerical
//! staleness emulator for parallel diffusion-transformer inference.

pub mod config;
pub mod costmodel;
pub mod error;
pub mod execute;
pub mod freshness;
pub mod model;
pub mod schedule;
pub mod simulate;

pub use error::{Error, Result};
