//! Object-centric slot representations injected into a promptable mask
//! decoder, adapted to a shifted target domain by anchor/student/teacher
//! self-training.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod injection;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scenes;
pub mod slot_attention;
pub mod slot_decoder;
pub mod training;

pub use error::{Error, Result};
