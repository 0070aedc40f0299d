//! False-positive reduction for pulmonary nodule candidates in CT with a
//! multi-scale gradual-integration 3D CNN.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod patching;
pub mod synthetic;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};
