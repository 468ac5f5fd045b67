pub mod backproject;
pub mod camera;
pub mod detect;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod mask;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
