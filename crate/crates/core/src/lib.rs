//! Partially reversible 3D U-Net: tensor engine, reversible sequences,
//! architecture builder, analytic memory model and training harness.

pub mod engine;
pub mod error;
mod kv;
pub mod memory;
pub mod reversible;
pub mod training;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
