//! Desk-scale multimodal transformer training framework.

pub mod autograd;
pub mod battery;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod curriculum;
pub mod diagnostics;
pub mod error;
pub mod lora;
pub mod model;
pub mod params;
pub mod taskspec;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{SeededRng, Tensor};
