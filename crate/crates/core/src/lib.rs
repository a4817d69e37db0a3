//! Joint image inpainting and arbitrary-scale super-resolution with a
//! detail-enhanced, mask-aware implicit image representation.

pub mod attention;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod imaging;
pub mod implicit;
pub mod importance;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod trainer;

pub use error::{DearError, Result};
