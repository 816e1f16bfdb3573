pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod gallery;
pub mod imaging;
pub mod localizer;
pub mod matcher;
pub mod synth;
pub mod vehicle_filter;

pub use error::{Error, Result};
