pub mod attack;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod par;
pub mod raster;
pub mod scenesim;
pub mod sitnet;
pub mod store;

pub use error::{Error, Result};
