pub mod baseline;
pub mod batch;
pub mod checkpoint;
pub mod code;
pub mod config;
pub mod data;
pub mod error;
pub mod esmr;
pub mod image;
pub mod inpaint;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod rafn;
pub mod scene;
pub mod stn;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
