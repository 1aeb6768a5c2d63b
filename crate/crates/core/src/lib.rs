//! Prototype-guided pseudo-label rectification and expansion for
//! weakly-supervised domain adaptation on synthetic multiband rasters.

pub mod error;
pub mod evalkit;
pub mod lossfns;
pub mod numcore;
pub mod protobank;
pub mod pseudolab;
pub mod segmodel;
pub mod synthdomain;
pub mod trainer;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
