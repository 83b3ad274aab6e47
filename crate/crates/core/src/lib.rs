pub mod attention;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod merge;
pub mod numkit;
pub mod scenekit;

pub use error::{Error, Result};
