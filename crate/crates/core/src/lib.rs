pub mod align;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod harness;
pub mod heads;
pub mod mae;
pub mod merge;
pub mod numkernel;
pub mod patchstat;
pub mod synth;
pub mod trace;
pub(crate) mod transformer;
pub mod vit;

pub use error::{Error, Result};
