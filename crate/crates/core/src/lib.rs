pub mod analysis;
pub mod cif;
pub mod cli;
pub mod error;
pub mod fixedsub;
pub mod guidance;
pub mod harness;
pub mod par;
pub mod segmenters;
pub mod seqcore;

pub use error::{Error, Result};
