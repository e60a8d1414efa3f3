pub mod align;
pub mod checks;
pub mod config;
pub mod error;
pub mod exactcheck;
pub mod numerics;
pub mod oracles;
pub mod prefdata;
pub mod semionline;
pub mod seqmodel;
pub mod task;

pub use error::{Error, Result};
