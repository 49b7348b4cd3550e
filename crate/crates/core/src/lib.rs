pub mod error;
pub mod gendist;
pub mod rng;
pub mod seqio;

pub use error::{Error, Result};
pub mod acceptance;
pub mod datasyn;
pub mod dnadecode;
pub mod embedspace;
pub mod evalkit;
pub mod experiments;
pub mod neuralcore;
pub mod phylo;
pub mod recognet;
