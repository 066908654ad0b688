//! Multilingual instruction tuning and preference optimization on a small
//! byte-level transformer: synthetic worlds, teacher protocols, supervised
//! fine-tuning, reward modelling, PPO and multiple-choice evaluation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod infer;
pub mod language;
pub mod lm;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod ppo;
pub mod protocol;
pub mod reward;
pub mod rouge;
pub mod selfinstruct;
pub mod sft;
pub mod synth;
pub mod teacher;
pub mod tokenizer;

pub use error::{Error, Result};
