//! Style-conditioned handwritten word generation with local patch critics.
//!
//! The crate trains a word-image generator against a global discriminator and
//! optionally one of three local patch critics (sliding-window, attention
//! centered, or character conditioned), and evaluates the output with FID,
//! character error rate and recognition loss.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod fixture;
pub mod losses;
pub mod nets;
pub mod nn;
pub mod patchcrit;

pub use config::RunConfig;
pub use corpus::{Alphabet, CorpusSplit, WordSample, WriterGroup};
pub use losses::{LossTerms, TrainMode};
pub use nets::{AttentionTrace, ContentEncoding, Models, RecognizerOutput, StyleVector};
pub use patchcrit::{Patch, PatchSet};
