//! Reinforcement-learning fine-tuning of a captioning policy with
//! token-level composite rewards, an advantage actor-critic update, and
//! retrieval-based evaluation, on a synthetic scene-captioning task.
//!
//! Module map:
//! - [`textcore`]: vocabulary, tokenization, synthetic scenes and references
//! - [`rewardshape`]: bad-phrase / repetition / missing-eos penalties and returns
//! - [`scorers`]: similarity, ITM aggregation, reference LM, retrieval reward
//! - [`model`]: policy network, value head, decoding, gradients
//! - [`trainer`]: MLE warm start and the three-step RL iteration
//! - [`eval`]: text-to-image retrieval metrics and caption statistics
//! - [`config`]: unified run configuration

pub mod error;
pub mod eval;
pub mod hashing;
pub mod model;
pub mod rewardshape;
pub mod scorers;
pub mod textcore;
pub mod trainer;

pub use error::{Error, Result};
