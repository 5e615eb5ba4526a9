//! Dense-retrieval training that tolerates mismatched query-document pairs.
//!
//! A small dual encoder is trained contrastively; after a warmup phase each
//! epoch scores every pair's perplexity against in-batch negatives, fits a
//! two-component Gaussian mixture to separate clean from mismatched pairs,
//! and trains with `flag * L_cont + KL(student || teacher)` where the
//! teacher is an exponential moving average of the student.
//!
//! Modules follow the pipeline: [`data`] (loading, synthetic corpora, noise
//! injection), [`encoder`] (model, analytic gradients, checkpoints),
//! [`detection`], [`correction`], [`training`], [`evaluation`] and [`cli`].

pub mod cli;
pub mod correction;
pub mod data;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod training;

pub use error::{NpcError, Result};
