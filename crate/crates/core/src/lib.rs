//! Adaptive query augmentation for multimodal embedders.
//!
//! A small causal transformer is trained jointly to embed (contrastive loss on
//! the end-of-sequence hidden state) and to generate (autoregressive loss on a
//! control-token-prefixed target). At inference it first emits `/augment` or
//! `/embed`; only in the first case does it generate an augmentation before
//! the final embedding, reusing the query prefix in a single pass.

pub mod cli;
pub mod corpus;
pub mod division;
pub mod evaluation;
pub mod model;
pub mod routing;
pub mod synthesis;
pub mod training;
pub mod vocab;
