//! Reinforced neural extractive summarization.

pub mod cli;
pub mod coherence;
pub mod corpus;
pub mod decode;
pub mod extractor;
pub mod numeric;
pub mod reinforce;
pub mod rouge;
