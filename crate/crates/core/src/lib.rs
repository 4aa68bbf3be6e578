//! Few-shot prompt synthesis and contrastive decoding for textual style
//! transfer.

pub mod corpus;
pub mod embed;
pub mod graph;
pub mod http;
pub mod prompt;
pub mod sampler;
pub mod serde_ext;
pub mod text;
pub mod tuner;
pub mod decode;
pub mod eval;
pub mod negative;
pub mod pipeline;
