//! Dialog-act controlled response generation with hierarchical disentangled
//! self-attention.
//!
//! Dialog acts (`domain-action-slot` triplets) are mapped onto a layered act
//! graph whose nodes switch individual attention heads of a stacked decoder
//! on and off. The crate contains everything needed to train and evaluate
//! that pipeline on small corpora: a reverse-mode tensor engine, the history
//! encoder, the multi-label act predictor, the gated decoder with beam
//! search, corpus tooling with a synthetic grammar, and evaluation metrics.


pub mod act_graph;
pub mod act_predictor;
pub mod corpus;
pub mod decoder;
pub mod dsa;
pub mod encoder;
pub mod metrics;
mod error;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
