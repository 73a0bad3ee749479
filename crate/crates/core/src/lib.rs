//! Realistic channel model toolkit.
//!
//! A transformer encoder is pretrained on tokenized multi-domain channel
//! frequency responses (subcarrier x time frame x antenna) with two
//! self-supervised objectives: masked channel prediction and next time frame
//! prediction. The pretrained model is then used as a tool:
//!
//! ```text
//! chansim ──► tokenizer ──► nn ──► pretrain
//!                              │
//!                              ├─► comprehend   (perplexity, scale finding, reconstruction)
//!                              └─► downstream   (contamination, compression, fingerprints, t-SNE)
//! ```

pub mod chansim;
pub mod comprehend;
pub mod downstream;
pub mod error;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};

pub use num_complex::Complex64;
