//! Simultaneous machine translation with latency-tailored training references.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece of
//! the system: Wait-k read policies, the synthetic parallel-corpus generator,
//! BLEU / Average Lagging / anticipation / hallucination metrics, the CTC
//! machinery, a small encoder–decoder Transformer with hand-written
//! backpropagation, and the non-autoregressive *tailor* that rewrites ground
//! truth into latency-appropriate references.
//!
//! Everything touching the file system lives in the companion `simt` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod ctc;
pub mod data;
mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tailor;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_policy, waitk_policy, AlignmentSet, ParallelSample, ReadPolicy, TokenId, TokenSeq, Vocabulary,
};
