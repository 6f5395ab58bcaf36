//! Desk-scale laboratory for bidirectional reasoning alignment.
//!
//! The pipeline generates paired forward/reverse reasoning corpora from
//! invertible modular-arithmetic chains, fine-tunes a tiny from-scratch
//! transformer (SFT, then DPO against a frozen reference), and measures
//! learning dynamics with per-token log-probability probes: ALP of the
//! preferred and rejected responses, their margin, first-order influence
//! predictions, and oracle-graded task accuracy.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod textcodec;

pub mod dpo;
pub mod pipeline;
pub mod probes;
pub mod sft;
pub mod svg;

pub use error::{Error, Result};
