//! Table-tagging aspect-sentiment triplet extraction with a stripe-attention
//! relation encoder.
//!
//! ```text
//! tokens -> embedding -> biaffine table -> conv3 -> [stripe layer + loop shift] x N
//!        -> weighted residual -> TL/BR vertices -> candidate rectangles -> triplets
//! ```

pub mod data;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod par;
pub mod stripe_attention;
pub mod table_encoder;
pub mod tagging;
pub mod tt_encoder;

pub use error::{Error, Result};
