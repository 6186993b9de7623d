//! Consistent tokenization for extractive sequence-to-sequence data.
//!
//! When a generative model is trained to produce a span of its input, the
//! target is usually tokenized on its own. With byte-level BPE the standalone
//! tokenization of a span often differs from how the same characters were
//! tokenized inside the input (a leading space, a digit run split
//! differently, punctuation glued to a neighbour). This crate detects those
//! mismatches and repairs targets by slicing token ids straight out of the
//! tokenized input.
//!
//! The pieces:
//!
//! * [`bpe`]: byte-level BPE with exact byte offsets.
//! * [`align`]: character, byte and token span conversion; token
//!   subsequence search.
//! * [`consist`]: consistency verdicts, the repair ladder, dataset analysis
//!   and repair.
//! * [`mrqa`]: streaming MRQA-format reader and writer, prediction files.
//! * [`metrics`]: SQuAD-style EM/F1, out-of-context detection and paired
//!   significance testing.
//! * [`par`]: data-parallel helpers with a sequential fallback.

pub mod align;
pub mod bpe;
pub mod consist;
pub mod metrics;
pub mod mrqa;
pub mod par;

pub use align::{CharSpan, SpanConvention, TokenSpan};
pub use bpe::{ByteSpan, Encoding, TokenId, Tokenizer};
pub use consist::{ConsistencyStats, ConsistencyStatus, FixMethod, FixOutcome};
pub use mrqa::{DatasetHeader, ExtractiveExample, PredictionSet};
