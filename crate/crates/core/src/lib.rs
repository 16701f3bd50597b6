//! Token-level recoverability probing and mutual-information lower bounds.
//!
//! The crate reads per-layer embedding dumps produced by a model-side
//! extractor, fits a linear decoder that predicts each input token from its
//! hidden state, and converts the decoder's accuracy into Fano-style lower
//! bounds on token- and sentence-level mutual information.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`corpus`] | `MIPD` dump format, manifests, vocabulary, length buckets |
//! | [`probe`] | linear decoder, BCE-with-logits training, recoverability |
//! | [`bounds`] | binary entropy, Fano token bound, compositional sentence bound |
//! | [`oracle`] | exact brute-force information quantities on finite joints |
//! | [`metrics`] | token F1, BLEU-{1,2,4}, ROUGE-{1,L}, cosine |
//! | [`report`] | experiment drivers behind the `tokenmi` CLI |
//! | [`synth`] | synthetic corpora with known structure |

pub mod bounds;
pub mod corpus;
mod error;
pub mod metrics;
pub mod oracle;
pub mod probe;
pub mod report;
pub mod synth;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};

/// Version string embedded in every report artifact.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
