//! Desk-scale testbed for end-of-sequence decisions in captioning models.
//!
//! Synthetic scenes are rendered into perception-limited feature slots and
//! captioned at controllable detail levels. A tiny transformer decoder is
//! trained on them with plain or EOS-selective maximum likelihood, training
//! data can be scored and filtered by its effect on EOS supervision, and the
//! resulting models are probed (attention saliency, context manipulation)
//! and evaluated with CHAIR-style hallucination metrics.

pub mod error;
pub mod hallmetrics;
pub mod harness;
pub mod objectives;
pub mod probes;
pub mod scenegen;
pub mod scoring;
pub mod tinylm;

pub use error::{Error, Result};
