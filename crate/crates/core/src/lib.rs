//! Class-incremental semantic segmentation with adaptive prototype replay.
//!
//! The crate trains a small convolutional segmenter over a sequence of class
//! groups. Old classes are protected by replaying Gaussian features sampled
//! around stored class prototypes; those prototypes are corrected for
//! representation drift between the previous and current model without any
//! extra training. Two auxiliary losses, an uncertainty penalty on the top-2
//! sigmoid gap and an inverse-distance prototype repulsion, complete the
//! objective.

pub mod adc;
pub mod data_synth;
pub mod error;
pub mod harness;
pub mod losses;
pub mod prototype_store;
pub mod rng;
pub mod segmodel;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
