//! Differentiable sparse-FIR reverberation: learn a reverberator from pairs
//! of dry and wet recordings.
//!
//! The guide under `book/` walks through the crate; its code blocks run as
//! doc-tests of this crate.

pub mod audio;
pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod layers;
pub mod model;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/signals.md")]
    mod signals {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
}
