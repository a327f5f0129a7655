//! Convolutional additive token mixer (CATM) and CAS-ViT backbones on a small
//! reverse-mode autograd core.
//!
//! Start with [`backbone::build_variant`] for whole models, [`catm`] for the
//! mixer itself and [`accounting`] for parameter and MAC counts. The guide in
//! `book/` walks through each piece with runnable examples.

pub mod accounting;
pub mod autograd;
pub mod backbone;
pub mod catm;
pub mod error;
pub mod harness;
pub mod mixers;
pub mod nn;
pub mod tensor;

pub use error::{Error, FormatCode, Result};
pub use tensor::{DType, Scalar, Tensor};

// The guide's snippets run as doc-tests so it cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/catm.md")]
    mod catm {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/accounting.md")]
    mod accounting {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/benchmarking.md")]
    mod benchmarking {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
