//! Pool-based deep active learning with augmentation-based uncertainty and
//! consistency-regularized training, on a small `f64` autograd engine.
//!
//! The guide in `book/` walks through each module; its snippets run as
//! doc-tests of this crate.

pub mod active;
pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod uncertainty;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autograd.md")]
    pub struct Autograd;
    #[doc = include_str!("../../../book/src/models.md")]
    pub struct Models;
    #[doc = include_str!("../../../book/src/augmentation.md")]
    pub struct Augmentation;
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    pub struct Uncertainty;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/active-loop.md")]
    pub struct ActiveLoop;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub struct Reproducibility;
    #[doc = include_str!("../../../book/src/harness.md")]
    pub struct Harness;
}
