pub mod autograd;
pub mod error;
pub mod harness;
pub mod io;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod projector;
pub mod recon;
pub mod trainer;
pub mod volumegen;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets run as doc tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/reconstruction.md")]
    mod reconstruction {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
