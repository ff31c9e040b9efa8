pub mod arch;
pub mod binmath;
pub mod config;
pub mod data;
pub mod encode;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod persist;
pub mod qat;
pub mod replay;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Book chapters, compiled so their code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/persist.md")]
    mod persist {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
