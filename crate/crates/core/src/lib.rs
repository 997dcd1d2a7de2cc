//! Monocular SLAM with rank-1 factorization visual odometry and an L1
//! similarity pose graph, plus the synthetic experiment harness.
//!
//! Start with [`pipeline::run_slam`]; the book under `book/` walks through
//! every stage.

pub mod baseline;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod geometry;
pub mod pipeline;
pub mod pnp;
pub mod posegraph;
pub mod rank1;
pub mod refine;
pub mod relmotion;
pub mod synth;
pub mod tracks;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/conventions.md")]
    mod conventions {}
    #[doc = include_str!("../../../book/src/windows.md")]
    mod windows {}
    #[doc = include_str!("../../../book/src/rank1.md")]
    mod rank1 {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/posegraph.md")]
    mod posegraph {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
