//! Shape-adaptive assist-as-needed therapy: impedance simulation, motion
//! preference encoding, kernelized via-point deformation, the iterative
//! therapy policy, PLS skill models, metrics and comparison controllers.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod baselines;
pub mod config;
pub mod error;
pub mod gmm;
pub mod kmp;
pub mod linalg;
pub mod metrics;
pub mod policy;
pub mod scenario;
pub mod simdyn;
pub mod skill;
pub mod task;
pub mod trajectory;
pub mod viapoint;

pub use error::{Error, Result};

// Every chapter of the guide is a doc-test module, so `cargo test --doc`
// runs its listings against the current library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/preference.md")]
    mod preference {}
    #[doc = include_str!("../../../book/src/deformation.md")]
    mod deformation {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/skill.md")]
    mod skill {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
