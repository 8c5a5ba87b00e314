//! Certainty-driven early exit and scheduling for LLM reasoning programs.
//!
//! The crate is organised bottom-up:
//!
//! * [`metrics`] turns sampled answers and rewards into certaindex signals.
//! * [`probe`] handles probe-in-the-middle traces for chain-of-thought models.
//! * [`theory`] holds the distributional stopping machinery.
//! * [`runtime`] models reasoning programs and a seeded synthetic model.
//! * [`scheduler`] decides budgets per program and orders work across them.
//! * [`sim`] plays workloads through a discrete-event serving backend.
//!
//! The guide in `book/` walks through each layer with runnable examples.

// Range checks are written as `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod metrics;
pub mod probe;
pub mod runtime;
pub mod scheduler;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};

// The book's code blocks run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/certaindex.md")]
    mod certaindex {}
    #[doc = include_str!("../../../book/src/probing.md")]
    mod probing {}
    #[doc = include_str!("../../../book/src/stopping.md")]
    mod stopping {}
    #[doc = include_str!("../../../book/src/programs.md")]
    mod programs {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
