//! Periodic orbits of Tonelli Lagrangians on the flat 2-torus by broken orbits.
//!
//! The crate discretizes the free-period action functional at a fixed energy
//! `k` into a finite-dimensional function on loops of `h` points joined by
//! short Euler–Lagrange arcs, and provides its exact derivatives, index
//! theory, descent and mountain-pass searches, and estimates of the critical
//! energy values.

pub mod action;
pub mod error;
pub mod fixtures;
pub mod flow;
pub mod mane;
pub mod model;
pub mod search;
pub mod shoot;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/segments.md")]
    mod segments {}
    #[doc = include_str!("../../../book/src/action.md")]
    mod action {}
    #[doc = include_str!("../../../book/src/spectrum.md")]
    mod spectrum {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/mane.md")]
    mod mane {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
