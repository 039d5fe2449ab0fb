//! Translation-memory augmented neural machine translation, at desk scale.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithm of the
//! laboratory: corpus handling, a reverse-mode autodiff engine, fuzzy TM
//! retrieval, three transformer architectures, the ensemble inference modes,
//! bias-variance estimation and evaluation metrics. File formats, IO and the
//! command line live in the `tmlab` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod biasvar;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod model;
pub mod num;
pub mod retrieval;
pub mod rng;

pub use error::{Error, Result};
