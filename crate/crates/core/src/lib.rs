//! Core of the streaming-translation policy lab.
//!
//! Everything here is pure computation over `alloc` collections: a small
//! reverse-mode autodiff engine, synthetic streaming tasks with an exact
//! enumeration oracle, a micro encoder-decoder with a READ/WRITE policy head,
//! the training objectives and loops, the chunked streaming decoder, and the
//! latency/quality metrics. File formats, configuration and the command line
//! live in the `reina-lab` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod checks;
pub mod decoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
