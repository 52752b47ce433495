//! Vessel-probability-guided 4D reconstruction from rotational DSA
//! projections.
//!
//! A scan is modelled by three implicit fields over the scanned box: a
//! static attenuation field, a time-dependent dynamic attenuation field and a
//! time-independent vessel probability that blends the two. The fields are
//! multiresolution hash encodings followed by small decoders, trained so that
//! line integrals along cone-beam rays match the measured subtraction images.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] and [`phantom`] describe the scanner and an analytic
//!   ground-truth scene;
//! * [`hash_encoding`], [`network`] and [`fields`] are the trainable model;
//! * [`renderer`] and [`trainer`] turn it into an optimisation problem;
//! * [`reconstructor`] and [`metrics`] read out and score the result;
//! * [`dataset_io`] and [`cli`] provide the file formats and command line.

pub mod cli;
pub mod dataset_io;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod hash_encoding;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod real;
pub mod reconstructor;
pub mod renderer;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
