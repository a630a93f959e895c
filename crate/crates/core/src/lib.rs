//! Contamination-corrected, error-quantified crater counts.
//!
//! The crate turns noisy crater candidate lists (citizen science mark-ups,
//! detector output) into corrected counts with honest error bars:
//!
//! * [`templates`] scores each candidate against a mean-appearance or
//!   derivative crater template over a Gaussian smoothing schedule;
//! * [`scores`] bins the best match scores into 1D or 2D histograms;
//! * [`lpm`] models those histograms as non-negative mixtures of per-class
//!   PMF components (linear Poisson models), fits mixed data with
//!   extended maximum likelihood EM and propagates data and training
//!   sampling errors into a covariance on the class totals;
//! * [`calibrate`] scales contamination-corrected counts against a
//!   reference count to compensate for missed craters;
//! * [`counting_model`] and [`synth`] generate ground-truth-known data
//!   (Poisson populations with Beta efficiencies, rendered scenes), and
//!   [`validate`] runs the bootstrap trial protocol on top of them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibrate;
pub mod counting_model;
pub mod error;
pub mod io;
pub mod lpm;
pub mod raster;
pub mod rng;
pub mod scores;
pub mod synth;
pub mod templates;
pub mod validate;

pub use error::{Error, Result};
pub use raster::GrayRaster;
pub use templates::{Annotation, Label};
