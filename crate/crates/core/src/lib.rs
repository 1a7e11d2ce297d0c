//! Edge detection on grayscale images by modeling stationary wavelet
//! transform coefficients with two-state (non-edge / edge) hidden Markov
//! models.
//!
//! The pipeline is:
//!
//! 1. undecimated Haar transform ([`swt`]), every subband at full resolution;
//! 2. a Gaussian (small) / Laplacian (big) mixture per coefficient
//!    ([`stat_models`]);
//! 3. either a within-scale hidden Markov chain ([`hmc`]) or an across-scale
//!    hidden Markov tree ([`hmt`]), trained by EM;
//! 4. MAP decoding of the hidden states and fusion of the finest-scale
//!    subband labels into a binary edge map ([`pipeline`]).

pub mod cli;
pub mod error;
pub mod hmc;
pub mod hmt;
pub mod image_io;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod stat_models;
pub mod swt;

pub use error::{Error, Result};
pub use image_io::GrayImage;

pub use pipeline::{detect_edges, DetectConfig, EdgeMap, StatePlane};
pub use swt::{Orientation, Plane, SwtPyramid, Wavelet};
