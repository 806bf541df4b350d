//! Numerical toolkit for dynamic Stackelberg games on spaces of
//! square-integrable adapted processes.
//!
//! The crate provides, bottom-up:
//!
//! - [`brownian`]: shared counter-based Brownian ensembles;
//! - [`chaos`]: the orthonormal family of simple adapted processes
//!   (Haar wavelets in time, Wiener-chaos functionals in space);
//! - [`process`]: discretized inner products, projections, the encoder,
//!   and an exact adaptedness check;
//! - [`autodiff`]: a reverse-mode array tape and MLPs with trainable
//!   activations;
//! - [`game`]: Euler-Maruyama simulation of controlled SDEs and the two
//!   players' cost functionals, with a catalog of concrete games;
//! - [`response`]: the follower's best-response solver with
//!   strong-convexity certificates;
//! - [`operator`]: the attentional neural operator (encoder, processor
//!   MLP, softmax decoder over basis-valued values);
//! - [`compact`]: compact control-set generators, membership checks, and
//!   least-squares game linearization;
//! - [`training`]: supervised and unsupervised operator training and
//!   equilibrium certification.

pub mod autodiff;
pub mod brownian;
pub mod chaos;
pub mod compact;
pub mod error;
pub mod game;
pub mod grid;
pub mod operator;
pub mod process;
pub mod response;
pub mod rng;
pub mod training;

pub use brownian::{BrownianEnsemble, EnsembleKey};
pub use error::{Error, Result};
pub use grid::HorizonConfig;
