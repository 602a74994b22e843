//! Probabilistic transformer encoders trained with a constrained ELBO.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), transformer layers with a probabilistic feed-forward
//! sublayer ([`nn`]), predictive and posterior encoders ([`model`]), the
//! GECO objective with kappa annealing ([`objective`]), AdamW with a
//! warmup-cosine schedule ([`optim`]), the synthetic sequence-distribution
//! benchmark ([`synthdata`]), ensemble metrics and baseline samplers
//! ([`eval`]), and the training loops ([`trainer`]).

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
