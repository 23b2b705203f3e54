//! Adversarial training with multiple attack strengths.
//!
//! The crate trains small image classifiers that stay accurate under
//! gradient-sign perturbations of varying strength. It provides FGSM
//! crafting ([`attack`]), mixed and parallel multi-strength training
//! with a voting decision unit ([`train`]), random-walk selection of
//! the strength set ([`select`]), robustness sweeps and reporting
//! ([`harness`]), and a CLI front end ([`cli`]).

pub mod attack;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod select;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
