//! Noisy-label learning with privileged information.
//!
//! A classifier is trained with a prediction network on the regular
//! features, a noise network on the privileged features, and a sigmoid
//! gate (also on the privileged features) that blends their logits per
//! sample. Only the prediction network is used at inference time.
//!
//! The crate also carries a fixed-design linear analysis of the same
//! routing idea ([`linear_risk`]) with closed-form risks and a Monte-Carlo
//! check.

pub mod commands;
pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod linear_risk;
pub mod model;
pub mod nn;
pub mod seed;
pub mod svg;
pub mod training;

pub use error::{Error, Result};
