#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod numkit;
pub mod odeflow;
pub mod toygen;
pub mod unlearning;
pub mod vecfield;

pub use error::{Error, Result};
