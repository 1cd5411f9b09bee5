//! Continual-learning lab: EWC-family penalties and weight velocity
//! attenuation (WVA) on a from-scratch multilayer perceptron, with a
//! sequential permuted-task harness and λ grid search.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod continual;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod selftest;

pub use error::{Error, Result};
