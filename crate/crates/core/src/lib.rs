//! Deterministic simulation of federated optimization (FedAvg, FedProx,
//! FedDane) under statistical and systems heterogeneity.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod solver;
