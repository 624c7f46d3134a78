//! Core library for privacy-preserving federated training of short-term
//! load forecasting models.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`autodiff`]), a dual-stage attention encoder–decoder forecaster
//! ([`model`]), client/server optimizers ([`optim`]), the Laplace
//! obfuscation mechanism ([`privacy`]), the synchronous federation
//! orchestrator ([`federation`]), and data/metrics tooling ([`data`],
//! [`metrics`]). Everything in here is deterministic given an experiment
//! seed: random state is derived from keyed substreams ([`rng`]) so that
//! results do not depend on client execution order or worker count.
//!
//! The crate is `no_std`-compatible (with `alloc`); IO, file formats, and
//! the command-line front end live in the companion `ppfl-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod rng;
