//! Simulation library for federated parameter-efficient fine-tuning of a
//! SAM-shaped segmentation model.
//!
//! The crate provides a small dense linear-algebra core, low-rank adapters,
//! a desk-scale encoder/decoder segmentation model with hand-written
//! backprop, a FedAvg-style protocol with merge/average/SVD re-factorization
//! of adapter updates, synthetic multi-site data, and exact byte accounting
//! of everything a client and server would exchange.

pub mod adapters;
pub mod comm;
pub mod experiment;
pub mod fed;
pub mod linalg;
pub mod model;
pub mod training;
pub mod wire;
pub mod rngutil;
