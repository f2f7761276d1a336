//! Radio fingerprinting of EPC-Gen2 RFID tags from raw RN16 backscatter I/Q.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`signalgen`] synthesizes labelled RN16 replies from per-tag hardware
//!   impairment profiles and per-scenario channel conditions.
//! - [`datapipe`] slices communications into fixed-length 2-channel windows,
//!   performs communication-level stratified splits and owns the on-disk
//!   corpus format.
//! - [`neuralnet`] is a small from-scratch 1D CNN (conv, LeakyReLU, max-pool,
//!   dense, cross-entropy, Adam) with hand-written backward passes.
//! - [`augment`] expands a training set with signal-relative AWGN copies.
//! - [`fedavg`] runs synchronous federated averaging between reader clients
//!   and an aggregation server, in-process or over TCP.
//! - [`harness`] drives the experiment matrix and writes result records.

pub mod augment;
pub mod datapipe;
pub mod fedavg;
pub mod harness;
pub mod neuralnet;
pub mod rng;
pub mod signalgen;
