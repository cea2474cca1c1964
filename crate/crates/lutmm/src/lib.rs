//! Lookup-accumulate approximation of dense matrix multiplication for
//! neural-network inference.
//!
//! Dense layers compute `sigma(A B + bias)` where `A` holds activations and
//! `B` holds already-learned weights. This crate replaces that product with
//! table lookups: the inner dimension is partitioned into `C` subspaces, a
//! cheap hash encoder maps each subvector to one of 16 buckets, and the
//! partial inner products between bucket prototypes and the columns of `B`
//! are precomputed into a `C x 16 x M` lookup table. A row's approximate
//! product is then just `C` table rows summed per output.
//!
//! On top of that baseline the crate implements:
//!
//! * correlation-aware and rotation-based subspace partitioning, so that
//!   mutually informative input dimensions land in the same subvector
//!   ([`partition`]);
//! * lookup-table optimization against the layer's actual output, including
//!   the bias and nonlinearity, with either a squared-error or a
//!   KL-divergence objective ([`table`]);
//! * incremental layer replacement for whole networks: replace a layer,
//!   freeze it, fine-tune the layers above it, repeat ([`nn`]);
//! * an experiment CLI that trains small MLPs, replaces layers one at a time
//!   or all of them, and writes CSV reports ([`cli`]).
//!
//! Everything is deterministic: fits are seeded, accumulation orders are
//! fixed, and model archives round-trip bit-exactly ([`data_io`]).

pub mod cli;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod partition;
pub mod table;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
