//! Kernels for private autoregressive transformer decoding over SIMD-packed
//! ciphertexts.
//!
//! The crate is organised bottom-up:
//!
//! - [`backend`]: exact slot-wise `Z_p` emulation of a batched HE scheme with a
//!   noise-budget ledger and operation counters.
//! - [`encodings`]: outer / inner / diagonal / block-compacted packings.
//! - [`linear`]: CT×PT kernels (outer-diagonal CPMM, inner-diagonal CPVM,
//!   folding sums).
//! - [`arcc`]: CT×CT attention kernels over the heterogeneous KV cache.
//! - [`kv_cache`]: the encrypted cache with slot-aware concatenation and lazy
//!   noise refresh.
//! - [`nonlinear`]: two-role secret-sharing emulation for GELU, softmax,
//!   layernorm and truncation.
//! - [`model`]: toy decoder-only transformer, encrypted pipeline and plaintext
//!   fixed-point oracle.
//! - [`costmodel`]: closed-form operation counts for the compared packings.

pub mod arcc;
pub mod backend;
pub mod costmodel;
pub mod encodings;
pub mod error;
pub mod kv_cache;
pub mod linear;
pub mod matrix;
pub mod model;
pub mod nonlinear;
pub mod stats;

pub use backend::{BackendParams, Context, NoiseCosts, OpCounter, PlainVector, SlotCiphertext};
pub use error::{Error, Result};
pub use matrix::Matrix;
