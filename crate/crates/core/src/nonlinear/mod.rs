//! Share-domain side of the hybrid protocol.
//!
//! Nonlinear layers are written once against [`FixedOps`], a small
//! instruction set over vectors of fixed-point residues. [`PlainOps`] runs it
//! on cleartext values (the oracle); [`MpcSession`] runs it on additive
//! two-party shares with Beaver multiplication and byte accounting. Steps
//! that a real protocol realizes with comparison or bit-decomposition
//! subprotocols (max, clamps, shifts, bit length) are emulated as ideal
//! functionalities: reconstruct, apply, reshare, and charge a shape-only
//! cost.

mod fixed;
mod plain;
mod shares;

use serde::{Deserialize, Serialize};

use crate::backend::{from_signed, to_signed};
use crate::error::{Error, Result};

pub use fixed::{
    gelu, gelu_poly_real, gelu_reference, inv_sqrt, layernorm, reciprocal, softmax, GeluCoefficients, GELU_RANGE,
};
pub use plain::PlainOps;
pub use shares::{he_to_shares, shares_to_he, MpcSession, OpStats, SharePair};

/// Fixed-point encoding of reals as `round(x * 2^f)` in `Z_p`, with residues
/// above `(p - 1) / 2` read as negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointParams {
    pub frac_bits: u32,
    pub modulus: u64,
    /// Newton iterations of the reciprocal inside softmax.
    #[serde(default = "default_reciprocal_iterations")]
    pub reciprocal_iterations: u32,
}

fn default_reciprocal_iterations() -> u32 {
    4
}

pub const DEFAULT_FRAC_BITS: u32 = 10;

impl FixedPointParams {
    pub fn new(frac_bits: u32, modulus: u64) -> Result<Self> {
        let fp = Self {
            frac_bits,
            modulus,
            reciprocal_iterations: default_reciprocal_iterations(),
        };
        fp.validate()?;
        Ok(fp)
    }

    /// One product of two scale-`f` values plus accumulation headroom must
    /// fit: `2^(2f+6) < p`.
    pub fn validate(&self) -> Result<()> {
        if self.frac_bits == 0 || 2 * self.frac_bits + 6 >= 63 || (1u64 << (2 * self.frac_bits + 6)) >= self.modulus {
            return Err(Error::InvalidParams(format!(
                "2^(2f+6) must be below p (f = {}, p = {})",
                self.frac_bits, self.modulus
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    pub fn encode(&self, x: f64) -> u64 {
        from_signed(self.quantize(x), self.modulus)
    }

    /// `round(x * 2^f)` as a signed integer.
    pub fn quantize(&self, x: f64) -> i64 {
        (x * self.scale()).round() as i64
    }

    pub fn decode(&self, v: u64) -> f64 {
        to_signed(v, self.modulus) as f64 / self.scale()
    }

    pub fn encode_all(&self, xs: &[f64]) -> Vec<u64> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn decode_all(&self, vs: &[u64]) -> Vec<f64> {
        vs.iter().map(|&v| self.decode(v)).collect()
    }
}

/// Instruction set over vectors of `Z_p` residues in fixed point.
///
/// Public constants are signed integers; a one-element constant slice is
/// broadcast. Ideal operations see signed representatives.
pub trait FixedOps {
    type V: Clone + std::fmt::Debug + Send;

    fn modulus(&self) -> u64;
    fn len(&self, a: &Self::V) -> usize;
    /// Shares (or values) of public constants.
    fn public(&mut self, values: &[i64]) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add_public(&mut self, a: &Self::V, c: &[i64]) -> Self::V;
    fn mul_public(&mut self, a: &Self::V, c: &[i64]) -> Self::V;
    /// Elementwise product of two secrets.
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Floor division of the signed value by `2^bits`.
    fn truncate(&mut self, a: &Self::V, bits: u32) -> Self::V;
    fn ideal_map(&mut self, a: &Self::V, f: &dyn Fn(i64) -> i64) -> Self::V;
    fn ideal_map2(&mut self, a: &Self::V, b: &Self::V, f: &dyn Fn(i64, i64) -> i64) -> Self::V;
    /// One-element result of a whole-vector functionality.
    fn ideal_reduce(&mut self, a: &Self::V, f: &dyn Fn(&[i64]) -> i64) -> Self::V;
    /// Local re-indexing: `out[i] = a[idx[i]]`.
    fn gather(&mut self, a: &Self::V, idx: &[usize]) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Self::V;
    /// One-element sum.
    fn sum(&mut self, a: &Self::V) -> Self::V;

    fn broadcast(&mut self, a: &Self::V, len: usize) -> Self::V {
        debug_assert_eq!(self.len(a), 1);
        self.gather(a, &vec![0; len])
    }

    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, &idx)
    }
}

#[inline]
pub(crate) fn bcast(c: &[i64], i: usize) -> i64 {
    if c.len() == 1 {
        c[0]
    } else {
        c[i]
    }
}
