//! Matrix packings: outer (columns), inner (rows), row-first diagonal and the
//! block-compacted inner layout used by the generated-token cache.

use serde::{Deserialize, Serialize};

use crate::backend::{Context, PlainVector, SlotCiphertext};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodingKind {
    Outer,
    Inner,
    Diagonal,
    InnerCompacted,
}

/// Shape and layout of a packed `rows x cols` matrix.
///
/// `Outer` may hold several columns per part (`group` columns at stride
/// `n / group`); the default is one column per part. `InnerCompacted` puts
/// `blocks` rows per part in `block_width`-wide blocks, where `block_width`
/// is `cols` rounded up to a power of two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    pub kind: EncodingKind,
    pub rows: usize,
    pub cols: usize,
    pub group: usize,
    pub block_width: usize,
    pub blocks: usize,
}

impl Encoding {
    pub fn outer(rows: usize, cols: usize) -> Self {
        Self::outer_grouped(rows, cols, 1)
    }

    /// Outer packing with `group` columns per ciphertext.
    pub fn outer_grouped(rows: usize, cols: usize, group: usize) -> Self {
        Self {
            kind: EncodingKind::Outer,
            rows,
            cols,
            group,
            block_width: 0,
            blocks: 0,
        }
    }

    pub fn inner(rows: usize, cols: usize) -> Self {
        Self {
            kind: EncodingKind::Inner,
            rows,
            cols,
            group: 1,
            block_width: 0,
            blocks: 0,
        }
    }

    pub fn diagonal(rows: usize, cols: usize) -> Self {
        Self {
            kind: EncodingKind::Diagonal,
            rows,
            cols,
            group: 1,
            block_width: 0,
            blocks: 0,
        }
    }

    pub fn inner_compacted(rows: usize, cols: usize, n_slots: usize) -> Self {
        let block_width = cols.max(1).next_power_of_two();
        Self {
            kind: EncodingKind::InnerCompacted,
            rows,
            cols,
            group: 1,
            block_width,
            blocks: (n_slots / block_width).max(1),
        }
    }

    /// Slot distance between consecutive column blocks of a grouped outer
    /// packing.
    pub fn stride(&self, n_slots: usize) -> usize {
        n_slots / self.group.max(1)
    }

    /// Number of parts the packing occupies.
    pub fn part_count(&self) -> usize {
        match self.kind {
            EncodingKind::Outer => self.cols.div_ceil(self.group),
            EncodingKind::Inner => self.rows,
            EncodingKind::Diagonal => self.cols,
            EncodingKind::InnerCompacted => self.rows.div_ceil(self.blocks),
        }
    }

    /// Checks that the packing fits `n_slots`.
    pub fn check(&self, n_slots: usize) -> Result<()> {
        let fail = |what: String| Err(Error::Dimension(what));
        match self.kind {
            EncodingKind::Outer => {
                if self.group == 0 || !self.group.is_power_of_two() || self.group > n_slots {
                    return fail(format!(
                        "outer group {} must be a power of two <= {n_slots}",
                        self.group
                    ));
                }
                if self.rows > self.stride(n_slots) {
                    return fail(format!(
                        "{} rows exceed the outer block of {} slots",
                        self.rows,
                        self.stride(n_slots)
                    ));
                }
            }
            EncodingKind::Inner | EncodingKind::Diagonal => {
                let len = if self.kind == EncodingKind::Inner {
                    self.cols
                } else {
                    self.rows
                };
                if len > n_slots {
                    return fail(format!("{len} entries exceed {n_slots} slots"));
                }
            }
            EncodingKind::InnerCompacted => {
                if self.block_width > n_slots {
                    return fail(format!("block width {} exceeds {n_slots} slots", self.block_width));
                }
            }
        }
        Ok(())
    }

    /// Part index and slot of entry `(i, j)` (for `Diagonal`, the slot holding
    /// `A[i, j]`).
    pub fn position(&self, i: usize, j: usize, n_slots: usize) -> (usize, usize) {
        match self.kind {
            EncodingKind::Outer => (j / self.group, (j % self.group) * self.stride(n_slots) + i),
            EncodingKind::Inner => (i, j),
            EncodingKind::Diagonal => ((j + self.cols - i % self.cols) % self.cols, i),
            EncodingKind::InnerCompacted => (i / self.blocks, (i % self.blocks) * self.block_width + j),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Parts {
    Encrypted(Vec<SlotCiphertext>),
    Plain(Vec<PlainVector>),
}

/// A matrix materialized as an ordered list of slot vectors.
#[derive(Clone, Debug)]
pub struct PackedMatrix {
    pub encoding: Encoding,
    pub parts: Parts,
}

impl PackedMatrix {
    pub fn is_encrypted(&self) -> bool {
        matches!(self.parts, Parts::Encrypted(_))
    }

    pub fn len(&self) -> usize {
        match &self.parts {
            Parts::Encrypted(v) => v.len(),
            Parts::Plain(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ciphertexts(&self) -> Result<&[SlotCiphertext]> {
        match &self.parts {
            Parts::Encrypted(v) => Ok(v),
            Parts::Plain(_) => Err(Error::Dimension("expected an encrypted packing".into())),
        }
    }

    pub fn plaintexts(&self) -> Result<&[PlainVector]> {
        match &self.parts {
            Parts::Plain(v) => Ok(v),
            Parts::Encrypted(_) => Err(Error::Dimension("expected a plaintext packing".into())),
        }
    }

    /// Slot contents of every part, decrypting if needed.
    pub fn slot_values(&self, ctx: &Context) -> Result<Vec<Vec<u64>>> {
        match &self.parts {
            Parts::Encrypted(v) => v.iter().map(|c| Ok(ctx.decrypt(c)?.into_slots())).collect(),
            Parts::Plain(v) => Ok(v.iter().map(|p| p.slots().to_vec()).collect()),
        }
    }
}

/// Raw slot layout of `a` under `enc`, zero-padded.
pub fn layout(a: &Matrix, enc: &Encoding, n_slots: usize) -> Result<Vec<Vec<u64>>> {
    if a.rows() != enc.rows || a.cols() != enc.cols {
        return Err(Error::Dimension(format!(
            "matrix is {}x{}, encoding expects {}x{}",
            a.rows(),
            a.cols(),
            enc.rows,
            enc.cols
        )));
    }
    enc.check(n_slots)?;
    let mut parts = vec![vec![0u64; n_slots]; enc.part_count()];
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let (part, slot) = enc.position(i, j, n_slots);
            parts[part][slot] = a.get(i, j);
        }
    }
    Ok(parts)
}

/// Reads a matrix back from its slot layout.
pub fn unlayout(parts: &[Vec<u64>], enc: &Encoding, modulus: u64) -> Result<Matrix> {
    if parts.len() != enc.part_count() {
        return Err(Error::Dimension(format!(
            "{} parts, encoding expects {}",
            parts.len(),
            enc.part_count()
        )));
    }
    let n = parts.first().map_or(0, Vec::len);
    Ok(Matrix::from_fn(enc.rows, enc.cols, modulus, |i, j| {
        let (part, slot) = enc.position(i, j, n);
        parts[part][slot]
    }))
}

pub fn encode(a: &Matrix, enc: Encoding, ctx: &Context, encrypted: bool) -> Result<PackedMatrix> {
    let slots = layout(a, &enc, ctx.n_slots())?;
    let plains = slots.into_iter().map(|s| ctx.plain(s)).collect::<Result<Vec<_>>>()?;
    let parts = if encrypted {
        Parts::Encrypted(plains.iter().map(|p| ctx.encrypt(p)).collect::<Result<_>>()?)
    } else {
        Parts::Plain(plains)
    };
    Ok(PackedMatrix { encoding: enc, parts })
}

pub fn decode(packed: &PackedMatrix, ctx: &Context) -> Result<Matrix> {
    unlayout(&packed.slot_values(ctx)?, &packed.encoding, ctx.modulus())
}

/// Encrypts a token row vector into slots `0..d`.
pub fn pack_token_inner(x: &[u64], ctx: &Context) -> Result<SlotCiphertext> {
    ctx.encrypt_values(x)
}

/// Replicates the `d`-slot prefix of `x` into `blocks` consecutive `d`-wide
/// blocks with `ceil(log2 blocks)` rotate-and-add steps.
///
/// When doubling would run past the slot count, the exact binary
/// decomposition of `blocks` is used instead.
pub fn tile_token(x: &SlotCiphertext, d: usize, blocks: usize, ctx: &Context) -> Result<SlotCiphertext> {
    let n = ctx.n_slots();
    if d == 0 || blocks == 0 || d * blocks > n {
        return Err(Error::Dimension(format!(
            "cannot tile {blocks} blocks of width {d} into {n} slots"
        )));
    }
    let steps = blocks.next_power_of_two().trailing_zeros() as usize;
    if (d << steps) <= n {
        let mut acc = x.clone();
        for i in 0..steps {
            let shifted = ctx.rotate(&acc, -((d << i) as i64))?;
            acc = ctx.add(&acc, &shifted)?;
        }
        return Ok(acc);
    }
    // copies[i] holds 2^i consecutive copies
    let mut copies = vec![x.clone()];
    for i in 1..usize::BITS as usize - blocks.leading_zeros() as usize {
        let prev = &copies[i - 1];
        let shifted = ctx.rotate(prev, -((d << (i - 1)) as i64))?;
        copies.push(ctx.add(prev, &shifted)?);
    }
    let mut acc: Option<SlotCiphertext> = None;
    let mut filled = 0;
    for (i, c) in copies.iter().enumerate().rev() {
        if blocks & (1 << i) == 0 {
            continue;
        }
        acc = Some(match acc {
            None => c.clone(),
            Some(a) => ctx.add(&a, &ctx.rotate(c, -((filled * d) as i64))?)?,
        });
        filled += 1 << i;
    }
    Ok(acc.expect("blocks > 0"))
}
