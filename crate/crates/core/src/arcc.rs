//! Ciphertext-ciphertext attention kernels.
//!
//! Two contraction patterns cover every attention product:
//! `inner × inner` (coefficients broadcast out of one ciphertext and
//! multiplied against column parts) and `inner × outer` (one vector tiled
//! against row parts, then folded). Scores land at layout-dependent slots and
//! are described by a [`ScoreVector`].

use crate::backend::{Context, SlotCiphertext};
use crate::encodings::{tile_token, EncodingKind, PackedMatrix};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::linear::{fold_strided, fold_sum};
use crate::nonlinear::{he_to_shares, shares_to_he, softmax, FixedOps, FixedPointParams, MpcSession, SharePair};

/// Fraction bits of the `1/sqrt(d2)` score multiplier.
pub const SCORE_SCALE_BITS: u32 = 8;

/// Encrypted scores plus where they sit: score `r` is in part
/// `r / per_part`, slot `(r % per_part) * stride`.
#[derive(Clone, Debug)]
pub struct ScoreVector {
    pub parts: Vec<SlotCiphertext>,
    pub len: usize,
    pub per_part: usize,
    pub stride: usize,
}

impl ScoreVector {
    pub fn position(&self, r: usize) -> (usize, usize) {
        (r / self.per_part, (r % self.per_part) * self.stride)
    }

    /// Scores in slots `0..len` of a single part.
    pub fn is_prefill_aligned(&self) -> bool {
        self.stride == 1 && self.parts.len() <= 1
    }

    /// Reads the scores out of decrypted parts.
    pub fn read(&self, slots: &[Vec<u64>]) -> Vec<u64> {
        (0..self.len)
            .map(|r| {
                let (p, s) = self.position(r);
                slots[p][s]
            })
            .collect()
    }

    pub fn decrypt(&self, ctx: &Context) -> Result<Vec<u64>> {
        let slots = self
            .parts
            .iter()
            .map(|c| Ok(ctx.decrypt(c)?.into_slots()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.read(&slots))
    }

    /// Converts to shares and gathers the scores in order.
    pub fn to_shares(&self, ctx: &Context, mpc: &mut MpcSession) -> Result<SharePair> {
        let shares = self
            .parts
            .iter()
            .map(|c| he_to_shares(c, ctx, mpc))
            .collect::<Result<Vec<_>>>()?;
        let pick = |side: fn(&SharePair) -> &Vec<u64>| -> Vec<u64> {
            (0..self.len)
                .map(|r| {
                    let (p, s) = self.position(r);
                    side(&shares[p])[s]
                })
                .collect()
        };
        Ok(SharePair {
            client: pick(|s| &s.client),
            server: pick(|s| &s.server),
        })
    }
}

/// Copies slot `j` of `a` into slots `0..width` (other slots zero): a
/// one-hot mask, a rotation to slot 0 and `log2(width)` doublings.
pub fn broadcast_slot(a: &SlotCiphertext, j: usize, width: usize, ctx: &Context) -> Result<SlotCiphertext> {
    let n = ctx.n_slots();
    if j >= n || width == 0 || !width.is_power_of_two() || width > n {
        return Err(Error::Dimension(format!(
            "cannot broadcast slot {j} over {width} of {n} slots"
        )));
    }
    let mut onehot = vec![0u64; n];
    onehot[j] = 1;
    let picked = ctx.mult_plain(a, &ctx.plain(onehot)?)?;
    let mut acc = ctx.rotate(&picked, j as i64)?;
    for i in 0..width.trailing_zeros() {
        let shifted = ctx.rotate(&acc, -(1i64 << i))?;
        acc = ctx.add(&acc, &shifted)?;
    }
    Ok(acc)
}

/// `s[r] = sum_j c[j] * B[r, j]` for coefficients `c` in slots `0..L` and
/// a one-column-per-part outer packing of the `R x L` matrix `B`.
pub fn arcc_inner_inner(coeffs: &SlotCiphertext, basis: &PackedMatrix, ctx: &Context) -> Result<ScoreVector> {
    let e = basis.encoding;
    if e.kind != EncodingKind::Outer || e.group != 1 {
        return Err(Error::Dimension(
            "inner x inner needs a one-column outer packing".into(),
        ));
    }
    let parts = basis.ciphertexts()?;
    if parts.len() != e.cols {
        return Err(Error::Dimension(format!(
            "{} parts for {} columns",
            parts.len(),
            e.cols
        )));
    }
    let n = ctx.n_slots();
    let mut acc: Option<SlotCiphertext> = None;
    for (j, part) in parts.iter().enumerate() {
        let b = broadcast_slot(coeffs, j, n, ctx)?;
        let t = ctx.mult_cipher(&b, part)?;
        acc = Some(match acc {
            None => t,
            Some(a) => ctx.add(&a, &t)?,
        });
    }
    Ok(ScoreVector {
        parts: acc.into_iter().collect(),
        len: e.rows,
        per_part: n,
        stride: 1,
    })
}

/// `o = sum_r a[r] * V[r, :]` over a block-compacted `V`, given one
/// coefficient ciphertext per part whose block `b` holds the part's `b`-th
/// coefficient in every slot. The result sits in slots `0..cols`.
pub fn arcc_inner_inner_blocks(
    coeffs: &[SlotCiphertext],
    rows: &PackedMatrix,
    ctx: &Context,
) -> Result<SlotCiphertext> {
    let e = rows.encoding;
    if e.kind != EncodingKind::InnerCompacted {
        return Err(Error::Dimension("block contraction needs the compacted packing".into()));
    }
    let parts = rows.ciphertexts()?;
    if parts.is_empty() || coeffs.len() != parts.len() {
        return Err(Error::Dimension(format!(
            "{} coefficient parts for {} row parts",
            coeffs.len(),
            parts.len()
        )));
    }
    let mut acc = ctx.mult_cipher(&coeffs[0], &parts[0])?;
    for (c, part) in coeffs.iter().zip(parts).skip(1) {
        acc = ctx.add(&acc, &ctx.mult_cipher(c, part)?)?;
    }
    fold_strided(&acc, e.block_width, e.blocks, ctx)
}

/// `s[r] = <v, M[r, :]>` for `v` in slots `0..cols` (zero elsewhere) and a
/// row packing of `M`. Compacted rows are handled with one tiled copy of
/// `v` and a block fold per part; plain inner rows are folded over all
/// slots, so the cost does not depend on the row length.
pub fn arcc_inner_outer(v: &SlotCiphertext, rows: &PackedMatrix, ctx: &Context) -> Result<ScoreVector> {
    let e = rows.encoding;
    let parts = rows.ciphertexts()?;
    let n = ctx.n_slots();
    match e.kind {
        EncodingKind::InnerCompacted => {
            let tiled = tile_token(v, e.block_width, e.blocks, ctx)?;
            let out = parts
                .iter()
                .map(|p| fold_sum(&ctx.mult_cipher(&tiled, p)?, e.block_width, ctx))
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoreVector {
                parts: out,
                len: e.rows,
                per_part: e.blocks,
                stride: e.block_width,
            })
        }
        EncodingKind::Inner => {
            let out = parts
                .iter()
                .map(|p| fold_sum(&ctx.mult_cipher(v, p)?, n, ctx))
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoreVector {
                parts: out,
                len: e.rows,
                per_part: 1,
                stride: n,
            })
        }
        _ => Err(Error::Dimension("inner x outer needs a row packing".into())),
    }
}

/// Moves every score into slot `r` of one ciphertext (masked pick and
/// rotation per score). Slots past `len` are zero.
pub fn compact_scores(s: &ScoreVector, ctx: &Context) -> Result<ScoreVector> {
    let n = ctx.n_slots();
    if s.len > n {
        return Err(Error::Dimension(format!("{} scores exceed {n} slots", s.len)));
    }
    let mut acc: Option<SlotCiphertext> = None;
    for r in 0..s.len {
        let (p, slot) = s.position(r);
        let mut onehot = vec![0u64; n];
        onehot[slot] = 1;
        let picked = ctx.mult_plain(&s.parts[p], &ctx.plain(onehot)?)?;
        let moved = if slot == r {
            picked
        } else {
            ctx.rotate(&picked, slot as i64 - r as i64)?
        };
        acc = Some(match acc {
            None => moved,
            Some(a) => ctx.add(&a, &moved)?,
        });
    }
    Ok(ScoreVector {
        parts: acc.into_iter().collect(),
        len: s.len,
        per_part: n,
        stride: 1,
    })
}

/// `round(2^8 / sqrt(d2))`.
pub fn score_multiplier(head_dim: usize) -> i64 {
    ((1u64 << SCORE_SCALE_BITS) as f64 / (head_dim as f64).sqrt()).round() as i64
}

/// Attention probabilities (scale `f`) from raw scale-`2f` dot products.
pub fn attention_weights<O: FixedOps>(ops: &mut O, raw: &O::V, head_dim: usize, fp: &FixedPointParams) -> Result<O::V> {
    let s = ops.truncate(raw, fp.frac_bits);
    let s = ops.mul_public(&s, &[score_multiplier(head_dim)]);
    let s = ops.truncate(&s, SCORE_SCALE_BITS);
    softmax(ops, &s, fp)
}

/// Causal attention over an `m`-token prefill for one head. `q`, `k`, `v`
/// are `m x d2` one-column-per-part outer packings. Returns the `d2` output
/// columns as scale-`f` shares of length `m`.
///
/// Row `i` takes its softmax over keys `0..=i` only, which gives exactly the
/// probabilities a decode step sees at the same position.
pub fn prefill_attention(
    q: &PackedMatrix,
    k: &PackedMatrix,
    v: &PackedMatrix,
    fp: &FixedPointParams,
    ctx: &Context,
    mpc: &mut MpcSession,
) -> Result<Vec<SharePair>> {
    let e = q.encoding;
    if k.encoding != e || v.encoding != e || e.kind != EncodingKind::Outer || e.group != 1 {
        return Err(Error::Dimension(
            "prefill Q/K/V must share a one-column outer packing".into(),
        ));
    }
    let (m, d) = (e.rows, e.cols);
    if m == 0 {
        return Err(Error::Empty("prefill with no tokens"));
    }
    let n = ctx.n_slots();
    let (qc, kc, vc) = (q.ciphertexts()?, k.ciphertexts()?, v.ciphertexts()?);

    // Score column i' holds q_i · k_i' in slot i.
    let mut columns = Vec::with_capacity(m);
    for key in 0..m {
        let mut acc: Option<SlotCiphertext> = None;
        for j in 0..d {
            let t = ctx.mult_cipher(&qc[j], &broadcast_slot(&kc[j], key, n, ctx)?)?;
            acc = Some(match acc {
                None => t,
                Some(a) => ctx.add(&a, &t)?,
            });
        }
        let sh = he_to_shares(&acc.expect("d2 > 0"), ctx, mpc)?;
        columns.push(mpc.slice(&sh, 0, m));
    }
    let all = mpc.concat(&columns);
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let idx: Vec<usize> = (0..=i).map(|key| key * m + i).collect();
        let raw = mpc.gather(&all, &idx);
        rows.push(attention_weights(mpc, &raw, d, fp)?);
    }

    // Probability column i' holds A[i, i'] in slot i; zero above the diagonal.
    let mut flat = rows.clone();
    flat.push(mpc.public(&[0]));
    let flat = mpc.concat(&flat);
    let zero = flat.len() - 1;
    let row_start: Vec<usize> = (0..m).map(|i| i * (i + 1) / 2).collect();
    let mut out_acc: Vec<Option<SlotCiphertext>> = vec![None; d];
    for key in 0..m {
        let idx: Vec<usize> = (0..m)
            .map(|i| if key <= i { row_start[i] + key } else { zero })
            .collect();
        let col = shares_to_he(&mpc.gather(&flat, &idx), ctx, mpc)?;
        for (j, acc) in out_acc.iter_mut().enumerate() {
            let t = ctx.mult_cipher(&col, &broadcast_slot(&vc[j], key, n, ctx)?)?;
            *acc = Some(match acc.take() {
                None => t,
                Some(a) => ctx.add(&a, &t)?,
            });
        }
    }
    out_acc
        .into_iter()
        .map(|acc| {
            let sh = he_to_shares(&acc.expect("m > 0"), ctx, mpc)?;
            let col = mpc.slice(&sh, 0, m);
            Ok(mpc.truncate(&col, fp.frac_bits))
        })
        .collect()
}

/// One decode step of one head. `q` holds the query in slots `0..d2` and
/// zeros elsewhere; the cache must already contain the current token.
/// Returns the scale-`f` output as shares of length `d2`.
///
/// Scores come from an inner×inner pass over the prefill keys and an
/// inner×outer pass over the generated keys; the value side mirrors this.
pub fn attention_step(
    q: &SlotCiphertext,
    cache: &KvCache,
    fp: &FixedPointParams,
    ctx: &Context,
    mpc: &mut MpcSession,
) -> Result<SharePair> {
    let (m, t) = (cache.prefill_len(), cache.t_auto());
    let d = cache.head_dim();
    if m + t == 0 {
        return Err(Error::Empty("attention over an empty cache"));
    }
    let mut pieces = Vec::new();
    if m > 0 {
        pieces.push(arcc_inner_inner(q, cache.prefill_k(), ctx)?.to_shares(ctx, mpc)?);
    }
    if t > 0 {
        pieces.push(arcc_inner_outer(q, cache.auto_k(), ctx)?.to_shares(ctx, mpc)?);
    }
    let raw = mpc.concat(&pieces);
    let probs = attention_weights(mpc, &raw, d, fp)?;

    let mut outs = Vec::new();
    if m > 0 {
        let a_pre = shares_to_he(&mpc.slice(&probs, 0, m), ctx, mpc)?;
        let mut rows = cache.prefill_v().clone();
        rows.encoding = crate::encodings::Encoding::inner(d, m);
        let per_col = arcc_inner_outer(&a_pre, &rows, ctx)?;
        outs.push(per_col.to_shares(ctx, mpc)?);
    }
    if t > 0 {
        let blocks = cache.block_capacity();
        let width = cache.block_width();
        let mut padded = vec![mpc.slice(&probs, m, t)];
        padded.push(mpc.public(&[0]));
        let padded = mpc.concat(&padded);
        let n = ctx.n_slots();
        let coeffs = (0..cache.auto_v().len())
            .map(|part| {
                let idx: Vec<usize> = (0..n)
                    .map(|slot| {
                        let r = part * blocks + slot / width;
                        if slot / width < blocks && r < t {
                            r
                        } else {
                            t
                        }
                    })
                    .collect();
                shares_to_he(&mpc.gather(&padded, &idx), ctx, mpc)
            })
            .collect::<Result<Vec<_>>>()?;
        let o = arcc_inner_inner_blocks(&coeffs, cache.auto_v(), ctx)?;
        let sh = he_to_shares(&o, ctx, mpc)?;
        outs.push(mpc.slice(&sh, 0, d));
    }
    let mut o = outs[0].clone();
    for extra in &outs[1..] {
        o = mpc.add(&o, extra);
    }
    Ok(mpc.truncate(&o, fp.frac_bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{from_signed, to_signed, BackendParams};
    use crate::encodings::{encode, Encoding};
    use crate::matrix::Matrix;
    use crate::nonlinear::PlainOps;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ctx(n: usize, p: u64) -> Context {
        Context::new(BackendParams::with_modulus(n, p).unwrap(), 5).unwrap()
    }

    #[test]
    fn broadcast_fills_width() {
        let c = ctx(8, 17);
        let a = c.encrypt_values(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let before = c.counter();
        let b = broadcast_slot(&a, 5, 4, &c).unwrap();
        assert_eq!(c.decrypt(&b).unwrap().slots(), &[6, 6, 6, 6, 0, 0, 0, 0]);
        let used = c.counter().since(&before);
        assert_eq!((used.mult_plain, used.rotate), (1, 3));
        let b0 = broadcast_slot(&a, 0, 8, &c).unwrap();
        assert_eq!(c.decrypt(&b0).unwrap().slots(), &[1; 8]);
    }

    #[test]
    fn inner_inner_small() {
        let c = ctx(8, 17);
        // B = [[1, 2], [3, 4], [5, 6]], coefficients (2, 1)
        let b = Matrix::from_rows(&[vec![1, 2], vec![3, 4], vec![5, 6]], 17).unwrap();
        let packed = encode(&b, Encoding::outer(3, 2), &c, true).unwrap();
        let coeff = c.encrypt_values(&[2, 1]).unwrap();
        let s = arcc_inner_inner(&coeff, &packed, &c).unwrap();
        assert!(s.is_prefill_aligned());
        assert_eq!(s.decrypt(&c).unwrap(), vec![4, 10, 16]);
    }

    #[test]
    fn inner_outer_compacted_and_compaction() {
        let c = ctx(8, 17);
        let m = Matrix::from_rows(&[vec![1, 0], vec![0, 1], vec![1, 1], vec![2, 3], vec![1, 2]], 17).unwrap();
        let packed = encode(&m, Encoding::inner_compacted(5, 2, 8), &c, true).unwrap();
        let v = c.encrypt_values(&[3, 5]).unwrap();
        let s = arcc_inner_outer(&v, &packed, &c).unwrap();
        assert_eq!((s.per_part, s.stride, s.parts.len()), (4, 2, 2));
        assert_eq!(s.decrypt(&c).unwrap(), vec![3, 5, 8, 21 % 17, 13]);
        let compact = compact_scores(&s, &c).unwrap();
        let slots = c.decrypt(&compact.parts[0]).unwrap();
        assert_eq!(slots.slots(), &[3, 5, 8, 4, 13, 0, 0, 0]);
    }

    #[test]
    fn inner_rows_fold_over_all_slots() {
        let c = ctx(8, 97);
        let m = Matrix::from_rows(&[vec![1, 2, 3], vec![4, 5, 6]], 97).unwrap();
        let packed = encode(&m, Encoding::inner(2, 3), &c, true).unwrap();
        let v = c.encrypt_values(&[1, 1, 2]).unwrap();
        let before = c.counter();
        let s = arcc_inner_outer(&v, &packed, &c).unwrap();
        assert_eq!(s.decrypt(&c).unwrap(), vec![9, 21]);
        assert_eq!(c.counter().since(&before).rotate, 2 * 3);
    }

    #[test]
    fn block_contraction() {
        let c = ctx(8, 97);
        let v = Matrix::from_rows(&[vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8], vec![9, 10]], 97).unwrap();
        let packed = encode(&v, Encoding::inner_compacted(5, 2, 8), &c, true).unwrap();
        let a = [1u64, 2, 0, 1, 3];
        let coeffs: Vec<_> = (0..2)
            .map(|part| {
                let slots: Vec<u64> = (0..8).map(|s| a.get(part * 4 + s / 2).copied().unwrap_or(0)).collect();
                c.encrypt_values(&slots).unwrap()
            })
            .collect();
        let o = arcc_inner_inner_blocks(&coeffs, &packed, &c).unwrap();
        let slots = c.decrypt(&o).unwrap();
        // 1*(1,2) + 2*(3,4) + 1*(7,8) + 3*(9,10)
        assert_eq!(&slots.slots()[..2], &[41, 48]);
    }

    /// Plain attention for one decode query over rows `keys`/`values`,
    /// written directly from the definition.
    fn naive_step(q: &[i64], keys: &[Vec<i64>], values: &[Vec<i64>], fp: &FixedPointParams) -> Vec<i64> {
        let p = fp.modulus;
        let mut ops = PlainOps::new(p);
        let raw: Vec<u64> = keys
            .iter()
            .map(|k| from_signed(q.iter().zip(k).map(|(a, b)| a * b).sum(), p))
            .collect();
        let probs = attention_weights(&mut ops, &raw, q.len(), fp).unwrap();
        let probs: Vec<i64> = probs.iter().map(|&x| to_signed(x, p)).collect();
        (0..q.len())
            .map(|j| {
                let s: i64 = probs.iter().zip(values).map(|(a, v)| a * v[j]).sum();
                s >> fp.frac_bits
            })
            .collect()
    }

    fn rand_rows(rng: &mut impl Rng, rows: usize, d: usize) -> Vec<Vec<i64>> {
        (0..rows)
            .map(|_| (0..d).map(|_| rng.gen_range(-1500..1500)).collect())
            .collect()
    }

    fn outer(rows: &[Vec<i64>], d: usize, c: &Context) -> PackedMatrix {
        let flat: Vec<i64> = rows.concat();
        let m = Matrix::from_signed(rows.len(), d, c.modulus(), &flat).unwrap();
        encode(&m, Encoding::outer(rows.len(), d), c, true).unwrap()
    }

    #[test]
    fn step_matches_naive_and_is_split_invariant() {
        let c = ctx(64, 536872321);
        let fp = FixedPointParams::new(10, c.modulus()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let keys = rand_rows(&mut rng, 7, d);
        let vals = rand_rows(&mut rng, 7, d);
        let q: Vec<i64> = (0..d).map(|_| rng.gen_range(-1500..1500)).collect();
        let q_ct = c.encrypt(&c.plain_signed(&q).unwrap()).unwrap();
        let want = naive_step(&q, &keys, &vals, &fp);
        for split in [0, 3, 7] {
            let mut cache = if split == 0 {
                KvCache::empty(d, &c).unwrap()
            } else {
                KvCache::from_prefill(outer(&keys[..split], d, &c), outer(&vals[..split], d, &c), &c).unwrap()
            };
            for r in split..7 {
                let k = c.encrypt(&c.plain_signed(&keys[r]).unwrap()).unwrap();
                let v = c.encrypt(&c.plain_signed(&vals[r]).unwrap()).unwrap();
                cache = cache.append_token(&k, &v, &c).unwrap();
            }
            let mut mpc = MpcSession::for_context(&c, 1);
            let out = attention_step(&q_ct, &cache, &fp, &c, &mut mpc).unwrap();
            let got: Vec<i64> = out
                .reconstruct(c.modulus())
                .iter()
                .map(|&x| to_signed(x, c.modulus()))
                .collect();
            assert_eq!(got, want, "split {split}");
        }
    }

    #[test]
    fn prefill_rows_match_decode_steps() {
        let c = ctx(16, 536871233);
        let fp = FixedPointParams::new(10, c.modulus()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (m, d) = (5, 4);
        let (qs, ks, vs) = (
            rand_rows(&mut rng, m, d),
            rand_rows(&mut rng, m, d),
            rand_rows(&mut rng, m, d),
        );
        let mut mpc = MpcSession::for_context(&c, 4);
        let cols = prefill_attention(
            &outer(&qs, d, &c),
            &outer(&ks, d, &c),
            &outer(&vs, d, &c),
            &fp,
            &c,
            &mut mpc,
        )
        .unwrap();
        for i in 0..m {
            let want = naive_step(&qs[i], &ks[..=i], &vs[..=i], &fp);
            let got: Vec<i64> = cols
                .iter()
                .map(|col| to_signed(col.reconstruct(c.modulus())[i], c.modulus()))
                .collect();
            assert_eq!(got, want, "row {i}");
        }
    }

    #[test]
    fn step_counts_do_not_depend_on_prefill_length() {
        let c = ctx(64, 536872321);
        let fp = FixedPointParams::new(10, c.modulus()).unwrap();
        let d = 4;
        let mut counts = Vec::new();
        for m in [2usize, 5, 9] {
            let rows: Vec<Vec<i64>> = (0..m).map(|i| vec![i as i64 * 100; d]).collect();
            let mut cache = KvCache::from_prefill(outer(&rows, d, &c), outer(&rows, d, &c), &c).unwrap();
            let tok = c.encrypt(&c.plain_signed(&[300; 4]).unwrap()).unwrap();
            cache = cache.append_token(&tok, &tok, &c).unwrap();
            let mut mpc = MpcSession::for_context(&c, 1);
            let before = c.counter();
            attention_step(&tok, &cache, &fp, &c, &mut mpc).unwrap();
            counts.push(c.counter().since(&before).he_only());
        }
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn inner_outer_matches_dot_products(rows in 1usize..12, d in 1usize..5, seed in any::<u64>()) {
            let c = ctx(16, 97);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::random(rows, d, 97, &mut rng);
            let v: Vec<u64> = (0..d).map(|_| rng.gen_range(0..97)).collect();
            let packed = encode(&m, Encoding::inner_compacted(rows, d, 16), &c, true).unwrap();
            let s = arcc_inner_outer(&c.encrypt_values(&v).unwrap(), &packed, &c).unwrap();
            let want: Vec<u64> = (0..rows).map(|r| (0..d).map(|j| m.get(r, j) * v[j]).sum::<u64>() % 97).collect();
            let got = s.decrypt(&c).unwrap();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn inner_inner_matches_dot_products(rows in 1usize..16, d in 1usize..6, seed in any::<u64>()) {
            let c = ctx(16, 97);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::random(rows, d, 97, &mut rng);
            let v: Vec<u64> = (0..d).map(|_| rng.gen_range(0..97)).collect();
            let packed = encode(&m, Encoding::outer(rows, d), &c, true).unwrap();
            let s = arcc_inner_inner(&c.encrypt_values(&v).unwrap(), &packed, &c).unwrap();
            let want: Vec<u64> = (0..rows).map(|r| (0..d).map(|j| m.get(r, j) * v[j]).sum::<u64>() % 97).collect();
            let got = s.decrypt(&c).unwrap();
            prop_assert_eq!(got, want);
        }
    }
}
