//! CT×PT kernels: outer-diagonal matrix products for prefill, inner-diagonal
//! vector products for decoding, and rotate-and-add folding.

use crate::backend::{Context, SlotCiphertext};
use crate::encodings::{unlayout, Encoding, EncodingKind, PackedMatrix, Parts};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

fn log2_exact(v: usize, what: &str, n: usize) -> Result<u32> {
    if v == 0 || !v.is_power_of_two() || v > n {
        return Err(Error::Dimension(format!(
            "{what} {v} must be a power of two dividing {n}"
        )));
    }
    Ok(v.trailing_zeros())
}

/// Sums each contiguous `block` of slots into the block's first slot using
/// `log2(block)` rotations. Other slots hold partial sums afterwards.
pub fn fold_sum(a: &SlotCiphertext, block: usize, ctx: &Context) -> Result<SlotCiphertext> {
    fold_strided(a, 1, block, ctx)
}

/// Adds `count` slot-strided copies: slot `s` receives
/// `sum_{t < count} a[s + t * stride]`. `count` must be a power of two.
pub fn fold_strided(a: &SlotCiphertext, stride: usize, count: usize, ctx: &Context) -> Result<SlotCiphertext> {
    let n = ctx.n_slots();
    let steps = log2_exact(count, "fold count", n)?;
    let mut acc = a.clone();
    for i in 0..steps {
        let shifted = ctx.rotate(&acc, (stride << i) as i64)?;
        acc = ctx.add(&acc, &shifted)?;
    }
    Ok(acc)
}

/// Plain matrix behind a diagonal packing.
pub fn diagonal_weights(w: &PackedMatrix, modulus: u64) -> Result<Matrix> {
    if w.encoding.kind != EncodingKind::Diagonal {
        return Err(Error::Dimension("weights must use the diagonal packing".into()));
    }
    let slots: Vec<Vec<u64>> = w.plaintexts()?.iter().map(|p| p.slots().to_vec()).collect();
    unlayout(&slots, &w.encoding, modulus)
}

/// Largest useful outer group for an `m x d` matrix: as many columns per
/// ciphertext as fit `m`-row blocks, capped at `d` rounded up.
pub fn dense_group(m: usize, d: usize, n_slots: usize) -> usize {
    (n_slots / m.max(1).next_power_of_two())
        .min(d.max(1).next_power_of_two())
        .max(1)
}

fn accumulate(acc: Option<SlotCiphertext>, t: SlotCiphertext, ctx: &Context) -> Result<SlotCiphertext> {
    match acc {
        None => Ok(t),
        Some(a) => ctx.add(&a, &t),
    }
}

/// `X·W` for an encrypted outer-packed `X` (`m x d1`, `g` columns per part)
/// and a plaintext diagonal-packed `W` (`d1 x d2`).
///
/// Diagonal-major loop: for each diagonal offset `s`, every input part is
/// multiplied by a plaintext that pairs block `j` with weight column
/// `j + s`, the partial products are summed and shifted right by `s` blocks.
/// With `g >= d2p` (`d2` rounded up) one output part collects all columns
/// and the `g / d2p` block groups are folded together; otherwise each output
/// part covers `g` columns. The result uses the same group as `X`; unused
/// blocks may hold fold residue.
pub fn cpmm_outer_diagonal(x: &PackedMatrix, w: &PackedMatrix, ctx: &Context) -> Result<PackedMatrix> {
    let xe = x.encoding;
    if xe.kind != EncodingKind::Outer {
        return Err(Error::Dimension("CPMM input must be outer-packed".into()));
    }
    let xs = x.ciphertexts()?;
    let (m, d1, d2) = (xe.rows, xe.cols, w.encoding.cols);
    if w.encoding.rows != d1 || d1 == 0 || d2 == 0 {
        return Err(Error::Dimension(format!(
            "cannot multiply {m}x{d1} by {}x{d2}",
            w.encoding.rows
        )));
    }
    let n = ctx.n_slots();
    xe.check(n)?;
    let wm = diagonal_weights(w, ctx.modulus())?;
    let g = xe.group;
    let stride = xe.stride(n);
    let d2p = d2.next_power_of_two();
    let weight = |row: usize, col: usize| if row < d1 && col < d2 { wm.get(row, col) } else { 0 };
    let diag_plain = |b: usize, col_of: &dyn Fn(usize) -> usize| {
        let mut slots = vec![0u64; n];
        for j in 0..g {
            let v = weight(b * g + j, col_of(j));
            if v != 0 {
                slots[j * stride..j * stride + m].fill(v);
            }
        }
        ctx.plain(slots)
    };

    let mut outputs = Vec::new();
    if g >= d2p {
        let mut acc = None;
        for s in 0..d2p {
            let mut z = None;
            for (b, xb) in xs.iter().enumerate() {
                let pt = diag_plain(b, &|j| (j + s) % d2p)?;
                z = Some(accumulate(z, ctx.mult_plain(xb, &pt)?, ctx)?);
            }
            let mut z = z.expect("at least one input part");
            if s > 0 {
                z = ctx.rotate(&z, -((s * stride) as i64))?;
            }
            acc = Some(accumulate(acc, z, ctx)?);
        }
        let acc = acc.expect("d2p >= 1");
        outputs.push(fold_strided(&acc, d2p * stride, g / d2p, ctx)?);
    } else {
        for bo in 0..d2.div_ceil(g) {
            let mut acc = None;
            for s in 0..g {
                let mut z = None;
                for (b, xb) in xs.iter().enumerate() {
                    let pt = diag_plain(b, &|j| bo * g + (j + s) % g)?;
                    z = Some(accumulate(z, ctx.mult_plain(xb, &pt)?, ctx)?);
                }
                let mut z = z.expect("at least one input part");
                if s > 0 {
                    z = ctx.rotate(&z, -((s * stride) as i64))?;
                }
                acc = Some(accumulate(acc, z, ctx)?);
            }
            outputs.push(acc.expect("g >= 1"));
        }
    }
    Ok(PackedMatrix {
        encoding: Encoding::outer_grouped(m, d2, g),
        parts: Parts::Encrypted(outputs),
    })
}

/// `x·W` for an encrypted inner-packed row vector (`d1` slots) and a
/// plaintext diagonal-packed `W` (`d1 x d2`).
///
/// Uses `d2p` (`d2` rounded up to a power of two) generalized diagonals:
/// `sum_k rotate_right(x ⊙ D_k, k)` with `D_k[i] = W[i, (i + k) mod d2p]`,
/// then a strided fold over `d2p`-wide blocks. The result sits in slots
/// `0..d2`; slots `d2..` hold fold residue. Cost depends only on `d1` and
/// `d2`: `d2p` multiplications and `d2p - 1 + log2(P / d2p)` rotations where
/// `P` covers the occupied slot range.
pub fn cpvm_inner_diagonal(x: &SlotCiphertext, w: &PackedMatrix, ctx: &Context) -> Result<SlotCiphertext> {
    let (d1, d2) = (w.encoding.rows, w.encoding.cols);
    let n = ctx.n_slots();
    let d2p = d2.max(1).next_power_of_two();
    if d1 == 0 || d2 == 0 || d1 > n || d2p > n {
        return Err(Error::Dimension(format!("CPVM weights {d1}x{d2} do not fit {n} slots")));
    }
    let wm = diagonal_weights(w, ctx.modulus())?;
    let mut acc = None;
    for k in 0..d2p {
        let mut slots = vec![0u64; n];
        for (i, s) in slots.iter_mut().enumerate().take(d1) {
            let col = (i + k) % d2p;
            if col < d2 {
                *s = wm.get(i, col);
            }
        }
        let mut t = ctx.mult_plain(x, &ctx.plain(slots)?)?;
        if k > 0 {
            t = ctx.rotate(&t, -(k as i64))?;
        }
        acc = Some(accumulate(acc, t, ctx)?);
    }
    let span = d2p * (d1 + d2p - 1).div_ceil(d2p).next_power_of_two();
    let span = span.min(n);
    fold_strided(&acc.expect("d2p >= 1"), d2p, span / d2p, ctx)
}

/// Closed-form operation counts of [`cpvm_inner_diagonal`]: (mults, rotations).
pub fn cpvm_counts(d1: usize, d2: usize, n: usize) -> (u64, u64) {
    let d2p = d2.max(1).next_power_of_two();
    let span = (d2p * (d1 + d2p - 1).div_ceil(d2p).next_power_of_two()).min(n);
    (d2p as u64, (d2p - 1) as u64 + (span / d2p).trailing_zeros() as u64)
}

/// Closed-form multiplication count of [`cpmm_outer_diagonal`].
pub fn cpmm_mults(d1: usize, d2: usize, group: usize) -> u64 {
    let d2p = d2.next_power_of_two();
    let parts = d1.div_ceil(group) as u64;
    if group >= d2p {
        parts * d2p as u64
    } else {
        parts * d2.div_ceil(group) as u64 * group as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendParams;
    use crate::encodings::{decode, encode};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ctx(n: usize, p: u64) -> Context {
        Context::new(BackendParams::with_modulus(n, p).unwrap(), 9).unwrap()
    }

    fn diag(w: &Matrix, c: &Context) -> PackedMatrix {
        encode(w, Encoding::diagonal(w.rows(), w.cols()), c, false).unwrap()
    }

    fn naive_product(x: &Matrix, w: &Matrix) -> Matrix {
        let p = x.modulus() as u128;
        Matrix::from_fn(x.rows(), w.cols(), x.modulus(), |i, j| {
            ((0..x.cols())
                .map(|k| x.get(i, k) as u128 * w.get(k, j) as u128)
                .sum::<u128>()
                % p) as u64
        })
    }

    #[test]
    fn fold_examples() {
        let c = ctx(8, 17);
        let a = c.encrypt_values(&[1, 2, 3, 4]).unwrap();
        let before = c.counter().rotate;
        let f = fold_sum(&a, 4, &c).unwrap();
        assert_eq!(c.decrypt(&f).unwrap().slots()[0], 10);
        assert_eq!(c.counter().rotate - before, 2);

        let b = c.encrypt_values(&[1, 1, 1, 1, 2, 2, 2, 2]).unwrap();
        let f = c.decrypt(&fold_sum(&b, 4, &c).unwrap()).unwrap();
        assert_eq!((f.slots()[0], f.slots()[4]), (4, 8));

        let before = c.counter().rotate;
        let same = fold_sum(&a, 1, &c).unwrap();
        assert_eq!(c.decrypt(&same).unwrap(), c.decrypt(&a).unwrap());
        assert_eq!(c.counter().rotate, before);
        assert!(fold_sum(&a, 3, &c).is_err());
    }

    #[test]
    fn cpmm_small_product() {
        let c = ctx(4, 97);
        let x = Matrix::from_rows(&[vec![1, 2], vec![3, 4]], 97).unwrap();
        let w = Matrix::from_rows(&[vec![5, 6], vec![7, 8]], 97).unwrap();
        for g in [1, 2] {
            let xp = encode(&x, Encoding::outer_grouped(2, 2, g), &c, true).unwrap();
            let y = cpmm_outer_diagonal(&xp, &diag(&w, &c), &c).unwrap();
            assert_eq!(
                decode(&y, &c).unwrap(),
                Matrix::from_rows(&[vec![19, 22], vec![43, 50]], 97).unwrap()
            );
        }
    }

    #[test]
    fn cpmm_identity_weights() {
        let c = ctx(16, 97);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let x = Matrix::random(4, 4, 97, &mut rng);
        let xp = encode(&x, Encoding::outer_grouped(4, 4, 4), &c, true).unwrap();
        let y = cpmm_outer_diagonal(&xp, &diag(&Matrix::identity(4, 97), &c), &c).unwrap();
        assert_eq!(decode(&y, &c).unwrap(), x);
    }

    #[test]
    fn cpvm_examples() {
        let c = ctx(4, 97);
        let x = c.encrypt_values(&[1, 2]).unwrap();
        let w = Matrix::from_rows(&[vec![5, 6], vec![7, 8]], 97).unwrap();
        let y = c.decrypt(&cpvm_inner_diagonal(&x, &diag(&w, &c), &c).unwrap()).unwrap();
        assert_eq!(&y.slots()[..2], &[19, 22]);

        let v = c.encrypt_values(&[3, 9, 4, 1]).unwrap();
        let y = c
            .decrypt(&cpvm_inner_diagonal(&v, &diag(&Matrix::identity(4, 97), &c), &c).unwrap())
            .unwrap();
        assert_eq!(y.slots(), &[3, 9, 4, 1]);
    }

    #[test]
    fn cpvm_counts_match_formula_and_grow_logarithmically() {
        let c = ctx(1024, 12289);
        let mut last = None;
        for d1 in [64usize, 128, 256, 512] {
            let w = Matrix::zeros(d1, 16, 12289);
            let x = c.encrypt_values(&vec![1; d1]).unwrap();
            let before = c.counter();
            let out = cpvm_inner_diagonal(&x, &diag(&w, &c), &c).unwrap();
            let used = c.counter().since(&before);
            assert_eq!((used.mult_plain, used.rotate), cpvm_counts(d1, 16, 1024));
            assert_eq!(out.n_slots(), 1024);
            if let Some(prev) = last {
                assert_eq!(used.rotate, prev + 1, "doubling d1 adds one rotation");
            }
            last = Some(used.rotate);
        }
    }

    #[test]
    fn cpmm_mults_scale_linearly_in_m() {
        let n = 1024;
        let c = ctx(n, 12289);
        let (d1, d2) = (96, 16);
        let w = diag(&Matrix::zeros(d1, d2, 12289), &c);
        let mut counts = Vec::new();
        for m in [32usize, 64, 128] {
            let g = dense_group(m, d1, n);
            let xp = encode(
                &Matrix::zeros(m, d1, 12289),
                Encoding::outer_grouped(m, d1, g),
                &c,
                true,
            )
            .unwrap();
            let before = c.counter().mult_plain;
            cpmm_outer_diagonal(&xp, &w, &c).unwrap();
            let used = c.counter().mult_plain - before;
            assert_eq!(used, cpmm_mults(d1, d2, g));
            counts.push(used);
        }
        // m * d1 * d2 / n
        assert_eq!(counts, vec![48, 96, 192]);
    }

    fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
        (1usize..=8, 1usize..=8, 1usize..=8, 0usize..4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cpmm_matches_oracle((m, d1, d2, gexp) in dims(), seed in any::<u64>()) {
            let c = ctx(64, 257);
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let x = Matrix::random(m, d1, 257, &mut rng);
            let w = Matrix::random(d1, d2, 257, &mut rng);
            let g = (1usize << gexp).min(64 / m.next_power_of_two());
            let xp = encode(&x, Encoding::outer_grouped(m, d1, g), &c, true).unwrap();
            let before = c.counter().mult_plain;
            let y = cpmm_outer_diagonal(&xp, &diag(&w, &c), &c).unwrap();
            prop_assert_eq!(c.counter().mult_plain - before, cpmm_mults(d1, d2, g));
            prop_assert_eq!(decode(&y, &c).unwrap(), naive_product(&x, &w));
        }

        #[test]
        fn cpvm_matches_oracle(d1 in 1usize..=16, d2 in 1usize..=16, seed in any::<u64>()) {
            let c = ctx(16, 97);
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let x = Matrix::random(1, d1, 97, &mut rng);
            let w = Matrix::random(d1, d2, 97, &mut rng);
            let ct = c.encrypt_values(x.row(0)).unwrap();
            let y = c.decrypt(&cpvm_inner_diagonal(&ct, &diag(&w, &c), &c).unwrap()).unwrap();
            let want = naive_product(&x, &w);
            prop_assert_eq!(&y.slots()[..d2], want.row(0));
        }

        #[test]
        fn fold_sum_block_sums(v in prop::collection::vec(0u64..97, 16), bexp in 0u32..5) {
            let c = ctx(16, 97);
            let block = 1usize << bexp;
            let out = c.decrypt(&fold_sum(&c.encrypt_values(&v).unwrap(), block, &c).unwrap()).unwrap();
            for b in 0..16 / block {
                let want = v[b * block..(b + 1) * block].iter().sum::<u64>() % 97;
                prop_assert_eq!(out.slots()[b * block], want);
            }
        }
    }
}
