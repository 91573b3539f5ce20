//! Fixed-point nonlinear layers over [`FixedOps`].

use statrs::function::erf::erf;

use super::{FixedOps, FixedPointParams};
use crate::error::{Error, Result};

/// GELU is linear above and zero below this magnitude.
pub const GELU_RANGE: f64 = 3.2;

/// Least-squares quartic fit of GELU on `[0, 3.2]` in nested form.
///
/// `P(a) = A·u² + B·u + C + D·a` with `u = a·(a + b)` equals
/// `c4 a⁴ + c3 a³ + c2 a² + c1 a + c0` for `c = [0.02228214, -0.19163567,
/// 0.55614178, 0.45187265, 0.00337046]`. Two secret products (`u` and `u²`).
/// The fitting script lives in `scripts/fit_gelu.py`.
#[derive(Clone, Copy, Debug)]
pub struct GeluCoefficients {
    pub a: f64,
    pub b: f64,
    pub bb: f64,
    pub c: f64,
    pub d: f64,
}

impl GeluCoefficients {
    pub const FIT: Self = Self {
        a: 0.022_282_14,
        b: -4.300_208,
        bb: 0.144_105,
        c: 0.003_370_46,
        d: 1.071_555,
    };
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_reference(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Real-valued version of the approximation.
pub fn gelu_poly_real(x: f64) -> f64 {
    if x > GELU_RANGE {
        return x;
    }
    if x < -GELU_RANGE {
        return 0.0;
    }
    let k = GeluCoefficients::FIT;
    let a = x.abs();
    let u = a * (a + k.b);
    k.a * u * u + k.bb * u + k.c + k.d * a + x.min(0.0)
}

fn round_scaled(v: f64, bits: u32) -> i64 {
    (v * (1u64 << bits) as f64).round() as i64
}

/// GELU on scale-`f` inputs, output at scale `f`.
pub fn gelu<O: FixedOps>(ops: &mut O, x: &O::V, fp: &FixedPointParams) -> O::V {
    let f = fp.frac_bits;
    let k = GeluCoefficients::FIT;
    let range = round_scaled(GELU_RANGE, f);
    let a = ops.ideal_map(x, &|v| v.abs().min(range));
    let ab = ops.add_public(&a, &[round_scaled(k.b, f)]);
    let u = ops.mul(&a, &ab);
    let u = ops.truncate(&u, f);
    let u2 = ops.mul(&u, &u);
    let u2 = ops.truncate(&u2, f);
    // scale 2f+4 accumulation
    let t1 = ops.mul_public(&u2, &[round_scaled(k.a, f + 4)]);
    let t2 = ops.mul_public(&u, &[round_scaled(k.bb, f + 4)]);
    let t3 = ops.mul_public(&a, &[round_scaled(k.d, f + 4)]);
    let s = ops.add(&t1, &t2);
    let s = ops.add(&s, &t3);
    let s = ops.add_public(&s, &[round_scaled(k.c, 2 * f + 4)]);
    let poly = ops.truncate(&s, f + 4);
    let neg = ops.ideal_map(x, &|v| v.min(0));
    let inner = ops.add(&poly, &neg);
    ops.ideal_map2(x, &inner, &|v, q| {
        if v > range {
            v
        } else if v < -range {
            0
        } else {
            q
        }
    })
}

fn bit_length(v: i64) -> u32 {
    if v <= 0 {
        0
    } else {
        64 - v.leading_zeros()
    }
}

/// `2^(2f+6) / S` at scale `f+6` for a positive scale-`f` input `S`, by
/// Newton iteration `y <- y (2 - S y)` from a bit-length seed.
///
/// The first two steps evaluate `y·(2 - S y)` with the second factor cut to
/// scale `f` so the product fits the modulus; later steps use the
/// equivalent `y + y (1 - S y)`, whose correction term is small enough to
/// keep at full scale.
pub fn reciprocal<O: FixedOps>(ops: &mut O, s: &O::V, fp: &FixedPointParams) -> O::V {
    let f = fp.frac_bits;
    let mut y = ops.ideal_map(s, &|v| {
        let l = bit_length(v) as f64;
        (2f64).powf(2.0 * f as f64 + 6.5 - l).round() as i64
    });
    for it in 0..fp.reciprocal_iterations {
        let sy = ops.mul(s, &y);
        let t = ops.truncate(&sy, f);
        let neg = ops.mul_public(&t, &[-1]);
        if it < 2 {
            let d = ops.add_public(&neg, &[2i64 << (f + 6)]);
            let d = ops.truncate(&d, 6);
            let prod = ops.mul(&y, &d);
            y = ops.truncate(&prod, f);
        } else {
            let eps = ops.add_public(&neg, &[1i64 << (f + 6)]);
            let corr = ops.mul(&y, &eps);
            let corr = ops.truncate(&corr, f + 6);
            y = ops.add(&y, &corr);
        }
    }
    y
}

/// Softmax of scale-`f` scores; outputs at scale `f`.
///
/// `x - max` is split as `-ln2·z + r` with integer `z >= 0` and
/// `r ∈ (-ln2, 0]`; `exp(r)` uses `0.3585 (r + 1.353)² + 0.344` and the
/// result is shifted right by `z`. The final rescale rounds to nearest.
pub fn softmax<O: FixedOps>(ops: &mut O, x: &O::V, fp: &FixedPointParams) -> Result<O::V> {
    let len = ops.len(x);
    if len == 0 {
        return Err(Error::Empty("softmax over zero scores"));
    }
    let f = fp.frac_bits;
    let mx = ops.ideal_reduce(x, &|v| *v.iter().max().expect("non-empty"));
    let mxb = ops.broadcast(&mx, len);
    let xc = ops.sub(x, &mxb);
    let floor = -(16i64 << f);
    let xc = ops.ideal_map(&xc, &|v| v.max(floor));
    let inv_ln2 = (1024.0 / std::f64::consts::LN_2).round() as i64;
    let zs = ops.mul_public(&xc, &[-inv_ln2]);
    let z = ops.truncate(&zs, f + 10);
    let zl = ops.mul_public(&z, &[round_scaled(std::f64::consts::LN_2, f)]);
    let r = ops.add(&xc, &zl);
    let t = ops.add_public(&r, &[round_scaled(1.353, f)]);
    let t2 = ops.mul(&t, &t);
    let t2 = ops.truncate(&t2, f);
    let e = ops.mul_public(&t2, &[round_scaled(0.3585, f + 4)]);
    let e = ops.add_public(&e, &[round_scaled(0.344, 2 * f + 4)]);
    let e = ops.truncate(&e, f + 4);
    let e = ops.ideal_map2(&e, &z, &|v, s| v >> s.clamp(0, 62));
    let total = ops.sum(&e);
    let inv = reciprocal(ops, &total, fp);
    let invb = ops.broadcast(&inv, len);
    let out = ops.mul(&e, &invb);
    let out = ops.add_public(&out, &[1i64 << (f + 5)]);
    Ok(ops.truncate(&out, f + 6))
}

/// `1/sqrt(v)` at scale `f+2` for a non-negative scale-`f` input, three
/// Newton steps `y <- y (3 - v y²) / 2` from a bit-length seed capped at
/// `2^(f+6)`.
pub fn inv_sqrt<O: FixedOps>(ops: &mut O, v: &O::V, fp: &FixedPointParams) -> O::V {
    let f = fp.frac_bits;
    let cap = 1i64 << (f + 6);
    let mut y = ops.ideal_map(v, &|x| {
        let l = bit_length(x) as f64 - f as f64;
        let seed = (2f64).powf(f as f64 + 2.0 - l / 2.0 + 0.25).round() as i64;
        seed.min(cap)
    });
    for _ in 0..3 {
        let vy = ops.mul(v, &y);
        let t1 = ops.truncate(&vy, f + 2);
        let t1y = ops.mul(&t1, &y);
        let t2 = ops.truncate(&t1y, f + 2);
        let neg = ops.mul_public(&t2, &[-1]);
        let d = ops.add_public(&neg, &[3i64 << f]);
        let prod = ops.mul(&y, &d);
        y = ops.truncate(&prod, f + 1);
    }
    y
}

/// `γ·(x - μ)/σ + β` over one row of scale-`f` values. A zero-variance row
/// yields `β`.
pub fn layernorm<O: FixedOps>(
    ops: &mut O,
    x: &O::V,
    gamma: &[i64],
    beta: &[i64],
    fp: &FixedPointParams,
) -> Result<O::V> {
    let d = ops.len(x);
    if d < 2 {
        return Err(Error::Dimension(format!("layernorm needs at least 2 values, got {d}")));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension("layernorm gain/bias length mismatch".into()));
    }
    let f = fp.frac_bits;
    let inv_d = (256.0 / d as f64).round() as i64;
    let s = ops.sum(x);
    let mean = ops.mul_public(&s, &[inv_d]);
    let mean = ops.truncate(&mean, 8);
    let meanb = ops.broadcast(&mean, d);
    let xc = ops.sub(x, &meanb);
    let sq = ops.mul(&xc, &xc);
    let sq = ops.truncate(&sq, f);
    let ss = ops.sum(&sq);
    let var = ops.mul_public(&ss, &[inv_d]);
    let var = ops.truncate(&var, 8);
    let y = inv_sqrt(ops, &var, fp);
    let yb = ops.broadcast(&y, d);
    let norm = ops.mul(&xc, &yb);
    let norm = ops.truncate(&norm, f + 2);
    let scaled = ops.mul_public(&norm, gamma);
    let scaled = ops.truncate(&scaled, f);
    Ok(ops.add_public(&scaled, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinear::{MpcSession, PlainOps};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const P: u64 = 536_903_681;

    fn fp() -> FixedPointParams {
        FixedPointParams::new(10, P).unwrap()
    }

    fn run_plain(xs: &[f64], op: impl Fn(&mut PlainOps, &Vec<u64>) -> Vec<u64>) -> Vec<f64> {
        let fp = fp();
        let mut ops = PlainOps::new(P);
        let v = fp.encode_all(xs);
        fp.decode_all(&op(&mut ops, &v))
    }

    #[test]
    fn fixed_point_headroom() {
        assert!(FixedPointParams::new(10, P).is_ok());
        assert!(FixedPointParams::new(12, 1 << 29).is_err());
        let fp = fp();
        assert_eq!(fp.decode(fp.encode(-1.5)), -1.5);
    }

    #[test]
    fn truncation_examples() {
        let fp = fp();
        let mut ops = PlainOps::new(P);
        let one = fp.encode_all(&[1.0, 0.5, 0.0]);
        let sq = ops.mul(&one, &one);
        let t = ops.truncate(&sq, 10);
        assert_eq!(t, fp.encode_all(&[1.0, 0.25, 0.0]));
    }

    #[test]
    fn gelu_points() {
        let out = run_plain(&[0.0, 10.0, -10.0, 1.0], |o, v| gelu(o, v, &fp()));
        assert!(out[0].abs() <= 0.005);
        assert_eq!(out[1], 10.0);
        assert_eq!(out[2], 0.0);
        let tol = (2f64.powi(-10)).max(0.0034) + 2.0 * 2f64.powi(-10);
        assert!((out[3] - 0.841_344_746).abs() <= tol, "{}", out[3]);
    }

    #[test]
    fn gelu_polynomial_error_bound() {
        let mut worst: f64 = 0.0;
        for i in 0..=100_000 {
            let x = -3.2 + 6.4 * i as f64 / 100_000.0;
            worst = worst.max((gelu_poly_real(x) - gelu_reference(x)).abs());
        }
        assert!(worst < 0.0035, "worst = {worst}");
    }

    #[test]
    fn softmax_examples() {
        let out = run_plain(&[2.0, 1.0, 0.0], |o, v| softmax(o, v, &fp()).unwrap());
        for (got, want) in out.iter().zip([0.665_240_96, 0.244_728_47, 0.090_030_57]) {
            assert!((got - want).abs() < 8.0 * 2f64.powi(-10), "{got} vs {want}");
        }
        assert_eq!(run_plain(&[3.7], |o, v| softmax(o, v, &fp()).unwrap()), vec![1.0]);
        let u = run_plain(&[0.5; 4], |o, v| softmax(o, v, &fp()).unwrap());
        assert!(
            u.iter().all(|&v| v == u[0]) && (u[0] - 0.25).abs() < 2.0 * 2f64.powi(-10),
            "{u:?}"
        );
        let mut ops = PlainOps::new(P);
        assert!(softmax(&mut ops, &vec![], &fp()).is_err());
    }

    #[test]
    fn masked_scores_vanish() {
        let big = -(2f64.powi(6));
        let out = run_plain(&[0.3, big, big], |o, v| softmax(o, v, &fp()).unwrap());
        assert!(out[1] <= 2f64.powi(-10) && out[2] <= 2f64.powi(-10));
    }

    #[test]
    fn reciprocal_accuracy() {
        let fp = fp();
        let mut ops = PlainOps::new(P);
        for s in [1.0, 1.7, 3.0, 10.5, 100.0, 700.0] {
            let y = reciprocal(&mut ops, &vec![fp.encode(s)], &fp);
            let got = crate::backend::to_signed(y[0], P) as f64 / 2f64.powi(16);
            assert!((got - 1.0 / s).abs() < 3.0 * 2f64.powi(-16) + 1e-3 / s, "1/{s}: {got}");
        }
    }

    #[test]
    fn layernorm_examples() {
        let g = |d: usize| vec![1i64 << 10; d];
        let z = |d: usize| vec![0i64; d];
        let out = run_plain(&[1.0, -1.0], |o, v| layernorm(o, v, &g(2), &z(2), &fp()).unwrap());
        assert!((out[0] - 1.0).abs() < 0.01 && (out[1] + 1.0).abs() < 0.01, "{out:?}");
        let beta: Vec<i64> = (0..4).map(|i| i * 100).collect();
        let out = run_plain(&[2.5; 4], |o, v| layernorm(o, v, &g(4), &beta, &fp()).unwrap());
        assert_eq!(
            out,
            fp().decode_all(&fp().encode_all(&[0.0, 100.0 / 1024.0, 200.0 / 1024.0, 300.0 / 1024.0]))
        );
        let mut ops = PlainOps::new(P);
        assert!(layernorm(&mut ops, &vec![0], &[1], &[0], &fp()).is_err());
    }

    #[test]
    fn layernorm_statistics() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..32).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let out = run_plain(&xs, |o, v| {
                layernorm(o, v, &vec![1 << 10; 32], &vec![0; 32], &fp()).unwrap()
            });
            let mean = out.iter().sum::<f64>() / 32.0;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 2f64.powi(-8), "mean {mean}");
            assert!((var - 1.0).abs() < 2f64.powi(-6), "var {var}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn softmax_normalized(xs in prop::collection::vec(-6.0f64..6.0, 1..24)) {
            let out = run_plain(&xs, |o, v| softmax(o, v, &fp()).unwrap());
            let total: f64 = out.iter().sum();
            prop_assert!(out.iter().all(|&v| v >= 0.0));
            prop_assert!((total - 1.0).abs() <= xs.len() as f64 * 2f64.powi(-10), "sum {}", total);
        }

        /// Share execution reconstructs to the cleartext oracle bit for bit.
        #[test]
        fn shares_match_plain(xs in prop::collection::vec(-5.0f64..5.0, 2..16), seed in any::<u64>()) {
            let fp = fp();
            let v = fp.encode_all(&xs);
            let mut plain = PlainOps::new(P);
            let want_g = gelu(&mut plain, &v, &fp);
            let want_s = softmax(&mut plain, &v, &fp).unwrap();
            let gamma = vec![900i64; xs.len()];
            let beta = vec![-30i64; xs.len()];
            let want_l = layernorm(&mut plain, &v, &gamma, &beta, &fp).unwrap();
            let mut mpc = MpcSession::new(P, seed);
            let sv = mpc.share(&v);
            prop_assert_eq!(gelu(&mut mpc, &sv, &fp).reconstruct(P), want_g);
            prop_assert_eq!(softmax(&mut mpc, &sv, &fp).unwrap().reconstruct(P), want_s);
            prop_assert_eq!(layernorm(&mut mpc, &sv, &gamma, &beta, &fp).unwrap().reconstruct(P), want_l);
        }
    }
}
