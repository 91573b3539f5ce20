use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{bcast, FixedOps};
use crate::backend::{add_mod, from_signed, mul_mod, neg_mod, to_signed, Context, MpcMeter, SlotCiphertext};
use crate::error::{Error, Result};

/// Additive two-party sharing: `client + server = secret (mod p)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharePair {
    pub client: Vec<u64>,
    pub server: Vec<u64>,
}

impl SharePair {
    pub fn len(&self) -> usize {
        self.client.len()
    }

    pub fn is_empty(&self) -> bool {
        self.client.is_empty()
    }

    pub fn reconstruct(&self, p: u64) -> Vec<u64> {
        self.client
            .iter()
            .zip(&self.server)
            .map(|(&c, &s)| add_mod(c, s, p))
            .collect()
    }
}

/// Per-primitive channel tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStats {
    pub calls: u64,
    pub elements: u64,
    pub bytes: u64,
    pub rounds: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Both protocol roles in one process, with a byte-counting channel.
///
/// Costs depend only on vector lengths: a Beaver product opens two masked
/// values per element in each direction, a truncation or reshare moves one
/// element per direction, ideal functionalities are charged a flat per-element
/// price and two rounds.
#[derive(Debug)]
pub struct MpcSession {
    seed: u64,
    modulus: u64,
    elem_bits: u64,
    rng: ChaCha20Rng,
    meter: Option<MpcMeter>,
    stats: BTreeMap<String, OpStats>,
}

impl MpcSession {
    pub fn new(modulus: u64, seed: u64) -> Self {
        Self {
            seed,
            modulus,
            elem_bits: u64::from(64 - (modulus - 1).leading_zeros()),
            rng: ChaCha20Rng::seed_from_u64(seed),
            meter: None,
            stats: BTreeMap::new(),
        }
    }

    /// Session whose bytes are also reported to `ctx`'s counter.
    pub fn for_context(ctx: &Context, seed: u64) -> Self {
        let mut s = Self::new(ctx.modulus(), seed);
        s.meter = Some(ctx.mpc_meter());
        s
    }

    /// Independent child session for a labelled sub-computation. Children of
    /// the same parent and label are identical regardless of scheduling.
    pub fn fork(&self, label: u64) -> MpcSession {
        let mut s = Self::new(self.modulus, splitmix(self.seed ^ splitmix(label)));
        s.meter = self.meter.clone();
        s
    }

    /// Folds a child's tallies into this session.
    pub fn absorb(&mut self, child: &MpcSession) {
        for (op, st) in &child.stats {
            let e = self.stats.entry(op.clone()).or_default();
            e.calls += st.calls;
            e.elements += st.elements;
            e.bytes += st.bytes;
            e.rounds += st.rounds;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bytes(&self) -> u64 {
        self.stats.values().map(|s| s.bytes).sum()
    }

    pub fn rounds(&self) -> u64 {
        self.stats.values().map(|s| s.rounds).sum()
    }

    pub fn transcript(&self) -> &BTreeMap<String, OpStats> {
        &self.stats
    }

    pub fn transcript_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.stats)?)
    }

    /// Records a transfer of `elements` field elements.
    pub fn charge(&mut self, op: &str, elements: u64, rounds: u64) {
        self.charge_bytes(op, elements, (elements * self.elem_bits).div_ceil(8), rounds);
    }

    pub fn charge_bytes(&mut self, op: &str, elements: u64, bytes: u64, rounds: u64) {
        let e = self.stats.entry(op.to_string()).or_default();
        e.calls += 1;
        e.elements += elements;
        e.bytes += bytes;
        e.rounds += rounds;
        if let Some(m) = &self.meter {
            m.add_bytes(bytes);
        }
    }

    pub fn random_vec(&mut self, len: usize) -> Vec<u64> {
        let p = self.modulus;
        (0..len).map(|_| self.rng.gen_range(0..p)).collect()
    }

    /// Fresh sharing of known values.
    pub fn share(&mut self, values: &[u64]) -> SharePair {
        let r = self.random_vec(values.len());
        let p = self.modulus;
        SharePair {
            client: values
                .iter()
                .zip(&r)
                .map(|(&v, &m)| add_mod(v, neg_mod(m, p), p))
                .collect(),
            server: r,
        }
    }

    fn open_signed(&self, a: &SharePair) -> Vec<i64> {
        a.reconstruct(self.modulus)
            .into_iter()
            .map(|v| to_signed(v, self.modulus))
            .collect()
    }

    fn reshare_signed(&mut self, values: impl IntoIterator<Item = i64>) -> SharePair {
        let p = self.modulus;
        let v: Vec<u64> = values.into_iter().map(|x| from_signed(x, p)).collect();
        self.share(&v)
    }
}

impl FixedOps for MpcSession {
    type V = SharePair;

    fn modulus(&self) -> u64 {
        self.modulus
    }

    fn len(&self, a: &SharePair) -> usize {
        a.len()
    }

    fn public(&mut self, values: &[i64]) -> SharePair {
        let p = self.modulus;
        SharePair {
            client: values.iter().map(|&v| from_signed(v, p)).collect(),
            server: vec![0; values.len()],
        }
    }

    fn add(&mut self, a: &SharePair, b: &SharePair) -> SharePair {
        assert_eq!(a.len(), b.len());
        let p = self.modulus;
        let f = |x: &[u64], y: &[u64]| x.iter().zip(y).map(|(&u, &v)| add_mod(u, v, p)).collect();
        SharePair {
            client: f(&a.client, &b.client),
            server: f(&a.server, &b.server),
        }
    }

    fn sub(&mut self, a: &SharePair, b: &SharePair) -> SharePair {
        assert_eq!(a.len(), b.len());
        let p = self.modulus;
        let f = |x: &[u64], y: &[u64]| x.iter().zip(y).map(|(&u, &v)| add_mod(u, neg_mod(v, p), p)).collect();
        SharePair {
            client: f(&a.client, &b.client),
            server: f(&a.server, &b.server),
        }
    }

    fn add_public(&mut self, a: &SharePair, c: &[i64]) -> SharePair {
        let p = self.modulus;
        SharePair {
            client: a
                .client
                .iter()
                .enumerate()
                .map(|(i, &x)| add_mod(x, from_signed(bcast(c, i), p), p))
                .collect(),
            server: a.server.clone(),
        }
    }

    fn mul_public(&mut self, a: &SharePair, c: &[i64]) -> SharePair {
        let p = self.modulus;
        let f = |x: &[u64]| {
            x.iter()
                .enumerate()
                .map(|(i, &v)| mul_mod(v, from_signed(bcast(c, i), p), p))
                .collect()
        };
        SharePair {
            client: f(&a.client),
            server: f(&a.server),
        }
    }

    fn mul(&mut self, x: &SharePair, y: &SharePair) -> SharePair {
        assert_eq!(x.len(), y.len());
        let p = self.modulus;
        let n = x.len();
        // dealer triple (a, b, c = ab)
        let a = self.random_vec(n);
        let b = self.random_vec(n);
        let c: Vec<u64> = a.iter().zip(&b).map(|(&u, &v)| mul_mod(u, v, p)).collect();
        let (sa, sb, sc) = (self.share(&a), self.share(&b), self.share(&c));
        let xm = x.reconstruct(p);
        let ym = y.reconstruct(p);
        // opened e = x - a, f = y - b
        let e: Vec<u64> = xm.iter().zip(&a).map(|(&u, &v)| add_mod(u, neg_mod(v, p), p)).collect();
        let f: Vec<u64> = ym.iter().zip(&b).map(|(&u, &v)| add_mod(u, neg_mod(v, p), p)).collect();
        let mut client = Vec::with_capacity(n);
        let mut server = Vec::with_capacity(n);
        for i in 0..n {
            let ef = mul_mod(e[i], f[i], p);
            let cl = add_mod(
                add_mod(sc.client[i], mul_mod(e[i], sb.client[i], p), p),
                add_mod(mul_mod(f[i], sa.client[i], p), ef, p),
                p,
            );
            let sv = add_mod(
                sc.server[i],
                add_mod(mul_mod(e[i], sb.server[i], p), mul_mod(f[i], sa.server[i], p), p),
                p,
            );
            client.push(cl);
            server.push(sv);
        }
        self.charge("mul", 4 * n as u64, 1);
        SharePair { client, server }
    }

    fn truncate(&mut self, a: &SharePair, bits: u32) -> SharePair {
        let v = self.open_signed(a);
        self.charge("truncate", 2 * a.len() as u64, 1);
        self.reshare_signed(v.into_iter().map(|x| x >> bits))
    }

    fn ideal_map(&mut self, a: &SharePair, f: &dyn Fn(i64) -> i64) -> SharePair {
        let v = self.open_signed(a);
        self.charge("ideal", 4 * a.len() as u64, 2);
        self.reshare_signed(v.into_iter().map(f))
    }

    fn ideal_map2(&mut self, a: &SharePair, b: &SharePair, f: &dyn Fn(i64, i64) -> i64) -> SharePair {
        assert_eq!(a.len(), b.len());
        let (va, vb) = (self.open_signed(a), self.open_signed(b));
        self.charge("ideal", 6 * a.len() as u64, 2);
        self.reshare_signed(va.into_iter().zip(vb).map(|(x, y)| f(x, y)))
    }

    fn ideal_reduce(&mut self, a: &SharePair, f: &dyn Fn(&[i64]) -> i64) -> SharePair {
        let v = self.open_signed(a);
        let rounds = 1 + u64::from(usize::BITS - a.len().max(1).leading_zeros());
        self.charge("ideal_reduce", 4 * a.len() as u64, rounds);
        self.reshare_signed([f(&v)])
    }

    fn gather(&mut self, a: &SharePair, idx: &[usize]) -> SharePair {
        SharePair {
            client: idx.iter().map(|&i| a.client[i]).collect(),
            server: idx.iter().map(|&i| a.server[i]).collect(),
        }
    }

    fn concat(&mut self, parts: &[SharePair]) -> SharePair {
        SharePair {
            client: parts.iter().flat_map(|s| s.client.iter().copied()).collect(),
            server: parts.iter().flat_map(|s| s.server.iter().copied()).collect(),
        }
    }

    fn sum(&mut self, a: &SharePair) -> SharePair {
        let p = self.modulus;
        SharePair {
            client: vec![a.client.iter().fold(0, |s, &x| add_mod(s, x, p))],
            server: vec![a.server.iter().fold(0, |s, &x| add_mod(s, x, p))],
        }
    }
}

/// Server masks the ciphertext with a fresh random `r` and sends it; the
/// client decrypts. Shares cover all slots.
pub fn he_to_shares(ct: &SlotCiphertext, ctx: &Context, mpc: &mut MpcSession) -> Result<SharePair> {
    let r = mpc.random_vec(ctx.n_slots());
    let p = ctx.modulus();
    let neg: Vec<u64> = r.iter().map(|&v| neg_mod(v, p)).collect();
    let masked = ctx.add_plain(ct, &ctx.plain(neg)?)?;
    let client = ctx.decrypt(&masked)?.into_slots();
    mpc.charge_bytes("he_to_shares", ctx.n_slots() as u64, ctx.params().ciphertext_bytes(), 1);
    Ok(SharePair { client, server: r })
}

/// Client encrypts its share (zero-padded to the slot count) and sends it;
/// the server adds its own share as a plaintext.
pub fn shares_to_he(s: &SharePair, ctx: &Context, mpc: &mut MpcSession) -> Result<SlotCiphertext> {
    if s.len() > ctx.n_slots() {
        return Err(Error::Dimension(format!(
            "{} shares exceed {} slots",
            s.len(),
            ctx.n_slots()
        )));
    }
    let ct = ctx.encrypt(&ctx.plain_padded(&s.client)?)?;
    let out = ctx.add_plain(&ct, &ctx.plain_padded(&s.server)?)?;
    mpc.charge_bytes("shares_to_he", ctx.n_slots() as u64, ctx.params().ciphertext_bytes(), 1);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendParams;
    use crate::nonlinear::PlainOps;
    use proptest::prelude::*;

    fn ctx() -> Context {
        Context::new(BackendParams::with_modulus(16, 97).unwrap(), 0).unwrap()
    }

    #[test]
    fn he_share_roundtrip() {
        let c = ctx();
        let v: Vec<u64> = (0..16).collect();
        let ct = c.encrypt_values(&v).unwrap();
        let mut s1 = MpcSession::for_context(&c, 1);
        let sh = he_to_shares(&ct, &c, &mut s1).unwrap();
        assert_eq!(sh.reconstruct(97), v);
        let mut s2 = MpcSession::for_context(&c, 2);
        let sh2 = he_to_shares(&ct, &c, &mut s2).unwrap();
        assert_ne!(sh.client, sh2.client);
        assert_eq!(sh2.reconstruct(97), v);

        let back = shares_to_he(&sh, &c, &mut s1).unwrap();
        assert_eq!(c.decrypt(&back).unwrap().slots(), &v[..]);
        assert_eq!(back.noise_budget(), c.params().initial_noise_budget);
        // 16 slots of 7 bits, both directions
        assert_eq!(s1.bytes(), 2 * 14);
        assert_eq!(c.counter().mpc_bytes, 3 * 14);
    }

    #[test]
    fn zero_secret_shares_are_negatives() {
        let c = ctx();
        let mut s = MpcSession::for_context(&c, 5);
        let sh = he_to_shares(&c.encrypt(&c.zeros()).unwrap(), &c, &mut s).unwrap();
        for (a, b) in sh.client.iter().zip(&sh.server) {
            assert_eq!((a + b) % 97, 0);
        }
    }

    #[test]
    fn forks_are_deterministic() {
        let s = MpcSession::new(97, 11);
        let mut a = s.fork(3);
        let mut b = s.fork(3);
        let mut c = s.fork(4);
        assert_eq!(a.random_vec(8), b.random_vec(8));
        assert_ne!(s.fork(3).random_vec(8), c.random_vec(8));
    }

    proptest! {
        /// Every instruction agrees with the cleartext executor, and the
        /// channel cost depends only on the lengths.
        #[test]
        fn shares_agree_with_plain(x in prop::collection::vec(-40i64..40, 1..12), seed in any::<u64>(), seed2 in any::<u64>()) {
            let p = 65537;
            let y: Vec<i64> = x.iter().map(|v| 3 - v).collect();
            let mut plain = PlainOps::new(p);
            type Program<'a> = dyn FnMut(&[i64], &[i64]) -> Vec<u64> + 'a;
            let run = |ops: &mut Program| ops(&x, &y);
            let mut eval_plain = |a: &[i64], b: &[i64]| {
                let (a, b) = (plain.public(a), plain.public(b));
                let m = plain.mul(&a, &b);
                let t = plain.truncate(&m, 3);
                let s = plain.sub(&t, &a);
                let q = plain.mul_public(&s, &[-5]);
                let r = plain.ideal_map2(&q, &b, &|u, v| u.max(v));
                let mx = plain.ideal_reduce(&r, &|v| *v.iter().max().unwrap());
                let bx = plain.broadcast(&mx, r.len());
                let z = plain.add(&r, &bx);
                let sm = plain.sum(&z);
                plain.concat(&[z, sm])
            };
            let want = run(&mut eval_plain);
            let mut bytes = Vec::new();
            for sd in [seed, seed2] {
                let mut mpc = MpcSession::new(p, sd);
                let mut eval_mpc = |a: &[i64], b: &[i64]| {
                    let (a, b) = (mpc.public(a), mpc.public(b));
                    let (a, b) = (mpc.share(&a.reconstruct(p)), mpc.share(&b.reconstruct(p)));
                    let m = mpc.mul(&a, &b);
                    let t = mpc.truncate(&m, 3);
                    let s = mpc.sub(&t, &a);
                    let q = mpc.mul_public(&s, &[-5]);
                    let r = mpc.ideal_map2(&q, &b, &|u, v| u.max(v));
                    let mx = mpc.ideal_reduce(&r, &|v| *v.iter().max().unwrap());
                    let bx = mpc.broadcast(&mx, r.len());
                    let z = mpc.add(&r, &bx);
                    let sm = mpc.sum(&z);
                    mpc.concat(&[z, sm]).reconstruct(p)
                };
                prop_assert_eq!(&run(&mut eval_mpc), &want);
                bytes.push(mpc.bytes());
            }
            prop_assert_eq!(bytes[0], bytes[1]);
        }
    }
}
