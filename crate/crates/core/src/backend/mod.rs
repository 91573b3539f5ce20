//! Instrumented SIMD-ciphertext emulation.
//!
//! A [`SlotCiphertext`] is an `n`-slot vector over `Z_p` tagged with a noise
//! budget. Every operation is exact slot-wise arithmetic; the only thing that
//! distinguishes it from plaintext is the ledger: each operation charges the
//! configured number of bits, the result inherits the minimum budget of its
//! ciphertext inputs, and a ciphertext at zero budget can no longer be
//! decrypted. All operations are counted in the context's [`OpCounter`].

mod counter;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub use counter::OpCounter;
pub(crate) use counter::{AtomicCounter, Event};
pub(crate) use params::mul_mod;
pub use params::{
    is_prime, smallest_batching_prime, BackendParams, NoiseCosts, DEFAULT_NOISE_BUDGET, DEFAULT_REFRESH_THRESHOLD,
};

use crate::error::{Error, Result};

/// Plaintext operand of CT×PT operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlainVector {
    slots: Vec<u64>,
}

impl PlainVector {
    pub fn slots(&self) -> &[u64] {
        &self.slots
    }

    pub fn into_slots(self) -> Vec<u64> {
        self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// An encrypted slot vector. Immutable: every operation returns a new value.
#[derive(Clone, Debug)]
pub struct SlotCiphertext {
    slots: Arc<[u64]>,
    noise_budget: u32,
    id: u64,
}

impl SlotCiphertext {
    pub fn noise_budget(&self) -> u32 {
        self.noise_budget
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    /// Raw slot contents. Only test oracles and snapshot code should look here;
    /// protocol code goes through [`Context::decrypt`].
    pub fn raw_slots(&self) -> &[u64] {
        &self.slots
    }

    /// Same ciphertext with a lowered budget, for simulating ciphertexts that
    /// arrive after deep computation.
    pub fn with_noise_budget(&self, bits: u32) -> SlotCiphertext {
        SlotCiphertext {
            slots: self.slots.clone(),
            noise_budget: bits.min(self.noise_budget),
            id: self.id,
        }
    }

    pub(crate) fn from_raw(slots: Vec<u64>, noise_budget: u32, id: u64) -> SlotCiphertext {
        SlotCiphertext {
            slots: slots.into(),
            noise_budget,
            id,
        }
    }
}

/// Emulation context: parameters, the shared operation counter and an
/// identifier source.
#[derive(Debug)]
pub struct Context {
    params: BackendParams,
    seed: u64,
    counter: Arc<AtomicCounter>,
    next_id: AtomicU64,
}

/// Handle through which the share-domain emulation reports channel bytes
/// into a context's counter.
#[derive(Clone, Debug)]
pub struct MpcMeter(Arc<AtomicCounter>);

impl MpcMeter {
    pub fn add_bytes(&self, bytes: u64) {
        self.0.add_bytes(bytes);
    }
}

impl Context {
    pub fn new(params: BackendParams, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            seed,
            counter: Arc::default(),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn params(&self) -> &BackendParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_slots(&self) -> usize {
        self.params.n_slots
    }

    pub fn modulus(&self) -> u64 {
        self.params.plain_modulus
    }

    /// Deterministic RNG derived from the context seed and a caller label.
    pub fn rng(&self, label: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(self.seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn counter(&self) -> OpCounter {
        self.counter.snapshot()
    }

    pub fn reset_counter(&self) {
        self.counter.reset();
    }

    pub fn mpc_meter(&self) -> MpcMeter {
        MpcMeter(self.counter.clone())
    }

    pub(crate) fn record_refresh(&self) {
        self.counter.bump(Event::Refresh);
    }

    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Builds a plaintext vector; values are reduced mod `p`.
    pub fn plain(&self, values: Vec<u64>) -> Result<PlainVector> {
        self.check_len(values.len())?;
        let p = self.modulus();
        Ok(PlainVector {
            slots: values.into_iter().map(|v| v % p).collect(),
        })
    }

    /// Plaintext from a prefix of values, zero-padded to the slot count.
    pub fn plain_padded(&self, values: &[u64]) -> Result<PlainVector> {
        if values.len() > self.n_slots() {
            return Err(Error::Dimension(format!(
                "{} values do not fit in {} slots",
                values.len(),
                self.n_slots()
            )));
        }
        let mut slots = vec![0u64; self.n_slots()];
        let p = self.modulus();
        for (s, &v) in slots.iter_mut().zip(values) {
            *s = v % p;
        }
        Ok(PlainVector { slots })
    }

    /// Plaintext from signed integers using the wraparound convention.
    pub fn plain_signed(&self, values: &[i64]) -> Result<PlainVector> {
        let p = self.modulus() as i64;
        let reduced: Vec<u64> = values.iter().map(|&v| v.rem_euclid(p) as u64).collect();
        self.plain_padded(&reduced)
    }

    pub fn zeros(&self) -> PlainVector {
        PlainVector {
            slots: vec![0; self.n_slots()],
        }
    }

    /// Uniformly random plaintext vector.
    pub fn random_plain<R: Rng + ?Sized>(&self, rng: &mut R) -> PlainVector {
        let p = self.modulus();
        PlainVector {
            slots: (0..self.n_slots()).map(|_| rng.gen_range(0..p)).collect(),
        }
    }

    /// Client-side encryption: full noise budget.
    pub fn encrypt(&self, v: &PlainVector) -> Result<SlotCiphertext> {
        self.check_len(v.len())?;
        self.counter.bump(Event::Encrypt);
        Ok(SlotCiphertext::from_raw(
            v.slots.clone(),
            self.params.initial_noise_budget,
            self.fresh_id(),
        ))
    }

    /// Encrypts a zero-padded prefix.
    pub fn encrypt_values(&self, values: &[u64]) -> Result<SlotCiphertext> {
        let pv = self.plain_padded(values)?;
        self.encrypt(&pv)
    }

    /// Trivial encryption of zero. Needs no key material, so it is neither
    /// counted as an encryption nor charged any noise.
    pub fn zero_ciphertext(&self) -> SlotCiphertext {
        SlotCiphertext::from_raw(
            vec![0; self.n_slots()],
            self.params.initial_noise_budget,
            self.fresh_id(),
        )
    }

    /// Rebuilds a stored ciphertext (snapshot load). Not counted.
    pub fn restore_ciphertext(&self, slots: Vec<u64>, noise_budget: u32) -> Result<SlotCiphertext> {
        self.check_len(slots.len())?;
        if noise_budget > self.params.initial_noise_budget || slots.iter().any(|&v| v >= self.modulus()) {
            return Err(Error::Schema("stored ciphertext is out of range".into()));
        }
        Ok(SlotCiphertext::from_raw(slots, noise_budget, self.fresh_id()))
    }

    pub fn decrypt(&self, a: &SlotCiphertext) -> Result<PlainVector> {
        self.check_len(a.n_slots())?;
        if a.noise_budget == 0 {
            return Err(Error::DecryptionFailure { id: a.id });
        }
        self.counter.bump(Event::Decrypt);
        Ok(PlainVector {
            slots: a.slots.to_vec(),
        })
    }

    pub fn add(&self, a: &SlotCiphertext, b: &SlotCiphertext) -> Result<SlotCiphertext> {
        self.check_len(a.n_slots())?;
        self.check_len(b.n_slots())?;
        let budget = self.charge("add", a.noise_budget.min(b.noise_budget), self.params.noise_costs.add)?;
        self.counter.bump(Event::Add);
        let p = self.modulus();
        let slots = a
            .slots
            .iter()
            .zip(b.slots.iter())
            .map(|(&x, &y)| add_mod(x, y, p))
            .collect();
        Ok(SlotCiphertext::from_raw(slots, budget, self.fresh_id()))
    }

    pub fn add_plain(&self, a: &SlotCiphertext, m: &PlainVector) -> Result<SlotCiphertext> {
        self.check_len(a.n_slots())?;
        self.check_len(m.len())?;
        let budget = self.charge("add_plain", a.noise_budget, self.params.noise_costs.add_plain)?;
        self.counter.bump(Event::AddPlain);
        let p = self.modulus();
        let slots = a.slots.iter().zip(&m.slots).map(|(&x, &y)| add_mod(x, y, p)).collect();
        Ok(SlotCiphertext::from_raw(slots, budget, self.fresh_id()))
    }

    pub fn mult_plain(&self, a: &SlotCiphertext, m: &PlainVector) -> Result<SlotCiphertext> {
        self.check_len(a.n_slots())?;
        self.check_len(m.len())?;
        let budget = self.charge("mult_plain", a.noise_budget, self.params.noise_costs.mult_plain)?;
        self.counter.bump(Event::MultPlain);
        let p = self.modulus();
        let slots = a.slots.iter().zip(&m.slots).map(|(&x, &y)| mul_mod(x, y, p)).collect();
        Ok(SlotCiphertext::from_raw(slots, budget, self.fresh_id()))
    }

    pub fn mult_cipher(&self, a: &SlotCiphertext, b: &SlotCiphertext) -> Result<SlotCiphertext> {
        self.check_len(a.n_slots())?;
        self.check_len(b.n_slots())?;
        let budget = self.charge(
            "mult_cipher",
            a.noise_budget.min(b.noise_budget),
            self.params.noise_costs.mult_cipher,
        )?;
        self.counter.bump(Event::MultCipher);
        let p = self.modulus();
        let slots = a
            .slots
            .iter()
            .zip(b.slots.iter())
            .map(|(&x, &y)| mul_mod(x, y, p))
            .collect();
        Ok(SlotCiphertext::from_raw(slots, budget, self.fresh_id()))
    }

    /// Cyclic left shift by `k` (negative `k` shifts right):
    /// `out[i] = a[(i + k) mod n]`.
    pub fn rotate(&self, a: &SlotCiphertext, k: i64) -> Result<SlotCiphertext> {
        self.check_len(a.n_slots())?;
        let budget = self.charge("rotate", a.noise_budget, self.params.noise_costs.rotate)?;
        self.counter.bump(Event::Rotate);
        let n = self.n_slots();
        let shift = k.rem_euclid(n as i64) as usize;
        let mut slots = Vec::with_capacity(n);
        slots.extend_from_slice(&a.slots[shift..]);
        slots.extend_from_slice(&a.slots[..shift]);
        Ok(SlotCiphertext::from_raw(slots, budget, self.fresh_id()))
    }

    fn charge(&self, op: &'static str, have: u32, need: u32) -> Result<u32> {
        have.checked_sub(need).ok_or(Error::BudgetExhausted { op, have, need })
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.n_slots() {
            return Err(Error::LengthMismatch {
                expected: self.n_slots(),
                got,
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn add_mod(a: u64, b: u64, p: u64) -> u64 {
    let s = a + b;
    if s >= p {
        s - p
    } else {
        s
    }
}

#[inline]
pub(crate) fn neg_mod(a: u64, p: u64) -> u64 {
    if a == 0 {
        0
    } else {
        p - a
    }
}

/// Signed representative of a residue: values at or above `p/2` are negative.
#[inline]
pub fn to_signed(x: u64, p: u64) -> i64 {
    if x > (p - 1) / 2 {
        x as i64 - p as i64
    } else {
        x as i64
    }
}

#[inline]
pub fn from_signed(x: i64, p: u64) -> u64 {
    x.rem_euclid(p as i64) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx16() -> Context {
        Context::new(BackendParams::with_modulus(16, 97).unwrap(), 1).unwrap()
    }

    #[test]
    fn encrypt_decrypt_roundtrip() {
        let ctx = ctx16();
        let zero = ctx.encrypt(&ctx.zeros()).unwrap();
        assert_eq!(zero.noise_budget(), DEFAULT_NOISE_BUDGET);
        assert!(ctx.decrypt(&zero).unwrap().slots().iter().all(|&x| x == 0));

        let v: Vec<u64> = (1..=16).collect();
        let ct = ctx.encrypt(&ctx.plain(v.clone()).unwrap()).unwrap();
        assert_eq!(ctx.decrypt(&ct).unwrap().slots(), &v[..]);
        let c = ctx.counter();
        assert_eq!((c.encrypt, c.decrypt), (2, 2));
    }

    #[test]
    fn ledger_after_mult_cipher() {
        let ctx = ctx16();
        let a = ctx.encrypt_values(&[2, 3]).unwrap();
        let b = ctx.encrypt_values(&[4, 5]).unwrap();
        let c = ctx.mult_cipher(&a, &b).unwrap();
        assert_eq!(c.noise_budget(), DEFAULT_NOISE_BUDGET - 40);
        assert_eq!(&ctx.decrypt(&c).unwrap().slots()[..2], &[8, 15]);
        // min of the inputs
        let low = a.with_noise_budget(100);
        assert_eq!(ctx.mult_cipher(&low, &b).unwrap().noise_budget(), 60);
    }

    #[test]
    fn add_wraps_modulus() {
        let ctx = ctx16();
        let a = ctx.encrypt_values(&[96, 0]).unwrap();
        let b = ctx.encrypt_values(&[2, 0]).unwrap();
        let s = ctx.add(&a, &b).unwrap();
        assert_eq!(&ctx.decrypt(&s).unwrap().slots()[..2], &[1, 0]);
        let s = ctx
            .add(
                &ctx.encrypt_values(&[1, 2]).unwrap(),
                &ctx.encrypt_values(&[3, 4]).unwrap(),
            )
            .unwrap();
        assert_eq!(&ctx.decrypt(&s).unwrap().slots()[..2], &[4, 6]);
        let id = ctx.add_plain(&a, &ctx.zeros()).unwrap();
        assert_eq!(ctx.decrypt(&id).unwrap(), ctx.decrypt(&a).unwrap());
    }

    #[test]
    fn mult_plain_identities() {
        let ctx = ctx16();
        let a = ctx.encrypt_values(&[3, 5]).unwrap();
        let ones = ctx.plain(vec![1; 16]).unwrap();
        assert_eq!(
            ctx.decrypt(&ctx.mult_plain(&a, &ones).unwrap()).unwrap(),
            ctx.decrypt(&a).unwrap()
        );
        let z = ctx.mult_plain(&a, &ctx.zeros()).unwrap();
        assert!(ctx.decrypt(&z).unwrap().slots().iter().all(|&x| x == 0));
        let twos = ctx.plain_padded(&[2, 2]).unwrap();
        let r = ctx.mult_plain(&a, &twos).unwrap();
        assert_eq!(&ctx.decrypt(&r).unwrap().slots()[..2], &[6, 10]);
        assert_eq!(r.noise_budget(), DEFAULT_NOISE_BUDGET - 20);
        let ones_ct = ctx.encrypt(&ones).unwrap();
        assert_eq!(
            ctx.decrypt(&ctx.mult_cipher(&a, &ones_ct).unwrap()).unwrap(),
            ctx.decrypt(&a).unwrap()
        );
    }

    #[test]
    fn rotate_left_and_inverse() {
        let ctx = Context::new(BackendParams::with_modulus(4, 17).unwrap(), 0).unwrap();
        let a = ctx.encrypt_values(&[1, 2, 3, 4]).unwrap();
        let r = ctx.rotate(&a, 1).unwrap();
        assert_eq!(ctx.decrypt(&r).unwrap().slots(), &[2, 3, 4, 1]);
        let back = ctx.rotate(&r, 3).unwrap();
        assert_eq!(ctx.decrypt(&back).unwrap().slots(), &[1, 2, 3, 4]);
        let before = ctx.counter().rotate;
        let same = ctx.rotate(&a, 0).unwrap();
        assert_eq!(ctx.decrypt(&same).unwrap().slots(), &[1, 2, 3, 4]);
        assert_eq!(ctx.counter().rotate, before + 1);
    }

    #[test]
    fn budget_exhaustion_and_decrypt_failure() {
        let ctx = ctx16();
        let a = ctx.encrypt_values(&[1]).unwrap().with_noise_budget(30);
        assert!(matches!(ctx.mult_cipher(&a, &a), Err(Error::BudgetExhausted { .. })));
        let dead = a.with_noise_budget(0);
        assert!(matches!(ctx.decrypt(&dead), Err(Error::DecryptionFailure { .. })));
        // exactly reaching zero is allowed, decrypting it is not
        let z = ctx.mult_plain(&a.with_noise_budget(20), &ctx.zeros()).unwrap();
        assert_eq!(z.noise_budget(), 0);
        assert!(ctx.decrypt(&z).is_err());
    }

    #[test]
    fn length_mismatch() {
        let ctx = ctx16();
        assert!(matches!(ctx.plain(vec![1, 2, 3]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn concurrent_counting() {
        let ctx = ctx16();
        let a = ctx.encrypt_values(&[1]).unwrap();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..25 {
                        ctx.rotate(&a, 1).unwrap();
                    }
                });
            }
        });
        assert_eq!(ctx.counter().rotate, 100);
    }

    #[derive(Clone, Debug)]
    enum Op {
        Add(usize),
        AddPlain(Vec<u64>),
        MultPlain(Vec<u64>),
        MultCipher(usize),
        Rotate(i64),
    }

    fn op_strategy() -> impl Strategy<Value = Op> {
        let vec = prop::collection::vec(0u64..97, 8);
        prop_oneof![
            (0usize..3).prop_map(Op::Add),
            vec.clone().prop_map(Op::AddPlain),
            vec.prop_map(Op::MultPlain),
            (0usize..3).prop_map(Op::MultCipher),
            (-20i64..20).prop_map(Op::Rotate),
        ]
    }

    proptest! {
        /// Any sequence of operations decrypts to the same sequence applied to
        /// plaintext vectors, and the counters equal the invocation counts.
        #[test]
        fn emulation_is_exact(inputs in prop::collection::vec(prop::collection::vec(0u64..97, 8), 3),
                              ops in prop::collection::vec(op_strategy(), 0..4)) {
            let ctx = Context::new(BackendParams::with_modulus(8, 97).unwrap(), 0).unwrap();
            let cts: Vec<_> = inputs.iter().map(|v| ctx.encrypt(&ctx.plain(v.clone()).unwrap()).unwrap()).collect();
            let mut ct = cts[0].clone();
            let mut plain = inputs[0].clone();
            let mut expected = OpCounter { encrypt: 3, ..Default::default() };
            for op in &ops {
                match op {
                    Op::Add(i) => {
                        ct = ctx.add(&ct, &cts[*i]).unwrap();
                        for (x, y) in plain.iter_mut().zip(&inputs[*i]) { *x = (*x + y) % 97; }
                        expected.add += 1;
                    }
                    Op::AddPlain(v) => {
                        ct = ctx.add_plain(&ct, &ctx.plain(v.clone()).unwrap()).unwrap();
                        for (x, y) in plain.iter_mut().zip(v) { *x = (*x + y) % 97; }
                        expected.add_plain += 1;
                    }
                    Op::MultPlain(v) => {
                        ct = ctx.mult_plain(&ct, &ctx.plain(v.clone()).unwrap()).unwrap();
                        for (x, y) in plain.iter_mut().zip(v) { *x = (*x * y) % 97; }
                        expected.mult_plain += 1;
                    }
                    Op::MultCipher(i) => {
                        ct = ctx.mult_cipher(&ct, &cts[*i]).unwrap();
                        for (x, y) in plain.iter_mut().zip(&inputs[*i]) { *x = (*x * y) % 97; }
                        expected.mult_cipher += 1;
                    }
                    Op::Rotate(k) => {
                        ct = ctx.rotate(&ct, *k).unwrap();
                        plain.rotate_left(k.rem_euclid(8) as usize);
                        expected.rotate += 1;
                    }
                }
            }
            let out = ctx.decrypt(&ct).unwrap();
            prop_assert_eq!(out.slots(), &plain[..]);
            expected.decrypt = 1;
            prop_assert_eq!(ctx.counter(), expected);
        }

        #[test]
        fn rotations_compose(v in prop::collection::vec(0u64..97, 8), i in -30i64..30, j in -30i64..30) {
            let ctx = Context::new(BackendParams::with_modulus(8, 97).unwrap(), 0).unwrap();
            let a = ctx.encrypt(&ctx.plain(v).unwrap()).unwrap();
            let two = ctx.rotate(&ctx.rotate(&a, i).unwrap(), j).unwrap();
            let one = ctx.rotate(&a, (i + j).rem_euclid(8)).unwrap();
            prop_assert_eq!(ctx.decrypt(&two).unwrap(), ctx.decrypt(&one).unwrap());
            prop_assert_eq!(two.noise_budget(), DEFAULT_NOISE_BUDGET - 4);
        }
    }
}
