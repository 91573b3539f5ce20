use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise cost (in bits) charged by each homomorphic operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseCosts {
    pub mult_plain: u32,
    pub mult_cipher: u32,
    pub rotate: u32,
    pub add: u32,
    pub add_plain: u32,
}

impl Default for NoiseCosts {
    fn default() -> Self {
        Self {
            mult_plain: 20,
            mult_cipher: 40,
            rotate: 2,
            add: 0,
            add_plain: 0,
        }
    }
}

pub const DEFAULT_NOISE_BUDGET: u32 = 190;
pub const DEFAULT_REFRESH_THRESHOLD: u32 = 60;

/// Lower bound for the default plaintext modulus.
pub const DEFAULT_MODULUS_FLOOR: u64 = 1 << 29;

/// Parameters of the slot-ciphertext emulation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendParams {
    pub n_slots: usize,
    pub plain_modulus: u64,
    pub initial_noise_budget: u32,
    #[serde(default)]
    pub noise_costs: NoiseCosts,
    pub refresh_threshold: u32,
}

impl BackendParams {
    /// Default parameters for `n_slots`: the smallest prime `p >= 2^29` with
    /// `p = 1 (mod 2n)`, default ledger costs, budget and threshold.
    pub fn new(n_slots: usize) -> Result<Self> {
        check_slots(n_slots)?;
        let p = smallest_batching_prime(n_slots, DEFAULT_MODULUS_FLOOR)?;
        Self::with_modulus(n_slots, p)
    }

    pub fn with_modulus(n_slots: usize, plain_modulus: u64) -> Result<Self> {
        let params = Self {
            n_slots,
            plain_modulus,
            initial_noise_budget: DEFAULT_NOISE_BUDGET,
            noise_costs: NoiseCosts::default(),
            refresh_threshold: DEFAULT_REFRESH_THRESHOLD,
        };
        params.validate()?;
        Ok(params)
    }

    /// The production-scale regime: 8192 slots.
    pub fn standard() -> Self {
        Self::new(8192).expect("standard parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        check_slots(self.n_slots)?;
        let p = self.plain_modulus;
        if p < 3 || !is_prime(p) {
            return Err(Error::InvalidParams(format!("plain modulus {p} is not an odd prime")));
        }
        if p >= 1 << 62 {
            return Err(Error::InvalidParams(format!("plain modulus {p} exceeds 62 bits")));
        }
        let two_n = 2 * self.n_slots as u64;
        if p % two_n != 1 {
            return Err(Error::InvalidParams(format!(
                "plain modulus {p} is not 1 mod {two_n} (batching constraint)"
            )));
        }
        if self.refresh_threshold >= self.initial_noise_budget {
            return Err(Error::InvalidParams(format!(
                "refresh threshold {} must be below the initial budget {}",
                self.refresh_threshold, self.initial_noise_budget
            )));
        }
        Ok(())
    }

    /// Bit length of the plaintext modulus, `ceil(log2 p)`.
    pub fn modulus_bits(&self) -> u32 {
        64 - (self.plain_modulus - 1).leading_zeros()
    }

    /// Emulated wire size of one ciphertext (or one slot vector) in bytes.
    pub fn ciphertext_bytes(&self) -> u64 {
        (self.n_slots as u64 * self.modulus_bits() as u64).div_ceil(8)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let params: Self = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn check_slots(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::InvalidParams(format!(
            "slot count {n} must be a power of two and at least 2"
        )));
    }
    Ok(())
}

/// Smallest prime `p >= floor` with `p = 1 (mod 2 n_slots)`.
pub fn smallest_batching_prime(n_slots: usize, floor: u64) -> Result<u64> {
    check_slots(n_slots)?;
    let step = 2 * n_slots as u64;
    let mut p = floor.div_ceil(step) * step + 1;
    if p < floor {
        p += step;
    }
    while p < 1 << 62 {
        if is_prime(p) {
            return Ok(p);
        }
        p += step;
    }
    Err(Error::InvalidParams(format!("no batching prime above {floor}")))
}

#[inline]
pub(crate) fn mul_mod(a: u64, b: u64, p: u64) -> u64 {
    ((a as u128 * b as u128) % p as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, p: u64) -> u64 {
    let mut acc = 1u64;
    base %= p;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, p);
        }
        base = mul_mod(base, base, p);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &w in &WITNESSES {
        if n.is_multiple_of(w) {
            return n == w;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'outer: for &a in &WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial_division(n: u64) -> bool {
        n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
    }

    #[test]
    fn miller_rabin_agrees_with_trial_division() {
        for n in 0..5000u64 {
            assert_eq!(is_prime(n), trial_division(n), "n = {n}");
        }
        assert!(is_prime(2_305_843_009_213_693_951));
        assert!(!is_prime(3_215_031_751));
    }

    #[test]
    fn default_modulus_for_standard_slots() {
        let p = smallest_batching_prime(8192, 1 << 29).unwrap();
        assert!(p >= 1 << 29);
        assert_eq!(p % 16384, 1);
        assert!(is_prime(p));
        // nothing smaller qualifies
        let mut q = p - 16384;
        while q >= 1 << 29 {
            assert!(!is_prime(q));
            q -= 16384;
        }
        let params = BackendParams::standard();
        assert_eq!(params.plain_modulus, p);
        assert_eq!(params.modulus_bits(), 30);
    }

    #[test]
    fn small_modulus_accepted() {
        // 97 = 3 * 32 + 1
        assert!(BackendParams::with_modulus(16, 97).is_ok());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            BackendParams::with_modulus(12, 97),
            Err(Error::InvalidParams(_))
        ));
        assert!(BackendParams::with_modulus(16, 91).is_err());
        // prime but wrong congruence
        assert!(BackendParams::with_modulus(16, 101).is_err());
        let mut params = BackendParams::with_modulus(16, 97).unwrap();
        params.refresh_threshold = params.initial_noise_budget;
        assert!(params.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let params = BackendParams::new(64).unwrap();
        params.save_json(&path).unwrap();
        assert_eq!(BackendParams::load_json(&path).unwrap(), params);
    }
}
