use super::{bcast, FixedOps};
use crate::backend::{add_mod, from_signed, mul_mod, neg_mod, to_signed};

/// Cleartext execution of [`FixedOps`]: same arithmetic, no sharing.
#[derive(Clone, Copy, Debug)]
pub struct PlainOps {
    modulus: u64,
}

impl PlainOps {
    pub fn new(modulus: u64) -> Self {
        Self { modulus }
    }

    fn signed(&self, a: &[u64]) -> Vec<i64> {
        a.iter().map(|&v| to_signed(v, self.modulus)).collect()
    }
}

impl FixedOps for PlainOps {
    type V = Vec<u64>;

    fn modulus(&self) -> u64 {
        self.modulus
    }

    fn len(&self, a: &Vec<u64>) -> usize {
        a.len()
    }

    fn public(&mut self, values: &[i64]) -> Vec<u64> {
        values.iter().map(|&v| from_signed(v, self.modulus)).collect()
    }

    fn add(&mut self, a: &Vec<u64>, b: &Vec<u64>) -> Vec<u64> {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(&x, &y)| add_mod(x, y, self.modulus)).collect()
    }

    fn sub(&mut self, a: &Vec<u64>, b: &Vec<u64>) -> Vec<u64> {
        assert_eq!(a.len(), b.len());
        let p = self.modulus;
        a.iter().zip(b).map(|(&x, &y)| add_mod(x, neg_mod(y, p), p)).collect()
    }

    fn add_public(&mut self, a: &Vec<u64>, c: &[i64]) -> Vec<u64> {
        let p = self.modulus;
        a.iter()
            .enumerate()
            .map(|(i, &x)| add_mod(x, from_signed(bcast(c, i), p), p))
            .collect()
    }

    fn mul_public(&mut self, a: &Vec<u64>, c: &[i64]) -> Vec<u64> {
        let p = self.modulus;
        a.iter()
            .enumerate()
            .map(|(i, &x)| mul_mod(x, from_signed(bcast(c, i), p), p))
            .collect()
    }

    fn mul(&mut self, a: &Vec<u64>, b: &Vec<u64>) -> Vec<u64> {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(&x, &y)| mul_mod(x, y, self.modulus)).collect()
    }

    fn truncate(&mut self, a: &Vec<u64>, bits: u32) -> Vec<u64> {
        self.ideal_map(a, &|v| v >> bits)
    }

    fn ideal_map(&mut self, a: &Vec<u64>, f: &dyn Fn(i64) -> i64) -> Vec<u64> {
        self.signed(a)
            .into_iter()
            .map(|v| from_signed(f(v), self.modulus))
            .collect()
    }

    fn ideal_map2(&mut self, a: &Vec<u64>, b: &Vec<u64>, f: &dyn Fn(i64, i64) -> i64) -> Vec<u64> {
        assert_eq!(a.len(), b.len());
        let (sa, sb) = (self.signed(a), self.signed(b));
        sa.into_iter()
            .zip(sb)
            .map(|(x, y)| from_signed(f(x, y), self.modulus))
            .collect()
    }

    fn ideal_reduce(&mut self, a: &Vec<u64>, f: &dyn Fn(&[i64]) -> i64) -> Vec<u64> {
        vec![from_signed(f(&self.signed(a)), self.modulus)]
    }

    fn gather(&mut self, a: &Vec<u64>, idx: &[usize]) -> Vec<u64> {
        idx.iter().map(|&i| a[i]).collect()
    }

    fn concat(&mut self, parts: &[Vec<u64>]) -> Vec<u64> {
        parts.concat()
    }

    fn sum(&mut self, a: &Vec<u64>) -> Vec<u64> {
        vec![a.iter().fold(0, |acc, &x| add_mod(acc, x, self.modulus))]
    }
}
