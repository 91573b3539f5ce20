use super::exec::Executor;
use super::{signed_all, Model, QMatrix};
use crate::arcc::attention_weights;
use crate::backend::from_signed;
use crate::error::{Error, Result};
use crate::nonlinear::{FixedOps, FixedPointParams, PlainOps};

/// Keys and values as residue rows.
#[derive(Clone, Debug, Default)]
pub(crate) struct PlainCache {
    keys: Vec<Vec<u64>>,
    values: Vec<Vec<u64>>,
}

pub(crate) struct PlainExecutor {
    ops: PlainOps,
    fp: FixedPointParams,
}

impl PlainExecutor {
    pub(crate) fn new(model: &Model, modulus: u64) -> Result<Self> {
        model.config.validate()?;
        Ok(Self {
            ops: PlainOps::new(modulus),
            fp: model.config.fixed_point(modulus)?,
        })
    }

    fn p(&self) -> u64 {
        self.fp.modulus
    }

    fn dot(&self, a: &[u64], b: &[u64]) -> u64 {
        let p = self.p() as u128;
        (a.iter().zip(b).map(|(&x, &y)| x as u128 * y as u128 % p).sum::<u128>() % p) as u64
    }

    /// Attention of one query over the cached rows (all of them).
    fn attend(&mut self, q: &[u64], cache: &PlainCache) -> Result<Vec<u64>> {
        let raw: Vec<u64> = cache.keys.iter().map(|k| self.dot(q, k)).collect();
        let probs = attention_weights(&mut self.ops, &raw, q.len(), &self.fp)?;
        let p = self.p() as u128;
        let out: Vec<u64> = (0..q.len())
            .map(|j| {
                let s: u128 = probs
                    .iter()
                    .zip(&cache.values)
                    .map(|(&a, v)| a as u128 * v[j] as u128 % p)
                    .sum();
                (s % p) as u64
            })
            .collect();
        Ok(self.ops.truncate(&out, self.fp.frac_bits))
    }
}

impl Executor for PlainExecutor {
    type Ops = PlainOps;
    type Cache = PlainCache;

    fn ops(&mut self) -> &mut PlainOps {
        &mut self.ops
    }

    fn fp(&self) -> &FixedPointParams {
        &self.fp
    }

    fn input(&mut self, values: &[i64]) -> Result<Vec<u64>> {
        Ok(self.ops.public(values))
    }

    fn reveal(&mut self, v: &Vec<u64>) -> Result<Vec<i64>> {
        Ok(signed_all(v, self.p()))
    }

    fn linear(&mut self, x: &Vec<u64>, rows: usize, w: &QMatrix, _batched: bool) -> Result<Vec<u64>> {
        if x.len() != rows * w.rows {
            return Err(Error::LengthMismatch {
                expected: rows * w.rows,
                got: x.len(),
            });
        }
        let p = self.p();
        let wm: Vec<u64> = w.data.iter().map(|&v| from_signed(v, p)).collect();
        let mut out = Vec::with_capacity(rows * w.cols);
        for i in 0..rows {
            let xi = &x[i * w.rows..(i + 1) * w.rows];
            for j in 0..w.cols {
                let s: u128 = (0..w.rows)
                    .map(|c| xi[c] as u128 * wm[c * w.cols + j] as u128 % p as u128)
                    .sum();
                out.push((s % p as u128) as u64);
            }
        }
        Ok(out)
    }

    fn prefill_attention(
        &mut self,
        q: &Vec<u64>,
        k: &Vec<u64>,
        v: &Vec<u64>,
        m: usize,
        d: usize,
    ) -> Result<(Vec<u64>, PlainCache)> {
        let rows = |x: &Vec<u64>| -> Vec<Vec<u64>> { x.chunks(d).map(<[u64]>::to_vec).collect() };
        let full = PlainCache {
            keys: rows(k),
            values: rows(v),
        };
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            let prefix = PlainCache {
                keys: full.keys[..=i].to_vec(),
                values: full.values[..=i].to_vec(),
            };
            out.extend(self.attend(&q[i * d..(i + 1) * d], &prefix)?);
        }
        Ok((out, full))
    }

    fn attention_step(
        &mut self,
        q: &Vec<u64>,
        k: &Vec<u64>,
        v: &Vec<u64>,
        cache: &PlainCache,
    ) -> Result<(Vec<u64>, PlainCache)> {
        let mut next = cache.clone();
        next.keys.push(k.clone());
        next.values.push(v.clone());
        let out = self.attend(q, &next)?;
        Ok((out, next))
    }
}
