use super::exec::{Executor, HeadRefresh};
use super::{signed_all, Model, QMatrix};
use crate::arcc;
use crate::backend::{from_signed, Context};
use crate::encodings::{encode, Encoding, PackedMatrix};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::linear::{cpmm_outer_diagonal, cpvm_inner_diagonal, dense_group};
use crate::nonlinear::{he_to_shares, shares_to_he, FixedOps, FixedPointParams, MpcSession, SharePair};

/// Server linear algebra on ciphertexts, everything else on shares. Each
/// linear layer re-encrypts its input from shares in the layout the kernel
/// wants and converts the result back.
pub(crate) struct HeExecutor<'a> {
    ctx: &'a Context,
    mpc: &'a mut MpcSession,
    fp: FixedPointParams,
    refreshes: Vec<HeadRefresh>,
}

impl<'a> HeExecutor<'a> {
    pub(crate) fn new(model: &Model, ctx: &'a Context, mpc: &'a mut MpcSession) -> Result<Self> {
        let fp = model.check_context(ctx)?;
        Ok(Self {
            ctx,
            mpc,
            fp,
            refreshes: Vec::new(),
        })
    }

    pub(crate) fn take_refreshes(&mut self) -> Vec<HeadRefresh> {
        std::mem::take(&mut self.refreshes)
    }

    /// Encrypts a row-major `rows x cols` share matrix under `enc`.
    fn pack(&mut self, x: &SharePair, enc: Encoding) -> Result<PackedMatrix> {
        let n = self.ctx.n_slots();
        enc.check(n)?;
        let (rows, cols) = (enc.rows, enc.cols);
        let zero = rows * cols;
        let mut idx = vec![vec![zero; n]; enc.part_count()];
        for i in 0..rows {
            for j in 0..cols {
                let (p, s) = enc.position(i, j, n);
                idx[p][s] = i * cols + j;
            }
        }
        let z = self.mpc.public(&[0]);
        let padded = self.mpc.concat(&[x.clone(), z]);
        let parts = idx
            .iter()
            .map(|ix| {
                let g = self.mpc.gather(&padded, ix);
                shares_to_he(&g, self.ctx, self.mpc)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PackedMatrix {
            encoding: enc,
            parts: crate::encodings::Parts::Encrypted(parts),
        })
    }

    /// Row-major shares of an encrypted packing.
    fn unpack(&mut self, packed: &PackedMatrix) -> Result<SharePair> {
        let n = self.ctx.n_slots();
        let enc = packed.encoding;
        let shares = packed
            .ciphertexts()?
            .iter()
            .map(|c| he_to_shares(c, self.ctx, self.mpc))
            .collect::<Result<Vec<_>>>()?;
        let all = self.mpc.concat(&shares);
        let idx: Vec<usize> = (0..enc.rows * enc.cols)
            .map(|k| {
                let (p, s) = enc.position(k / enc.cols, k % enc.cols, n);
                p * n + s
            })
            .collect();
        Ok(self.mpc.gather(&all, &idx))
    }

    fn weights(&self, w: &QMatrix) -> Result<PackedMatrix> {
        encode(
            &w.to_matrix(self.ctx.modulus()),
            Encoding::diagonal(w.rows, w.cols),
            self.ctx,
            false,
        )
    }
}

impl Executor for HeExecutor<'_> {
    type Ops = MpcSession;
    type Cache = KvCache;

    fn ops(&mut self) -> &mut MpcSession {
        self.mpc
    }

    fn fp(&self) -> &FixedPointParams {
        &self.fp
    }

    fn input(&mut self, values: &[i64]) -> Result<SharePair> {
        let p = self.ctx.modulus();
        let v: Vec<u64> = values.iter().map(|&x| from_signed(x, p)).collect();
        Ok(self.mpc.share(&v))
    }

    fn reveal(&mut self, v: &SharePair) -> Result<Vec<i64>> {
        self.mpc.charge("reveal", v.len() as u64, 1);
        let p = self.ctx.modulus();
        Ok(signed_all(&v.reconstruct(p), p))
    }

    fn linear(&mut self, x: &SharePair, rows: usize, w: &QMatrix, batched: bool) -> Result<SharePair> {
        if x.len() != rows * w.rows {
            return Err(Error::LengthMismatch {
                expected: rows * w.rows,
                got: x.len(),
            });
        }
        let wp = self.weights(w)?;
        if batched {
            let g = dense_group(rows, w.rows, self.ctx.n_slots());
            let xp = self.pack(x, Encoding::outer_grouped(rows, w.rows, g))?;
            let y = cpmm_outer_diagonal(&xp, &wp, self.ctx)?;
            self.unpack(&y)
        } else {
            if rows != 1 {
                return Err(Error::Dimension("vector kernel takes one row".into()));
            }
            let ct = shares_to_he(x, self.ctx, self.mpc)?;
            let y = cpvm_inner_diagonal(&ct, &wp, self.ctx)?;
            let sh = he_to_shares(&y, self.ctx, self.mpc)?;
            Ok(self.mpc.slice(&sh, 0, w.cols))
        }
    }

    fn prefill_attention(
        &mut self,
        q: &SharePair,
        k: &SharePair,
        v: &SharePair,
        m: usize,
        d: usize,
    ) -> Result<(SharePair, KvCache)> {
        let enc = Encoding::outer(m, d);
        let (qp, kp, vp) = (self.pack(q, enc)?, self.pack(k, enc)?, self.pack(v, enc)?);
        let columns = arcc::prefill_attention(&qp, &kp, &vp, &self.fp, self.ctx, self.mpc)?;
        let all = self.mpc.concat(&columns);
        let idx: Vec<usize> = (0..m * d).map(|t| (t % d) * m + t / d).collect();
        let out = self.mpc.gather(&all, &idx);
        Ok((out, KvCache::from_prefill(kp, vp, self.ctx)?))
    }

    fn attention_step(
        &mut self,
        q: &SharePair,
        k: &SharePair,
        v: &SharePair,
        cache: &KvCache,
    ) -> Result<(SharePair, KvCache)> {
        let qc = shares_to_he(q, self.ctx, self.mpc)?;
        let kc = shares_to_he(k, self.ctx, self.mpc)?;
        let vc = shares_to_he(v, self.ctx, self.mpc)?;
        let next = cache.append_token(&kc, &vc, self.ctx)?;
        let out = arcc::attention_step(&qc, &next, &self.fp, self.ctx, self.mpc)?;
        Ok((out, next))
    }

    fn begin_step(&mut self, step: u64, caches: &mut [Vec<KvCache>]) -> Result<()> {
        for (layer, heads) in caches.iter_mut().enumerate() {
            for (head, cache) in heads.iter_mut().enumerate() {
                let (next, events) = cache.maybe_refresh(step, self.ctx, self.mpc)?;
                *cache = next;
                self.refreshes
                    .extend(events.into_iter().map(|event| HeadRefresh { layer, head, event }));
            }
        }
        Ok(())
    }
}
