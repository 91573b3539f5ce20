//! Encrypted per-head KV cache: an outer-packed prefill segment plus
//! block-compacted generated rows, with lazy noise refresh.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{neg_mod, Context, SlotCiphertext};
use crate::encodings::{Encoding, EncodingKind, PackedMatrix, Parts};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nonlinear::MpcSession;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    PrefillK,
    PrefillV,
    AutoK,
    AutoV,
}

/// One masked re-encryption of a cache ciphertext.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub step: u64,
    pub segment: Segment,
    pub part: usize,
    pub budget_before: u32,
    pub mpc_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// All ciphertexts held (K and V, both segments).
    pub ct_count: usize,
    /// Generated-segment ciphertexts per K (equal for V).
    pub auto_cts: usize,
    pub t_auto: usize,
    pub refresh_count: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug)]
pub struct KvCache {
    head_dim: usize,
    prefill_k: PackedMatrix,
    prefill_v: PackedMatrix,
    auto_k: PackedMatrix,
    auto_v: PackedMatrix,
    refresh_log: Vec<RefreshEvent>,
}

impl KvCache {
    /// Empty cache for `head_dim`-wide keys and values.
    pub fn empty(head_dim: usize, ctx: &Context) -> Result<Self> {
        let k = PackedMatrix {
            encoding: Encoding::outer(0, head_dim),
            parts: Parts::Encrypted(Vec::new()),
        };
        Self::from_prefill(k.clone(), k, ctx)
    }

    /// Cache whose prefill segment is the given outer-packed `m x d2`
    /// keys and values (one column per ciphertext).
    pub fn from_prefill(k: PackedMatrix, v: PackedMatrix, ctx: &Context) -> Result<Self> {
        let (ke, ve) = (k.encoding, v.encoding);
        if ke != ve || ke.kind != EncodingKind::Outer || ke.group != 1 {
            return Err(Error::Dimension(
                "prefill K/V must share a one-column outer packing".into(),
            ));
        }
        if ke.rows > ctx.n_slots() || ke.cols == 0 {
            return Err(Error::Dimension(format!("prefill of {} tokens does not fit", ke.rows)));
        }
        if ke.rows > 0 && (k.ciphertexts()?.len() != ke.cols || v.ciphertexts()?.len() != ke.cols) {
            return Err(Error::Dimension("prefill part count mismatch".into()));
        }
        let head_dim = ke.cols;
        let auto = PackedMatrix {
            encoding: Encoding::inner_compacted(0, head_dim, ctx.n_slots()),
            parts: Parts::Encrypted(Vec::new()),
        };
        if auto.encoding.block_width > ctx.n_slots() {
            return Err(Error::Dimension(format!("head dim {head_dim} exceeds the slot count")));
        }
        Ok(Self {
            head_dim,
            prefill_k: k,
            prefill_v: v,
            auto_k: auto.clone(),
            auto_v: auto,
            refresh_log: Vec::new(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rows per generated-segment ciphertext.
    pub fn block_capacity(&self) -> usize {
        self.auto_k.encoding.blocks
    }

    pub fn block_width(&self) -> usize {
        self.auto_k.encoding.block_width
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_k.encoding.rows
    }

    pub fn t_auto(&self) -> usize {
        self.auto_k.encoding.rows
    }

    pub fn len(&self) -> usize {
        self.prefill_len() + self.t_auto()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prefill_k(&self) -> &PackedMatrix {
        &self.prefill_k
    }

    pub fn prefill_v(&self) -> &PackedMatrix {
        &self.prefill_v
    }

    pub fn auto_k(&self) -> &PackedMatrix {
        &self.auto_k
    }

    pub fn auto_v(&self) -> &PackedMatrix {
        &self.auto_v
    }

    pub fn refresh_log(&self) -> &[RefreshEvent] {
        &self.refresh_log
    }

    pub fn stats(&self, ctx: &Context) -> CacheStats {
        let auto_cts = self.auto_k.len();
        let ct_count = self.prefill_k.len() + self.prefill_v.len() + 2 * auto_cts;
        CacheStats {
            ct_count,
            auto_cts,
            t_auto: self.t_auto(),
            refresh_count: self.refresh_log.len(),
            bytes: ct_count as u64 * ctx.params().ciphertext_bytes(),
        }
    }

    /// Lowest noise budget over all cache ciphertexts.
    pub fn min_budget(&self) -> Option<u32> {
        self.segments()
            .flat_map(|(_, p)| p.ciphertexts().unwrap_or(&[]).iter().map(SlotCiphertext::noise_budget))
            .min()
    }

    fn segments(&self) -> impl Iterator<Item = (Segment, &PackedMatrix)> {
        [
            (Segment::PrefillK, &self.prefill_k),
            (Segment::PrefillV, &self.prefill_v),
            (Segment::AutoK, &self.auto_k),
            (Segment::AutoV, &self.auto_v),
        ]
        .into_iter()
    }

    /// Writes `k_new` / `v_new` (slots `0..d2`) into block
    /// `t_auto mod B` of the last generated ciphertext, opening a new one
    /// when the previous is full. Costs two masked multiplications and two
    /// additions, plus two rotations when the target block is not the first.
    pub fn append_token(&self, k_new: &SlotCiphertext, v_new: &SlotCiphertext, ctx: &Context) -> Result<KvCache> {
        let t = self.t_auto();
        let blocks = self.block_capacity();
        let dp = self.block_width();
        let pos = (t % blocks) * dp;
        let mut mask = vec![0u64; ctx.n_slots()];
        mask[pos..pos + self.head_dim].fill(1);
        let mask = ctx.plain(mask)?;
        let mut next = self.clone();
        for (seg, token) in [(&mut next.auto_k, k_new), (&mut next.auto_v, v_new)] {
            let aligned = if pos == 0 {
                token.clone()
            } else {
                ctx.rotate(token, -(pos as i64))?
            };
            let placed = ctx.mult_plain(&aligned, &mask)?;
            let Parts::Encrypted(parts) = &mut seg.parts else {
                unreachable!("cache segments are encrypted")
            };
            if t.is_multiple_of(blocks) {
                parts.push(ctx.zero_ciphertext());
            }
            let last = parts.last_mut().expect("a part exists");
            *last = ctx.add(last, &placed)?;
            seg.encoding.rows = t + 1;
        }
        Ok(next)
    }

    /// Re-encrypts every ciphertext whose budget is at or below the context
    /// threshold. Returns the new cache and the events of this call.
    pub fn maybe_refresh(
        &self,
        step: u64,
        ctx: &Context,
        mpc: &mut MpcSession,
    ) -> Result<(KvCache, Vec<RefreshEvent>)> {
        let threshold = ctx.params().refresh_threshold;
        let mut next = self.clone();
        let mut events = Vec::new();
        for (segment, packed) in [
            (Segment::PrefillK, &mut next.prefill_k),
            (Segment::PrefillV, &mut next.prefill_v),
            (Segment::AutoK, &mut next.auto_k),
            (Segment::AutoV, &mut next.auto_v),
        ] {
            let Parts::Encrypted(parts) = &mut packed.parts else {
                unreachable!("cache segments are encrypted")
            };
            for (idx, ct) in parts.iter_mut().enumerate() {
                if ct.noise_budget() > threshold {
                    continue;
                }
                let before = ct.noise_budget();
                let (fresh, _) = refresh_ciphertext(ct, ctx, mpc)?;
                *ct = fresh;
                events.push(RefreshEvent {
                    step,
                    segment,
                    part: idx,
                    budget_before: before,
                    mpc_bytes: 2 * ctx.params().ciphertext_bytes(),
                });
            }
        }
        if !events.is_empty() {
            log::debug!("step {step}: refreshed {} cache ciphertexts", events.len());
        }
        next.refresh_log.extend_from_slice(&events);
        Ok((next, events))
    }

    /// Refreshes every ciphertext regardless of budget.
    pub fn force_refresh(&self, step: u64, ctx: &Context, mpc: &mut MpcSession) -> Result<KvCache> {
        let mut next = self.clone();
        for (segment, packed) in [
            (Segment::PrefillK, &mut next.prefill_k),
            (Segment::PrefillV, &mut next.prefill_v),
            (Segment::AutoK, &mut next.auto_k),
            (Segment::AutoV, &mut next.auto_v),
        ] {
            let Parts::Encrypted(parts) = &mut packed.parts else {
                unreachable!("cache segments are encrypted")
            };
            for (idx, ct) in parts.iter_mut().enumerate() {
                let before = ct.noise_budget();
                *ct = refresh_ciphertext(ct, ctx, mpc)?.0;
                next.refresh_log.push(RefreshEvent {
                    step,
                    segment,
                    part: idx,
                    budget_before: before,
                    mpc_bytes: 2 * ctx.params().ciphertext_bytes(),
                });
            }
        }
        Ok(next)
    }

    /// Decrypted generated keys, `t_auto x d2`.
    pub fn decode_auto_k(&self, ctx: &Context) -> Result<Matrix> {
        crate::encodings::decode(&self.auto_k, ctx)
    }

    pub fn decode_auto_v(&self, ctx: &Context) -> Result<Matrix> {
        crate::encodings::decode(&self.auto_v, ctx)
    }

    /// All keys in order (prefill then generated).
    pub fn decode_keys(&self, ctx: &Context) -> Result<Matrix> {
        self.decode_all(&self.prefill_k, &self.auto_k, ctx)
    }

    pub fn decode_values(&self, ctx: &Context) -> Result<Matrix> {
        self.decode_all(&self.prefill_v, &self.auto_v, ctx)
    }

    fn decode_all(&self, pre: &PackedMatrix, auto: &PackedMatrix, ctx: &Context) -> Result<Matrix> {
        let mut rows = Vec::new();
        for m in [pre, auto] {
            if m.encoding.rows > 0 {
                let d = crate::encodings::decode(m, ctx)?;
                rows.extend((0..d.rows()).map(|i| d.row(i).to_vec()));
            }
        }
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.head_dim, ctx.modulus()));
        }
        Matrix::from_rows(&rows, ctx.modulus())
    }

    /// Writes a manifest plus one binary slot file per ciphertext.
    pub fn save(&self, dir: impl AsRef<Path>, ctx: &Context) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut parts = Vec::new();
        for (segment, packed) in self.segments() {
            for (index, ct) in packed.ciphertexts()?.iter().enumerate() {
                let file = format!("{segment:?}-{index}.bin").to_lowercase();
                Matrix::from_fn(1, ct.n_slots(), ctx.modulus(), |_, j| ct.raw_slots()[j])
                    .save_binary(dir.join(&file))?;
                parts.push(SnapshotPart {
                    segment,
                    index,
                    noise_budget: ct.noise_budget(),
                    file,
                });
            }
        }
        let manifest = Snapshot {
            n_slots: ctx.n_slots(),
            modulus: ctx.modulus(),
            head_dim: self.head_dim,
            prefill_len: self.prefill_len(),
            t_auto: self.t_auto(),
            parts,
            refresh_log: self.refresh_log.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, ctx: &Context) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Snapshot = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.n_slots != ctx.n_slots() || manifest.modulus != ctx.modulus() {
            return Err(Error::Schema("snapshot parameters differ from the context".into()));
        }
        let mut cache = Self::empty(manifest.head_dim, ctx)?;
        let mut segs: [Vec<SlotCiphertext>; 4] = Default::default();
        for part in &manifest.parts {
            let m = Matrix::load_binary(dir.join(&part.file))?;
            if m.rows() != 1 || m.cols() != ctx.n_slots() || m.modulus() != ctx.modulus() {
                return Err(Error::Schema(format!("part file {} has the wrong shape", part.file)));
            }
            let slot = part.segment as usize;
            if segs[slot].len() != part.index {
                return Err(Error::Schema("snapshot parts out of order".into()));
            }
            segs[slot].push(ctx.restore_ciphertext(m.row(0).to_vec(), part.noise_budget)?);
        }
        let [pk, pv, ak, av] = segs;
        let (m, t, d) = (manifest.prefill_len, manifest.t_auto, manifest.head_dim);
        cache.prefill_k = PackedMatrix {
            encoding: Encoding::outer(m, d),
            parts: Parts::Encrypted(pk),
        };
        cache.prefill_v = PackedMatrix {
            encoding: Encoding::outer(m, d),
            parts: Parts::Encrypted(pv),
        };
        cache.auto_k.encoding.rows = t;
        cache.auto_k.parts = Parts::Encrypted(ak);
        cache.auto_v.encoding.rows = t;
        cache.auto_v.parts = Parts::Encrypted(av);
        let expect_auto = t.div_ceil(cache.block_capacity());
        let expect_pre = if m > 0 { d } else { 0 };
        if cache.auto_k.len() != expect_auto
            || cache.auto_v.len() != expect_auto
            || cache.prefill_k.len() != expect_pre
            || cache.prefill_v.len() != expect_pre
        {
            return Err(Error::Schema("snapshot part counts do not match its lengths".into()));
        }
        cache.refresh_log = manifest.refresh_log;
        Ok(cache)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotPart {
    segment: Segment,
    index: usize,
    noise_budget: u32,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    n_slots: usize,
    modulus: u64,
    head_dim: usize,
    prefill_len: usize,
    t_auto: usize,
    parts: Vec<SnapshotPart>,
    refresh_log: Vec<RefreshEvent>,
}

/// Masked re-encryption: the server subtracts a uniform `r`, the client
/// decrypts and re-encrypts, the server adds `r` back. Also returns what the
/// client saw.
pub fn refresh_ciphertext(
    ct: &SlotCiphertext,
    ctx: &Context,
    mpc: &mut MpcSession,
) -> Result<(SlotCiphertext, Vec<u64>)> {
    let p = ctx.modulus();
    let r = mpc.random_vec(ctx.n_slots());
    let neg: Vec<u64> = r.iter().map(|&v| neg_mod(v, p)).collect();
    let masked = ctx.add_plain(ct, &ctx.plain(neg)?)?;
    let seen = ctx.decrypt(&masked)?.into_slots();
    let fresh = ctx.encrypt(&ctx.plain(seen.clone())?)?;
    let out = ctx.add_plain(&fresh, &ctx.plain(r)?)?;
    ctx.record_refresh();
    mpc.charge_bytes(
        "refresh",
        2 * ctx.n_slots() as u64,
        2 * ctx.params().ciphertext_bytes(),
        2,
    );
    Ok((out, seen))
}
