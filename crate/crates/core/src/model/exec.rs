use serde::{Deserialize, Serialize};

use super::he::HeExecutor;
use super::plain::PlainExecutor;
use super::{argmax, Model, QMatrix};
use crate::backend::{Context, OpCounter};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheStats, KvCache, RefreshEvent};
use crate::nonlinear::{gelu, layernorm, FixedOps, FixedPointParams, MpcSession};

pub(crate) type V<E> = <<E as Executor>::Ops as FixedOps>::V;

/// Where the pipeline's linear layers and attention run. The fixed-point
/// glue in between is shared, so two executors that agree on these
/// operations produce identical tokens.
pub(crate) trait Executor {
    type Ops: FixedOps;
    type Cache: Clone;

    fn ops(&mut self) -> &mut Self::Ops;
    fn fp(&self) -> &FixedPointParams;
    /// Client input (signed scale-`f` values).
    fn input(&mut self, values: &[i64]) -> Result<V<Self>>;
    /// Opens a value to the client.
    fn reveal(&mut self, v: &V<Self>) -> Result<Vec<i64>>;
    /// Raw scale-`2f` product of a row-major `rows x w.rows` input with `w`.
    /// `batched` selects the matrix-matrix kernel.
    fn linear(&mut self, x: &V<Self>, rows: usize, w: &QMatrix, batched: bool) -> Result<V<Self>>;
    /// Causal attention over `m x d` row-major Q/K/V of one head; returns
    /// the scale-`f` output and the head's cache.
    fn prefill_attention(
        &mut self,
        q: &V<Self>,
        k: &V<Self>,
        v: &V<Self>,
        m: usize,
        d: usize,
    ) -> Result<(V<Self>, Self::Cache)>;
    /// Appends `k`/`v` and attends with `q`.
    fn attention_step(
        &mut self,
        q: &V<Self>,
        k: &V<Self>,
        v: &V<Self>,
        cache: &Self::Cache,
    ) -> Result<(V<Self>, Self::Cache)>;
    /// Hook at the start of every decode step.
    fn begin_step(&mut self, _step: u64, _caches: &mut [Vec<Self::Cache>]) -> Result<()> {
        Ok(())
    }
}

fn cols<O: FixedOps>(ops: &mut O, x: &O::V, rows: usize, width: usize, start: usize, count: usize) -> O::V {
    let idx: Vec<usize> = (0..rows)
        .flat_map(|i| (start..start + count).map(move |j| i * width + j))
        .collect();
    ops.gather(x, &idx)
}

/// Joins per-head `rows x count` blocks side by side.
fn join_cols<O: FixedOps>(ops: &mut O, blocks: &[O::V], rows: usize, count: usize) -> O::V {
    let all = ops.concat(blocks);
    let idx: Vec<usize> = (0..rows)
        .flat_map(|i| (0..blocks.len()).flat_map(move |h| (0..count).map(move |c| h * rows * count + i * count + c)))
        .collect();
    ops.gather(&all, &idx)
}

fn per_row<O: FixedOps>(
    ops: &mut O,
    x: &O::V,
    rows: usize,
    width: usize,
    mut f: impl FnMut(&mut O, &O::V) -> Result<O::V>,
) -> Result<O::V> {
    let out = (0..rows)
        .map(|i| {
            let row = ops.slice(x, i * width, width);
            f(ops, &row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ops.concat(&out))
}

fn project<E: Executor>(exec: &mut E, x: &V<E>, rows: usize, w: &QMatrix, batched: bool) -> Result<V<E>> {
    let f = exec.fp().frac_bits;
    let y = exec.linear(x, rows, w, batched)?;
    Ok(exec.ops().truncate(&y, f))
}

fn add_bias<O: FixedOps>(ops: &mut O, x: &O::V, rows: usize, bias: &[i64]) -> O::V {
    ops.add_public(x, &bias.repeat(rows))
}

type Attend<'a, E> = dyn FnMut(&mut E, usize, &V<E>, &V<E>, &V<E>) -> Result<V<E>> + 'a;

fn layer_forward<E: Executor>(
    exec: &mut E,
    model: &Model,
    l: usize,
    x: &V<E>,
    rows: usize,
    batched: bool,
    attend: &mut Attend<'_, E>,
) -> Result<V<E>> {
    let w = &model.layers[l];
    let cfg = &model.config;
    let (d, hd) = (cfg.d_model, cfg.head_dim());
    let fp = *exec.fp();
    let q = project(exec, x, rows, &w.wq, batched)?;
    let k = project(exec, x, rows, &w.wk, batched)?;
    let v = project(exec, x, rows, &w.wv, batched)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let ops = exec.ops();
        let qh = cols(ops, &q, rows, d, h * hd, hd);
        let kh = cols(ops, &k, rows, d, h * hd, hd);
        let vh = cols(ops, &v, rows, d, h * hd, hd);
        heads.push(attend(exec, h, &qh, &kh, &vh)?);
    }
    let attn = join_cols(exec.ops(), &heads, rows, hd);
    let o = project(exec, &attn, rows, &w.wo, batched)?;
    let ops = exec.ops();
    let r = ops.add(x, &o);
    let x = per_row(ops, &r, rows, d, |ops, row| {
        layernorm(ops, row, &w.ln1_gamma, &w.ln1_beta, &fp)
    })?;

    let h1 = project(exec, &x, rows, &w.w1, batched)?;
    let ops = exec.ops();
    let h1 = add_bias(ops, &h1, rows, &w.b1);
    let g = gelu(ops, &h1, &fp);
    let h2 = project(exec, &g, rows, &w.w2, batched)?;
    let ops = exec.ops();
    let h2 = add_bias(ops, &h2, rows, &w.b2);
    let r = ops.add(&x, &h2);
    per_row(ops, &r, rows, d, |ops, row| {
        layernorm(ops, row, &w.ln2_gamma, &w.ln2_beta, &fp)
    })
}

fn logits_of<E: Executor>(exec: &mut E, model: &Model, last: &V<E>) -> Result<Vec<i64>> {
    let y = project(exec, last, 1, &model.lm_head, false)?;
    exec.reveal(&y)
}

/// Per layer, per head.
type Caches<E> = Vec<Vec<<E as Executor>::Cache>>;

/// Full causal pass over `tokens` (positions from 0). Returns last-position
/// logits and the caches.
pub(crate) fn prefill_forward<E: Executor>(
    exec: &mut E,
    model: &Model,
    tokens: &[u32],
) -> Result<(Vec<i64>, Caches<E>)> {
    let m = tokens.len();
    if m == 0 {
        return Err(Error::Empty("prompt"));
    }
    if m > model.config.max_seq {
        return Err(Error::InvalidParams(format!(
            "prompt of {m} exceeds max_seq {}",
            model.config.max_seq
        )));
    }
    let d = model.config.d_model;
    let mut flat = Vec::with_capacity(m * d);
    for (pos, &t) in tokens.iter().enumerate() {
        flat.extend(model.embed(t, pos)?);
    }
    let mut x = exec.input(&flat)?;
    let mut caches = Vec::with_capacity(model.config.layers);
    for l in 0..model.config.layers {
        let mut layer_caches = Vec::with_capacity(model.config.heads);
        let hd = model.config.head_dim();
        x = layer_forward(exec, model, l, &x, m, true, &mut |exec: &mut E, _h, q, k, v| {
            let (out, cache) = exec.prefill_attention(q, k, v, m, hd)?;
            layer_caches.push(cache);
            Ok(out)
        })?;
        caches.push(layer_caches);
    }
    let last = exec.ops().slice(&x, (m - 1) * d, d);
    Ok((logits_of(exec, model, &last)?, caches))
}

/// One cached decode step feeding `token` at `position`.
pub(crate) fn step_forward<E: Executor>(
    exec: &mut E,
    model: &Model,
    token: u32,
    position: usize,
    step: u64,
    caches: &mut [Vec<E::Cache>],
) -> Result<Vec<i64>> {
    exec.begin_step(step, caches)?;
    let mut x = exec.input(&model.embed(token, position)?)?;
    for (l, layer_caches) in caches.iter_mut().enumerate() {
        x = layer_forward(exec, model, l, &x, 1, false, &mut |exec: &mut E, h, q, k, v| {
            let (out, next) = exec.attention_step(q, k, v, &layer_caches[h])?;
            layer_caches[h] = next;
            Ok(out)
        })?;
    }
    let last = x;
    logits_of(exec, model, &last)
}

/// Encrypted generation state after prefill or a decode step.
#[derive(Clone, Debug)]
pub struct GenerationState {
    /// Per layer, per head.
    pub caches: Vec<Vec<KvCache>>,
    /// Position the next fed token will take.
    pub position: usize,
    /// Greedy token from the latest logits; fed by the next decode step.
    pub next_token: u32,
    pub logits: Vec<i64>,
    pub steps: u64,
    pub refresh_events: Vec<HeadRefresh>,
}

impl GenerationState {
    pub fn cache_stats(&self, ctx: &Context) -> CacheStats {
        let mut total = CacheStats::default();
        for c in self.caches.iter().flatten() {
            let s = c.stats(ctx);
            total.ct_count += s.ct_count;
            total.auto_cts += s.auto_cts;
            total.t_auto = s.t_auto;
            total.refresh_count += s.refresh_count;
            total.bytes += s.bytes;
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRefresh {
    pub layer: usize,
    pub head: usize,
    #[serde(flatten)]
    pub event: RefreshEvent,
}

/// Encrypted prefill of `prompt`.
pub fn prefill(model: &Model, prompt: &[u32], ctx: &Context, mpc: &mut MpcSession) -> Result<GenerationState> {
    let mut exec = HeExecutor::new(model, ctx, mpc)?;
    let (logits, caches) = prefill_forward(&mut exec, model, prompt)?;
    Ok(GenerationState {
        caches,
        position: prompt.len(),
        next_token: argmax(&logits),
        logits,
        steps: 0,
        refresh_events: Vec::new(),
    })
}

/// Feeds `state.next_token` and returns the following greedy token.
pub fn decode_step(
    model: &Model,
    state: &GenerationState,
    ctx: &Context,
    mpc: &mut MpcSession,
) -> Result<(u32, GenerationState)> {
    let mut exec = HeExecutor::new(model, ctx, mpc)?;
    let mut caches = state.caches.clone();
    let logits = step_forward(
        &mut exec,
        model,
        state.next_token,
        state.position,
        state.steps,
        &mut caches,
    )?;
    let token = argmax(&logits);
    let mut refresh_events = state.refresh_events.clone();
    refresh_events.extend(exec.take_refreshes());
    Ok((
        token,
        GenerationState {
            caches,
            position: state.position + 1,
            next_token: token,
            logits,
            steps: state.steps + 1,
            refresh_events,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub position: usize,
    pub token: u32,
    pub counters: OpCounter,
    pub refresh_events: usize,
    pub cache: CacheStats,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub n_slots: usize,
    pub modulus: u64,
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    /// Everything up to the first generated token.
    pub prefill: OpCounter,
    /// One entry per later token.
    pub steps: Vec<StepReport>,
    pub total: OpCounter,
    pub refresh_events: Vec<HeadRefresh>,
    pub final_cache: CacheStats,
    pub mpc_rounds: u64,
}

impl RunReport {
    /// Cumulative counters after each generated token (prefill included in
    /// the first).
    pub fn cumulative(&self) -> Vec<OpCounter> {
        let mut acc = self.prefill;
        let mut out = Vec::new();
        if !self.tokens.is_empty() {
            out.push(acc);
        }
        for s in &self.steps {
            acc += s.counters;
            out.push(acc);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Encrypted greedy generation of `k` tokens with the cached pipeline.
pub fn generate(
    model: &Model,
    prompt: &[u32],
    k: usize,
    ctx: &Context,
    mpc: &mut MpcSession,
) -> Result<(Vec<u32>, RunReport)> {
    check_length(model, prompt, k)?;
    let start = ctx.counter();
    let rounds0 = mpc.rounds();
    let mut state = prefill(model, prompt, ctx, mpc)?;
    let prefill_counts = ctx.counter().since(&start);
    let mut tokens = Vec::with_capacity(k);
    let mut steps = Vec::new();
    if k > 0 {
        tokens.push(state.next_token);
    }
    while tokens.len() < k {
        let before = ctx.counter();
        let refreshes = state.refresh_events.len();
        let (token, next) = decode_step(model, &state, ctx, mpc)?;
        state = next;
        tokens.push(token);
        steps.push(StepReport {
            step: state.steps - 1,
            position: state.position - 1,
            token,
            counters: ctx.counter().since(&before),
            refresh_events: state.refresh_events.len() - refreshes,
            cache: state.cache_stats(ctx),
        });
        log::debug!("step {} -> token {token}", state.steps - 1);
    }
    let report = RunReport {
        method: "CryptoGen".into(),
        n_slots: ctx.n_slots(),
        modulus: ctx.modulus(),
        prompt_len: prompt.len(),
        tokens: tokens.clone(),
        prefill: prefill_counts,
        steps,
        total: ctx.counter().since(&start),
        refresh_events: state.refresh_events.clone(),
        final_cache: state.cache_stats(ctx),
        mpc_rounds: mpc.rounds() - rounds0,
    };
    Ok((tokens, report))
}

/// Encrypted generation without a cache: every token reruns the full
/// causal pass over prompt plus generated tokens.
pub fn generate_stateless(
    model: &Model,
    prompt: &[u32],
    k: usize,
    ctx: &Context,
    mpc: &mut MpcSession,
) -> Result<(Vec<u32>, RunReport)> {
    check_length(model, prompt, k)?;
    let start = ctx.counter();
    let rounds0 = mpc.rounds();
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::with_capacity(k);
    let mut prefill_counts = OpCounter::default();
    let mut steps = Vec::new();
    for i in 0..k.max(1) {
        let before = ctx.counter();
        let mut exec = HeExecutor::new(model, ctx, mpc)?;
        let (logits, _) = prefill_forward(&mut exec, model, &seq)?;
        let token = argmax(&logits);
        let used = ctx.counter().since(&before);
        if i == 0 {
            prefill_counts = used;
        } else {
            steps.push(StepReport {
                step: i as u64 - 1,
                position: seq.len() - 1,
                token,
                counters: used,
                refresh_events: 0,
                cache: CacheStats::default(),
            });
        }
        if k > 0 {
            tokens.push(token);
            seq.push(token);
        }
    }
    let report = RunReport {
        method: "stateless".into(),
        n_slots: ctx.n_slots(),
        modulus: ctx.modulus(),
        prompt_len: prompt.len(),
        tokens: tokens.clone(),
        prefill: prefill_counts,
        steps,
        total: ctx.counter().since(&start),
        refresh_events: Vec::new(),
        final_cache: CacheStats::default(),
        mpc_rounds: mpc.rounds() - rounds0,
    };
    Ok((tokens, report))
}

fn check_length(model: &Model, prompt: &[u32], k: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    // The last generated token is never fed back.
    let needed = prompt.len() + k.saturating_sub(1);
    if needed > model.config.max_seq {
        return Err(Error::InvalidParams(format!(
            "prompt {} + {k} tokens exceeds max_seq {}",
            prompt.len(),
            model.config.max_seq
        )));
    }
    Ok(())
}

/// Plaintext fixed-point generation with the same arithmetic as the
/// encrypted pipeline.
pub fn oracle_generate(model: &Model, prompt: &[u32], k: usize, modulus: u64) -> Result<Vec<u32>> {
    check_length(model, prompt, k)?;
    let mut exec = PlainExecutor::new(model, modulus)?;
    let (logits, mut caches) = prefill_forward(&mut exec, model, prompt)?;
    let mut tokens = Vec::with_capacity(k);
    if k > 0 {
        tokens.push(argmax(&logits));
    }
    while tokens.len() < k {
        let step = tokens.len() as u64 - 1;
        let pos = prompt.len() + tokens.len() - 1;
        let logits = step_forward(
            &mut exec,
            model,
            *tokens.last().expect("non-empty"),
            pos,
            step,
            &mut caches,
        )?;
        tokens.push(argmax(&logits));
    }
    Ok(tokens)
}

/// Plaintext fixed-point logits (signed, scale `f`) for the position after
/// `tokens`.
pub fn oracle_logits(model: &Model, tokens: &[u32], modulus: u64) -> Result<Vec<i64>> {
    let mut exec = PlainExecutor::new(model, modulus)?;
    Ok(prefill_forward(&mut exec, model, tokens)?.0)
}
