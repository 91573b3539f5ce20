//! Oracle-equivalence and invariant suite behind `cryptogen verify`.

use anyhow::Result;
use cryptogen_core::arcc::{arcc_inner_inner, arcc_inner_outer};
use cryptogen_core::costmodel::{predict_costs, reported_only, validate_against_counts, Dims, Method, Stage};
use cryptogen_core::encodings::{decode, encode, Encoding};
use cryptogen_core::linear::{cpmm_outer_diagonal, cpvm_inner_diagonal, dense_group};
use cryptogen_core::model::{generate, generate_stateless, oracle_generate, Model, RunReport};
use cryptogen_core::nonlinear::{gelu, gelu_reference, FixedOps, MpcSession, PlainOps, GELU_RANGE};
use cryptogen_core::{BackendParams, Context, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{prompt, Setup};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub n_slots: usize,
    pub modulus: u64,
    pub prompt_len: usize,
    pub gen: usize,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

struct SeedRun {
    seed: u64,
    tokens: Vec<u32>,
    oracle: Vec<u32>,
    report: RunReport,
}

fn run_seed(model: &Model, params: &BackendParams, prompt_len: usize, gen: usize, seed: u64) -> Result<SeedRun> {
    let ctx = Context::new(params.clone(), seed)?;
    let mut mpc = MpcSession::for_context(&ctx, seed);
    let p = prompt(prompt_len, model.config.vocab, seed);
    let (tokens, report) = generate(model, &p, gen, &ctx, &mut mpc)?;
    let oracle = oracle_generate(model, &p, gen, ctx.modulus())?;
    Ok(SeedRun {
        seed,
        tokens,
        oracle,
        report,
    })
}

pub fn run(setup: &Setup, seed: u64) -> Result<Summary> {
    let cfg = &setup.config;
    let model = &setup.model;
    let seeds: Vec<u64> = (0..cfg.seeds.max(1) as u64).map(|i| seed.wrapping_add(i)).collect();
    let runs = seeds
        .par_iter()
        .map(|&s| run_seed(model, &setup.params, cfg.prompt_len, cfg.gen, s))
        .collect::<Result<Vec<_>>>()?;

    let mut checks = Vec::new();
    let mismatched: Vec<u64> = runs.iter().filter(|r| r.tokens != r.oracle).map(|r| r.seed).collect();
    checks.push(CheckResult::new(
        "oracle_tokens",
        mismatched.is_empty(),
        format!("{} seeds, mismatches at {mismatched:?}", runs.len()),
    ));
    checks.push(stateless_check(setup, seed)?);
    checks.push(compaction_check(setup, &runs[0].report));
    checks.push(counts_check(setup, &runs[0].report)?);
    checks.push(prefix_check(setup, seed)?);
    checks.push(kernel_check(cfg.kernel_instances, seed)?);
    checks.push(table_check()?);
    checks.push(gelu_check()?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(Summary {
        seed,
        n_slots: setup.params.n_slots,
        modulus: setup.params.plain_modulus,
        prompt_len: cfg.prompt_len,
        gen: cfg.gen,
        checks,
        passed,
    })
}

fn stateless_check(setup: &Setup, seed: u64) -> Result<CheckResult> {
    let k = setup.config.gen.min(4);
    let p = prompt(setup.config.prompt_len, setup.model.config.vocab, seed);
    let c1 = Context::new(setup.params.clone(), seed)?;
    let (cached, _) = generate(&setup.model, &p, k, &c1, &mut MpcSession::for_context(&c1, seed))?;
    let c2 = Context::new(setup.params.clone(), seed)?;
    let (stateless, _) = generate_stateless(&setup.model, &p, k, &c2, &mut MpcSession::for_context(&c2, seed))?;
    Ok(CheckResult::new(
        "stateless_agreement",
        cached == stateless,
        format!("{k} tokens"),
    ))
}

fn compaction_check(setup: &Setup, report: &RunReport) -> CheckResult {
    let cfg = &setup.model.config;
    let heads = cfg.layers * cfg.heads;
    let b = setup.params.n_slots / cfg.head_dim().next_power_of_two();
    let bad: Vec<usize> = report
        .steps
        .iter()
        .filter(|s| s.cache.auto_cts != heads * s.cache.t_auto.div_ceil(b))
        .map(|s| s.cache.t_auto)
        .collect();
    CheckResult::new(
        "cache_compaction",
        bad.is_empty(),
        format!("B = {b}, violations at t = {bad:?}"),
    )
}

fn counts_check(setup: &Setup, report: &RunReport) -> Result<CheckResult> {
    let v = validate_against_counts(report, &setup.model.config)?;
    let exact: Vec<String> = v
        .discrepancies()
        .iter()
        .filter(|c| c.tolerance == 0.0)
        .map(|c| format!("{} {} != {}", c.metric, c.measured, c.predicted))
        .collect();
    Ok(CheckResult::new(
        "closed_form_counts",
        exact.is_empty(),
        format!("{} checks, {} exact mismatches {exact:?}", v.checks.len(), exact.len()),
    ))
}

fn prefix_check(setup: &Setup, seed: u64) -> Result<CheckResult> {
    let k = 3;
    let cfg = &setup.model.config;
    let cap = cfg.max_seq + 1 - k;
    let mut lens: Vec<usize> = [setup.config.prompt_len, 2 * setup.config.prompt_len]
        .into_iter()
        .map(|m| m.clamp(1, cap))
        .collect();
    lens.dedup();
    let mut per_len = Vec::new();
    for &m in &lens {
        let ctx = Context::new(setup.params.clone(), seed)?;
        let mut mpc = MpcSession::for_context(&ctx, seed);
        let (_, report) = generate(&setup.model, &prompt(m, cfg.vocab, seed), k, &ctx, &mut mpc)?;
        per_len.push(report.steps.iter().map(|s| s.counters.he_only()).collect::<Vec<_>>());
    }
    let same = per_len.windows(2).all(|w| w[0] == w[1]);
    Ok(CheckResult::new(
        "decode_prefix_independence",
        same,
        format!("prompt lengths {lens:?}"),
    ))
}

fn random_instance(kind: usize, ctx: &Context, rng: &mut ChaCha20Rng) -> Result<bool> {
    let p = ctx.modulus();
    let n = ctx.n_slots();
    Ok(match kind {
        0 => {
            let (m, d1, d2) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16));
            let x = Matrix::random(m, d1, p, rng);
            let w = Matrix::random(d1, d2, p, rng);
            let g = dense_group(m, d1, n);
            let xp = encode(&x, Encoding::outer_grouped(m, d1, g), ctx, true)?;
            let wp = encode(&w, Encoding::diagonal(d1, d2), ctx, false)?;
            decode(&cpmm_outer_diagonal(&xp, &wp, ctx)?, ctx)? == x.matmul(&w)?
        }
        1 => {
            let (d1, d2) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let x = Matrix::random(1, d1, p, rng);
            let w = Matrix::random(d1, d2, p, rng);
            let wp = encode(&w, Encoding::diagonal(d1, d2), ctx, false)?;
            let y = ctx.decrypt(&cpvm_inner_diagonal(&ctx.encrypt_values(x.row(0))?, &wp, ctx)?)?;
            y.slots()[..d2] == *x.matmul(&w)?.row(0)
        }
        2 => {
            let (r, l) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let b = Matrix::random(r, l, p, rng);
            let c = Matrix::random(l, 1, p, rng);
            let packed = encode(&b, Encoding::outer(r, l), ctx, true)?;
            let s = arcc_inner_inner(&ctx.encrypt_values(&c.col(0))?, &packed, ctx)?;
            s.decrypt(ctx)? == b.matmul(&c)?.col(0)
        }
        _ => {
            let (r, d) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let rows = Matrix::random(r, d, p, rng);
            let v = Matrix::random(d, 1, p, rng);
            let packed = encode(&rows, Encoding::inner_compacted(r, d, n), ctx, true)?;
            let s = arcc_inner_outer(&ctx.encrypt_values(&v.col(0))?, &packed, ctx)?;
            s.decrypt(ctx)? == rows.matmul(&v)?.col(0)
        }
    })
}

fn kernel_check(instances: usize, seed: u64) -> Result<CheckResult> {
    let ctx = Context::new(BackendParams::new(64)?, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6b65_726e);
    let mut failures = [0usize; 4];
    for i in 0..instances {
        if !random_instance(i % 4, &ctx, &mut rng)? {
            failures[i % 4] += 1;
        }
    }
    Ok(CheckResult::new(
        "kernel_equivalence",
        failures.iter().all(|&f| f == 0),
        format!("{instances} instances; failures cpmm/cpvm/inner_inner/inner_outer = {failures:?}"),
    ))
}

fn table_check() -> Result<CheckResult> {
    let d = Dims::TABLE;
    let cells = [
        (
            Method::Gazelle,
            predict_costs(Method::Gazelle, Stage::Prefill, d)?.mult.value,
            98304.0,
        ),
        (
            Method::Iron,
            predict_costs(Method::Iron, Stage::Prefill, d)?.mult.value,
            768.0,
        ),
        (
            Method::Bolt,
            predict_costs(Method::Bolt, Stage::Prefill, d)?.mult.value,
            768.0,
        ),
        (
            Method::CryptoGen,
            predict_costs(Method::CryptoGen, Stage::Prefill, d)?.mult.value,
            768.0,
        ),
        (
            Method::CryptoGen,
            predict_costs(Method::CryptoGen, Stage::Prefill, d)?.ct.value,
            12.0,
        ),
    ];
    let bad: Vec<String> = cells
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(m, got, want)| format!("{m}: {got} != {want}"))
        .collect();
    Ok(CheckResult::new(
        "cost_table_cells",
        bad.is_empty(),
        format!("{} reported-only cells, mismatches {bad:?}", reported_only().len()),
    ))
}

fn gelu_check() -> Result<CheckResult> {
    let fp = cryptogen_core::model::ModelConfig::toy().fixed_point(BackendParams::new(64)?.plain_modulus)?;
    let mut ops = PlainOps::new(fp.modulus);
    let xs: Vec<f64> = (-4000..=4000).map(|i| i as f64 * 1e-3).collect();
    let input: Vec<i64> = xs.iter().map(|&x| fp.quantize(x)).collect();
    let enc = ops.public(&input);
    let out = fp.decode_all(&gelu(&mut ops, &enc, &fp));
    let mut worst = 0.0f64;
    let mut passthrough = true;
    let edge = fp.quantize(GELU_RANGE);
    for ((&x, &q), &y) in xs.iter().zip(&input).zip(&out) {
        let xq = q as f64 / fp.scale();
        if q.abs() <= edge {
            worst = worst.max((y - gelu_reference(xq)).abs());
        } else {
            let want = if x > 0.0 { xq } else { 0.0 };
            passthrough &= y == want;
        }
    }
    Ok(CheckResult::new(
        "gelu_error",
        worst <= 1e-2 && passthrough,
        format!("max error {worst:.5} on the approximated range, passthrough exact: {passthrough}"),
    ))
}
