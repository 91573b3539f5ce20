//! Per-step operation-count sweeps behind `cryptogen bench`.

use std::fmt::Write as _;

use anyhow::Result;
use cryptogen_core::model::{generate, generate_stateless, RunReport};
use cryptogen_core::nonlinear::MpcSession;
use cryptogen_core::Context;
use rayon::prelude::*;

use crate::config::{prompt, Setup};

pub const HEADER: &str =
    "method,prompt_len,gen,step,mult_plain,mult_cipher,rotate,fresh_ct,mpc_bytes,refresh_events,cache_cts\n";

pub const SWEEP: [usize; 4] = [8, 16, 32, 64];

pub fn run_one(setup: &Setup, m: usize, k: usize, stateless: bool, seed: u64) -> Result<RunReport> {
    let ctx = Context::new(setup.params.clone(), seed)?;
    let mut mpc = MpcSession::for_context(&ctx, seed);
    let p = prompt(m, setup.model.config.vocab, seed);
    let (_, report) = if stateless {
        generate_stateless(&setup.model, &p, k, &ctx, &mut mpc)?
    } else {
        generate(&setup.model, &p, k, &ctx, &mut mpc)?
    };
    Ok(report)
}

/// Row 0 is the prefill (through the first token); row `i` is the decode
/// step that produced token `i`. `cache_cts` counts generated-segment
/// ciphertexts of one head's key cache.
pub fn csv_rows(setup: &Setup, report: &RunReport, k: usize) -> String {
    let heads = setup.model.config.layers * setup.model.config.heads;
    let mut out = String::new();
    let mut row = |step: usize, c: &cryptogen_core::OpCounter, refreshes: u64, cts: usize| {
        let _ = writeln!(
            out,
            "{},{},{k},{step},{},{},{},{},{},{refreshes},{cts}",
            report.method, report.prompt_len, c.mult_plain, c.mult_cipher, c.rotate, c.encrypt, c.mpc_bytes
        );
    };
    row(0, &report.prefill, report.prefill.refresh_events, 0);
    for (i, s) in report.steps.iter().enumerate() {
        row(i + 1, &s.counters, s.refresh_events as u64, s.cache.auto_cts / heads);
    }
    out
}

/// Runs the requested grid. With `sweep`, `k` ranges over [`SWEEP`] at the
/// given prefill and then the prefill over [`SWEEP`] at the given `k`;
/// points that do not fit `max_seq` are skipped.
pub fn run(setup: &Setup, m: usize, k: usize, sweep: bool, stateless: bool, seed: u64) -> Result<String> {
    let mut grid = vec![(m, k)];
    if sweep {
        grid = SWEEP.iter().map(|&kk| (m, kk)).collect();
        grid.extend(SWEEP.iter().filter(|&&mm| mm != m).map(|&mm| (mm, k)));
        grid.retain(|&(mm, kk)| mm + kk.saturating_sub(1) <= setup.model.config.max_seq);
    }
    let reports = grid
        .par_iter()
        .map(|&(mm, kk)| run_one(setup, mm, kk, stateless, seed).map(|r| (r, kk)))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from(HEADER);
    for (r, kk) in &reports {
        csv.push_str(&csv_rows(setup, r, *kk));
    }
    Ok(csv)
}
