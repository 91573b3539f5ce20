//! `cryptogen`: verification suites, generation runs, op-count benchmarks and
//! cost tables.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error
//! (bad flags, unreadable config, params or model).

mod bench;
mod config;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cryptogen_core::costmodel::{cells_csv, cells_markdown, table_cells_at, Dims, Method};
use cryptogen_core::model::{generate, generate_stateless, oracle_generate, Model, ModelConfig};
use cryptogen_core::nonlinear::MpcSession;
use cryptogen_core::{BackendParams, Context};

use config::{parse_tokens, prompt, Setup};

#[derive(Parser)]
#[command(
    name = "cryptogen",
    version,
    about = "Encrypted autoregressive decoding kernels: checks, runs and cost tables"
)]
struct Cli {
    /// Seed for every random choice (prompts, masks, shares).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for independent runs (seeds, sweep points).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    config: Option<PathBuf>,
    /// Backend parameters as JSON; overrides the config's slots and modulus.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Model directory; overrides the config's model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle-equivalence and invariant suite; prints a JSON summary.
    Verify(RunArgs),
    /// Per-step operation counts as CSV.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Prompt length.
        #[arg(long)]
        prefill: Option<usize>,
        /// Generated tokens.
        #[arg(long)]
        gen: Option<usize>,
        /// Sweep generation length and prompt length over 8, 16, 32, 64.
        #[arg(long)]
        sweep: bool,
        /// Recompute the whole prefix for every token instead of caching.
        #[arg(long)]
        stateless: bool,
    },
    /// Reproduce the cost comparison tables.
    Costs {
        /// Dimensions m,d1,d2,n,k.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<Dims>,
        /// Restrict to these methods (repeatable).
        #[arg(long)]
        method: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Directory for table.csv and table.md (both formats).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encrypted greedy generation; prints the run report as JSON.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated prompt tokens; a seeded random prompt otherwise.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        prefill: Option<usize>,
        #[arg(long)]
        gen: Option<usize>,
        #[arg(long)]
        stateless: bool,
        /// Also run the plaintext oracle and fail on any token mismatch.
        #[arg(long)]
        check: bool,
    },
    /// Write a random-weight model directory.
    GenModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        ffn_dim: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 128)]
        max_seq: usize,
        /// Slot count whose default modulus stores the weights.
        #[arg(long, default_value_t = 64)]
        n_slots: usize,
    },
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [m, d1, d2, n, k] => Ok(Dims { m, d1, d2, n, k }),
        _ => Err(format!("expected m,d1,d2,n,k but got {} values", v.len())),
    }
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<cryptogen_core::Error> for Failure {
    fn from(e: cryptogen_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn setup(run: &RunArgs) -> Result<Setup, Failure> {
    Setup::resolve(run.config.as_deref(), run.params.as_deref(), run.model.as_deref()).map_err(usage)
}

fn execute(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Verify(run) => {
            let s = setup(&run)?;
            let summary = verify::run(&s, cli.seed)?;
            for c in &summary.checks {
                log::info!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let json = serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n";
            emit(run.out.as_deref(), &json)?;
            Ok(summary.passed)
        }
        Command::Bench {
            run,
            prefill,
            gen,
            sweep,
            stateless,
        } => {
            let s = setup(&run)?;
            let m = prefill.unwrap_or(s.config.prompt_len);
            let k = gen.unwrap_or(s.config.gen);
            if m + k.saturating_sub(1) > s.model.config.max_seq {
                return Err(usage(anyhow!(
                    "prefill {m} + gen {k} exceeds max_seq {}",
                    s.model.config.max_seq
                )));
            }
            let csv = bench::run(&s, m, k, sweep, stateless, cli.seed)?;
            emit(run.out.as_deref(), &csv)?;
            Ok(true)
        }
        Command::Costs {
            dims,
            method,
            format,
            out,
        } => {
            let methods = if method.is_empty() {
                Method::ALL.to_vec()
            } else {
                method
                    .iter()
                    .map(|m| Method::from_str(m))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(usage)?
            };
            let cells = table_cells_at(dims.unwrap_or(Dims::TABLE), &methods).map_err(usage)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                    emit(Some(&dir.join("table.csv")), &cells_csv(&cells))?;
                    emit(Some(&dir.join("table.md")), &cells_markdown(&cells))?;
                }
                None => {
                    let text = match format {
                        Format::Csv => cells_csv(&cells),
                        Format::Markdown => cells_markdown(&cells),
                        Format::Json => serde_json::to_string_pretty(&cells).map_err(anyhow::Error::from)? + "\n",
                    };
                    emit(None, &text)?;
                }
            }
            Ok(true)
        }
        Command::Generate {
            run,
            prompt: tokens,
            prefill,
            gen,
            stateless,
            check,
        } => {
            let s = setup(&run)?;
            let p = match tokens {
                Some(t) => parse_tokens(&t).map_err(usage)?,
                None => prompt(prefill.unwrap_or(s.config.prompt_len), s.model.config.vocab, cli.seed),
            };
            let k = gen.unwrap_or(s.config.gen);
            let ctx = Context::new(s.params.clone(), cli.seed).map_err(usage)?;
            let mut mpc = MpcSession::for_context(&ctx, cli.seed);
            let (out_tokens, report) = if stateless {
                generate_stateless(&s.model, &p, k, &ctx, &mut mpc)
            } else {
                generate(&s.model, &p, k, &ctx, &mut mpc)
            }
            .map_err(usage)?;
            emit(run.out.as_deref(), &(report.to_json()? + "\n"))?;
            if check {
                let oracle = oracle_generate(&s.model, &p, k, ctx.modulus())?;
                if oracle != out_tokens {
                    log::error!("tokens {out_tokens:?} differ from oracle {oracle:?}");
                    return Ok(false);
                }
                log::info!("tokens match the plaintext oracle");
            }
            Ok(true)
        }
        Command::GenModel {
            out,
            layers,
            d_model,
            heads,
            ffn_dim,
            vocab,
            max_seq,
            n_slots,
        } => {
            let config = ModelConfig {
                layers,
                d_model,
                heads,
                ffn_dim,
                vocab,
                max_seq,
                ..ModelConfig::toy()
            };
            config.validate().map_err(usage)?;
            let params = BackendParams::new(n_slots).map_err(usage)?;
            let model = Model::generate(config, cli.seed)?;
            model.save(&out, params.plain_modulus, Some(cli.seed))?;
            log::info!("wrote model to {}", out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CRYPTOGEN_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
