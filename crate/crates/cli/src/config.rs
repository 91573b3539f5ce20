//! Run configuration shared by `verify`, `bench` and `generate`.

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use cryptogen_core::model::{Model, ModelConfig};
use cryptogen_core::BackendParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model directory, relative to the config file. A toy model is
    /// generated from `model_seed` when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default = "default_slots")]
    pub n_slots: usize,
    #[serde(default)]
    pub plain_modulus: Option<u64>,
    #[serde(default = "default_prompt")]
    pub prompt_len: usize,
    #[serde(default = "default_gen")]
    pub gen: usize,
    /// Independent oracle runs in `verify`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_instances")]
    pub kernel_instances: usize,
}

fn default_slots() -> usize {
    64
}
fn default_prompt() -> usize {
    8
}
fn default_gen() -> usize {
    16
}
fn default_seeds() -> usize {
    4
}
fn default_instances() -> usize {
    50
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(m) = &cfg.model {
            if m.is_relative() {
                cfg.model = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }
}

/// Everything a run needs, resolved from config file and flags.
pub struct Setup {
    pub config: RunConfig,
    pub model: Model,
    pub params: BackendParams,
}

impl Setup {
    pub fn resolve(config: Option<&Path>, params: Option<&Path>, model: Option<&Path>) -> Result<Self> {
        let mut config = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = model {
            config.model = Some(m.to_path_buf());
        }
        let model = match &config.model {
            Some(dir) => Model::load(dir).with_context(|| format!("loading model {}", dir.display()))?,
            None => Model::generate(ModelConfig::toy(), config.model_seed)?,
        };
        let params = match params {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let bp: BackendParams =
                    serde_json::from_str(&text).with_context(|| format!("parsing params {}", p.display()))?;
                bp.validate()?;
                bp
            }
            None => match config.plain_modulus {
                Some(q) => BackendParams::with_modulus(config.n_slots, q)?,
                None => BackendParams::new(config.n_slots)?,
            },
        };
        config.n_slots = params.n_slots;
        model.config.check_slots(params.n_slots)?;
        Ok(Self { config, model, params })
    }
}

/// Deterministic prompt of `len` tokens for `seed`.
pub fn prompt(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7072_6f6d_7074);
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Parses `"1,2,3"`.
pub fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<u32>().with_context(|| format!("bad token `{t}`")))
        .collect()
}
