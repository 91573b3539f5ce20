//! Toy decoder-only transformer: configuration, fixed-point weights, model
//! files, and the prefill/decode pipeline over encrypted or plaintext
//! executors.
//!
//! Blocks are post-norm: `x <- LN(x + Attn(x))`, `x <- LN(x + FFN(x))`.
//! Embeddings are learned token plus absolute position tables; the output
//! head is the transposed token table.

mod exec;
mod float;
mod he;
mod plain;

use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::{from_signed, to_signed, Context};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nonlinear::{FixedPointParams, DEFAULT_FRAC_BITS};

pub use exec::{
    decode_step, generate, generate_stateless, oracle_generate, oracle_logits, prefill, GenerationState, RunReport,
    StepReport,
};
pub use float::{float_generate, float_logits};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    #[serde(default = "default_frac_bits")]
    pub frac_bits: u32,
    #[serde(default = "default_reciprocal_iterations")]
    pub reciprocal_iterations: u32,
}

fn default_frac_bits() -> u32 {
    DEFAULT_FRAC_BITS
}

fn default_reciprocal_iterations() -> u32 {
    4
}

impl ModelConfig {
    /// Two layers, width 32, four heads of 8, vocabulary 64.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            vocab: 64,
            max_seq: 128,
            frac_bits: DEFAULT_FRAC_BITS,
            reciprocal_iterations: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.d_model,
            self.heads,
            self.ffn_dim,
            self.vocab,
            self.max_seq,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidParams("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidParams(format!(
                "hidden size {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::InvalidParams("hidden size must be at least 2".into()));
        }
        Ok(())
    }

    /// Checks that every packed vector fits the context's slots.
    pub fn check_slots(&self, n_slots: usize) -> Result<()> {
        for (what, len) in [
            ("hidden size", self.d_model),
            ("ffn size", self.ffn_dim),
            ("vocabulary", self.vocab),
        ] {
            if len.next_power_of_two() > n_slots {
                return Err(Error::InvalidParams(format!(
                    "{what} {len} does not fit {n_slots} slots"
                )));
            }
        }
        Ok(())
    }

    pub fn fixed_point(&self, modulus: u64) -> Result<FixedPointParams> {
        let mut fp = FixedPointParams::new(self.frac_bits, modulus)?;
        fp.reciprocal_iterations = self.reciprocal_iterations;
        Ok(fp)
    }
}

/// Signed fixed-point matrix (row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl QMatrix {
    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[i64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> QMatrix {
        QMatrix {
            rows: self.cols,
            cols: self.rows,
            data: (0..self.cols * self.rows)
                .map(|k| self.get(k % self.rows, k / self.rows))
                .collect(),
        }
    }

    /// Residues mod `p`.
    pub fn to_matrix(&self, p: u64) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, p, |i, j| from_signed(self.get(i, j), p))
    }

    pub fn from_matrix(m: &Matrix) -> QMatrix {
        QMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data: (0..m.rows() * m.cols())
                .map(|k| m.get_signed(k / m.cols(), k % m.cols()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> i64 {
        self.data.iter().map(|v| v.abs()).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerWeights {
    pub wq: QMatrix,
    pub wk: QMatrix,
    pub wv: QMatrix,
    pub wo: QMatrix,
    pub ln1_gamma: Vec<i64>,
    pub ln1_beta: Vec<i64>,
    pub w1: QMatrix,
    pub b1: Vec<i64>,
    pub w2: QMatrix,
    pub b2: Vec<i64>,
    pub ln2_gamma: Vec<i64>,
    pub ln2_beta: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embedding: QMatrix,
    pub position_embedding: QMatrix,
    pub layers: Vec<LayerWeights>,
    /// `d_model x vocab`, the transposed token table.
    pub lm_head: QMatrix,
}

const FORMAT: &str = "cryptogen-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    modulus: u64,
    seed: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl Model {
    /// Random weights: unit-variance embeddings, `1/sqrt(fan_in)` projections,
    /// gains near 1 and small biases, all quantized to `2^-f`.
    pub fn generate(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let scale = (1u64 << config.frac_bits) as f64;
        let mut sample = |rows: usize, cols: usize, mean: f64, std: f64| {
            let dist = Normal::new(mean, std).expect("positive std");
            QMatrix {
                rows,
                cols,
                data: (0..rows * cols)
                    .map(|_| (dist.sample(&mut rng) * scale).round() as i64)
                    .collect(),
            }
        };
        let (d, f) = (config.d_model, config.ffn_dim);
        let proj = 1.0 / (d as f64).sqrt();
        let token_embedding = sample(config.vocab, d, 0.0, 1.0);
        let position_embedding = sample(config.max_seq, d, 0.0, 0.5);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: sample(d, d, 0.0, proj),
                wk: sample(d, d, 0.0, proj),
                wv: sample(d, d, 0.0, proj),
                wo: sample(d, d, 0.0, proj),
                ln1_gamma: sample(1, d, 1.0, 0.1).data,
                ln1_beta: sample(1, d, 0.0, 0.1).data,
                w1: sample(d, f, 0.0, proj),
                b1: sample(1, f, 0.0, 0.1).data,
                w2: sample(f, d, 0.0, 1.0 / (f as f64).sqrt()),
                b2: sample(1, d, 0.0, 0.1).data,
                ln2_gamma: sample(1, d, 1.0, 0.1).data,
                ln2_beta: sample(1, d, 0.0, 0.1).data,
            })
            .collect();
        let lm_head = token_embedding.transpose();
        Ok(Model {
            config,
            token_embedding,
            position_embedding,
            layers,
            lm_head,
        })
    }

    fn tensors(&self) -> Vec<(String, QMatrix)> {
        let vec_tensor = |v: &Vec<i64>| QMatrix {
            rows: 1,
            cols: v.len(),
            data: v.clone(),
        };
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.clone()),
            ("position_embedding".to_string(), self.position_embedding.clone()),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", w.wq.clone()),
                ("wk", w.wk.clone()),
                ("wv", w.wv.clone()),
                ("wo", w.wo.clone()),
                ("ln1_gamma", vec_tensor(&w.ln1_gamma)),
                ("ln1_beta", vec_tensor(&w.ln1_beta)),
                ("w1", w.w1.clone()),
                ("b1", vec_tensor(&w.b1)),
                ("w2", w.w2.clone()),
                ("b2", vec_tensor(&w.b2)),
                ("ln2_gamma", vec_tensor(&w.ln2_gamma)),
                ("ln2_beta", vec_tensor(&w.ln2_beta)),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out
    }

    fn expected_shapes(config: &ModelConfig) -> Vec<(String, usize, usize)> {
        let (d, f) = (config.d_model, config.ffn_dim);
        let mut out = vec![
            ("token_embedding".to_string(), config.vocab, d),
            ("position_embedding".to_string(), config.max_seq, d),
        ];
        for l in 0..config.layers {
            for (name, r, c) in [
                ("wq", d, d),
                ("wk", d, d),
                ("wv", d, d),
                ("wo", d, d),
                ("ln1_gamma", 1, d),
                ("ln1_beta", 1, d),
                ("w1", d, f),
                ("b1", 1, f),
                ("w2", f, d),
                ("b2", 1, d),
                ("ln2_gamma", 1, d),
                ("ln2_beta", 1, d),
            ] {
                out.push((format!("layer{l}.{name}"), r, c));
            }
        }
        out
    }

    /// Writes `manifest.json` plus one matrix file per tensor, with values
    /// stored as residues mod `modulus`.
    pub fn save(&self, dir: impl AsRef<Path>, modulus: u64, seed: Option<u64>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let bound = (modulus / 2) as i64;
        let mut entries = Vec::new();
        for (name, t) in self.tensors() {
            if t.max_abs() >= bound {
                return Err(Error::InvalidParams(format!(
                    "tensor {name} does not fit modulus {modulus}"
                )));
            }
            let file = format!("{name}.bin");
            t.to_matrix(modulus).save_binary(dir.join(&file))?;
            entries.push(TensorEntry {
                name,
                rows: t.rows,
                cols: t.cols,
                file,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            modulus,
            seed,
            tensors: entries,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let config = manifest.config;
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if manifest.tensors.len() != expected.len() {
            return Err(Error::Schema(format!(
                "{} tensors listed, configuration needs {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, rows, cols), entry) in expected.iter().zip(&manifest.tensors) {
            if &entry.name != name || entry.rows != *rows || entry.cols != *cols {
                return Err(Error::Schema(format!(
                    "tensor {} ({}x{}) where {name} ({rows}x{cols}) was expected",
                    entry.name, entry.rows, entry.cols
                )));
            }
            let m = Matrix::load_binary(dir.join(&entry.file))?;
            if m.rows() != *rows || m.cols() != *cols || m.modulus() != manifest.modulus {
                return Err(Error::Schema(format!(
                    "file {} does not match its manifest entry",
                    entry.file
                )));
            }
            loaded.push(QMatrix::from_matrix(&m));
        }
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("count checked");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln1_gamma: next().data,
                ln1_beta: next().data,
                w1: next(),
                b1: next().data,
                w2: next(),
                b2: next().data,
                ln2_gamma: next().data,
                ln2_beta: next().data,
            })
            .collect();
        let lm_head = token_embedding.transpose();
        Ok(Model {
            config,
            token_embedding,
            position_embedding,
            layers,
            lm_head,
        })
    }

    /// Input row for `token` at `position`: token plus position embedding.
    pub fn embed(&self, token: u32, position: usize) -> Result<Vec<i64>> {
        let t = token as usize;
        if t >= self.config.vocab {
            return Err(Error::InvalidParams(format!(
                "token {token} outside vocabulary {}",
                self.config.vocab
            )));
        }
        if position >= self.config.max_seq {
            return Err(Error::InvalidParams(format!(
                "position {position} beyond max_seq {}",
                self.config.max_seq
            )));
        }
        Ok(self
            .token_embedding
            .row(t)
            .iter()
            .zip(self.position_embedding.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Checks the model against a context before a run.
    pub fn check_context(&self, ctx: &Context) -> Result<FixedPointParams> {
        self.config.check_slots(ctx.n_slots())?;
        let fp = self.config.fixed_point(ctx.modulus())?;
        let bound = (ctx.modulus() / 2) as i64;
        if self.tensors().iter().any(|(_, t)| t.max_abs() >= bound) {
            return Err(Error::InvalidParams("weights exceed the plaintext modulus".into()));
        }
        Ok(fp)
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[i64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn signed_all(v: &[u64], p: u64) -> Vec<i64> {
    v.iter().map(|&x| to_signed(x, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rules() {
        let mut c = ModelConfig::toy();
        assert!(c.validate().is_ok());
        assert_eq!(c.head_dim(), 8);
        c.heads = 5;
        assert!(c.validate().is_err());
        let c = ModelConfig::toy();
        assert!(c.check_slots(64).is_ok());
        assert!(c.check_slots(32).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_byte_identical() {
        let m = Model::generate(ModelConfig::toy(), 7).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        m.save(a.path(), 536903681, Some(7)).unwrap();
        let back = Model::load(a.path()).unwrap();
        assert_eq!(back, m);
        back.save(b.path(), 536903681, Some(7)).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                std::fs::read(a.path().join(&name)).unwrap(),
                std::fs::read(b.path().join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn load_rejects_bad_shapes() {
        let m = Model::generate(ModelConfig::toy(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), 536903681, None).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"heads\": 4", "\"heads\": 5", 1)).unwrap();
        assert!(matches!(Model::load(dir.path()), Err(Error::InvalidParams(_))));
        std::fs::write(&path, text.replacen("\"ffn_dim\": 64", "\"ffn_dim\": 32", 1)).unwrap();
        assert!(matches!(Model::load(dir.path()), Err(Error::Schema(_))));
    }

    #[test]
    fn generation_is_seeded() {
        let a = Model::generate(ModelConfig::toy(), 3).unwrap();
        assert_eq!(a, Model::generate(ModelConfig::toy(), 3).unwrap());
        assert_ne!(a, Model::generate(ModelConfig::toy(), 4).unwrap());
        assert_eq!(a.lm_head.get(5, 9), a.token_embedding.get(9, 5));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1, 5, 5, 2]), 1);
        assert_eq!(argmax(&[-3]), 0);
    }
}
