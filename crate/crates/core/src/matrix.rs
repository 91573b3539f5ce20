//! Dense matrices over `Z_p` with the flat binary and JSON file formats.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{add_mod, from_signed, mul_mod, to_signed};
use crate::error::{Error, Result};

/// `b"CGMATRX1"` read as a little-endian word.
pub const MATRIX_MAGIC: u64 = u64::from_le_bytes(*b"CGMATRX1");
const HEADER_WORDS: usize = 8;

/// Row-major matrix of residues mod `modulus`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    modulus: u64,
    data: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    modulus: u64,
    data: Vec<Vec<u64>>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, modulus: u64) -> Self {
        Self {
            rows,
            cols,
            modulus,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, modulus: u64, mut f: impl FnMut(usize, usize) -> u64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j) % modulus);
            }
        }
        Self {
            rows,
            cols,
            modulus,
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<u64>], modulus: u64) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self::from_fn(rows.len(), cols, modulus, |i, j| rows[i][j]))
    }

    /// Signed integers mapped into `Z_p` with wraparound.
    pub fn from_signed(rows: usize, cols: usize, modulus: u64, values: &[i64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            modulus,
            data: values.iter().map(|&v| from_signed(v, modulus)).collect(),
        })
    }

    pub fn identity(n: usize, modulus: u64) -> Self {
        Self::from_fn(n, n, modulus, |i, j| u64::from(i == j))
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, modulus: u64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, modulus, |_, _| rng.gen_range(0..modulus))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.data[i * self.cols + j]
    }

    pub fn get_signed(&self, i: usize, j: usize) -> i64 {
        to_signed(self.get(i, j), self.modulus)
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u64) {
        self.data[i * self.cols + j] = v % self.modulus;
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<u64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, self.modulus, |i, j| self.get(j, i))
    }

    /// Columns `start..start+width`.
    pub fn col_slice(&self, start: usize, width: usize) -> Self {
        Self::from_fn(self.rows, width, self.modulus, |i, j| self.get(i, start + j))
    }

    /// Rows `start..start+count`.
    pub fn row_slice(&self, start: usize, count: usize) -> Self {
        Self {
            rows: count,
            cols: self.cols,
            modulus: self.modulus,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Product mod `p`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows || self.modulus != other.modulus {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let p = self.modulus;
        let mut out = Matrix::zeros(self.rows, other.cols, p);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0 {
                    continue;
                }
                for j in 0..other.cols {
                    let idx = i * other.cols + j;
                    out.data[idx] = add_mod(out.data[idx], mul_mod(a, other.get(k, j), p), p);
                }
            }
        }
        Ok(out)
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let header = [
            MATRIX_MAGIC,
            self.rows as u64,
            self.cols as u64,
            self.modulus,
            0,
            0,
            0,
            0,
        ];
        let mut buf = Vec::with_capacity((HEADER_WORDS + self.data.len()) * 8);
        for word in header.iter().chain(&self.data) {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 || bytes.len() < HEADER_WORDS * 8 {
            return Err(Error::Schema(format!(
                "matrix file of {} bytes is truncated",
                bytes.len()
            )));
        }
        let words: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if words[0] != MATRIX_MAGIC {
            return Err(Error::Schema("bad matrix magic".into()));
        }
        let (rows, cols, modulus) = (words[1] as usize, words[2] as usize, words[3]);
        if modulus < 2 {
            return Err(Error::Schema(format!("bad modulus {modulus}")));
        }
        let body = &words[HEADER_WORDS..];
        if rows.checked_mul(cols) != Some(body.len()) {
            return Err(Error::Schema(format!(
                "header says {rows}x{cols} but body has {} words",
                body.len()
            )));
        }
        if let Some(bad) = body.iter().find(|&&v| v >= modulus) {
            return Err(Error::Schema(format!("entry {bad} is not reduced mod {modulus}")));
        }
        Ok(Self {
            rows,
            cols,
            modulus,
            data: body.to_vec(),
        })
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(file))
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_binary(std::fs::File::open(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let j = MatrixJson {
            rows: self.rows,
            cols: self.cols,
            modulus: self.modulus,
            data: (0..self.rows).map(|i| self.row(i).to_vec()).collect(),
        };
        Ok(serde_json::to_string(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: MatrixJson = serde_json::from_str(text)?;
        if j.data.len() != j.rows {
            return Err(Error::Schema(format!(
                "expected {} rows, found {}",
                j.rows,
                j.data.len()
            )));
        }
        let m = Self::from_rows(&j.data, j.modulus).map_err(|e| Error::Schema(e.to_string()))?;
        if j.rows > 0 && m.cols != j.cols {
            return Err(Error::Schema(format!("expected {} columns, found {}", j.cols, m.cols)));
        }
        if j.data.iter().flatten().any(|&v| v >= j.modulus) {
            return Err(Error::Schema("unreduced entry".into()));
        }
        Ok(Self { cols: j.cols, ..m })
    }
}
