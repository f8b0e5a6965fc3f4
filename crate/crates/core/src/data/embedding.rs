//! Word embedding tables with a seeded hash fallback for unknown tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Stable 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    seed: u64,
}

impl EmbeddingTable {
    /// A table with no stored vectors: every token takes the hash fallback.
    pub fn hashed(dim: usize, seed: u64) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            seed,
        }
    }

    /// Parses `token v1 ... v_d` lines. All rows must share one dimension.
    pub fn parse(text: &str, origin: &Path, seed: u64) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    detail: e.to_string(),
                })?;
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    detail: "expected finite vector components after the token".into(),
                });
            }
            let d = *dim.get_or_insert(values.len());
            if values.len() != d {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    detail: format!("vector has {} components, expected {d}", values.len()),
                });
            }
            vectors.insert(token.to_string(), values);
        }
        let dim = dim.ok_or_else(|| Error::Format {
            path: origin.to_path_buf(),
            detail: "embedding table is empty".into(),
        })?;
        Ok(EmbeddingTable { dim, vectors, seed })
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    /// The stored vector, or a deterministic pseudo-random vector with
    /// components in `[-1, 1)` derived from `(seed, token)`.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.vectors.get(token) {
            return v.clone();
        }
        let key = fnv1a(token.as_bytes()) ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// `l_max × d_w` matrix of token vectors, truncated past `l_max` and
    /// zero-padded below the sentence length.
    pub fn embed_tokens(&self, tokens: &[String], l_max: usize) -> Tensor {
        let mut data = vec![0.0; l_max * self.dim];
        for (l, tok) in tokens.iter().take(l_max).enumerate() {
            data[l * self.dim..(l + 1) * self.dim].copy_from_slice(&self.lookup(tok));
        }
        Tensor::matrix(l_max, self.dim, data).expect("embedding shape")
    }
}
