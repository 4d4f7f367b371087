//! Pretrained word-embedding loading, mean-pooled sentence embeddings,
//! and cosine similarity — the retrieval primitives behind cluster
//! augmentation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::textprep::{Vocab, PAD_ID, UNK_ID};
use crate::Result;

/// Row matrix of word vectors aligned to vocabulary ids. The pad row
/// is exactly zero; the unk row is the mean of loaded vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
    /// Fraction of vocabulary words found in the source file.
    coverage: f64,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.rows[id]
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic fallback vector for a word absent from the source file.
fn hashed_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token) ^ seed);
    (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect()
}

/// Build a fully hash-seeded table, for corpora without a pretrained
/// embedding file. Coverage is reported as 0.
pub fn hashed_embeddings(vocab: &Vocab, dim: usize, seed: u64) -> EmbeddingTable {
    let rows = vocab
        .tokens()
        .enumerate()
        .map(|(id, tok)| {
            if id == PAD_ID {
                vec![0.0; dim]
            } else {
                hashed_vector(tok, dim, seed)
            }
        })
        .collect();
    EmbeddingTable {
        dim,
        rows,
        coverage: 0.0,
    }
}

/// Load a whitespace-separated text embedding file ("word v1 ... vd")
/// against a vocabulary. Words missing from the file get deterministic
/// hash-seeded vectors.
pub fn load_embeddings(path: &Path, vocab: &Vocab) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    let mut dim: Option<usize> = None;
    let mut loaded: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts
            .next()
            .ok_or_else(|| Error::parse(lineno, "empty line"))?;
        let vec: Vec<f64> = parts
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(lineno, format!("bad float `{v}`")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(Error::parse(
                    lineno,
                    format!("dimension {} does not match {}", vec.len(), d),
                ));
            }
            _ => {}
        }
        if !vec.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(lineno, "non-finite embedding value"));
        }
        loaded.insert(word.to_string(), vec);
    }
    let dim = dim.ok_or_else(|| Error::invalid("embedding file is empty"))?;

    let mut unk = vec![0.0; dim];
    for v in loaded.values() {
        for (u, x) in unk.iter_mut().zip(v) {
            *u += x;
        }
    }
    if !loaded.is_empty() {
        for u in &mut unk {
            *u /= loaded.len() as f64;
        }
    }

    let mut found = 0usize;
    let mut real_words = 0usize;
    let rows = vocab
        .tokens()
        .enumerate()
        .map(|(id, tok)| {
            if id == PAD_ID {
                return vec![0.0; dim];
            }
            if id == UNK_ID {
                return unk.clone();
            }
            real_words += 1;
            match loaded.get(tok) {
                Some(v) => {
                    found += 1;
                    v.clone()
                }
                None => hashed_vector(tok, dim, 0),
            }
        })
        .collect();
    let coverage = if real_words == 0 {
        1.0
    } else {
        found as f64 / real_words as f64
    };
    Ok(EmbeddingTable {
        dim,
        rows,
        coverage,
    })
}

/// Mean of non-pad token rows; zero vector when every id is padding.
pub fn sentence_embedding(ids: &[usize], table: &EmbeddingTable) -> Vec<f64> {
    let mut out = vec![0.0; table.dim()];
    let mut n = 0usize;
    for &id in ids {
        if id == PAD_ID {
            continue;
        }
        for (o, v) in out.iter_mut().zip(table.row(id)) {
            *o += v;
        }
        n += 1;
    }
    if n > 0 {
        for o in &mut out {
            *o /= n as f64;
        }
    }
    out
}

/// Cosine similarity in [-1, 1]; zero when either norm vanishes.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine_similarity dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}
