//! Label embeddings: the mean of word vectors for each class's words, read
//! from a text file or drawn from a deterministic per-word fallback.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    File,
    Fallback,
    /// Some words came from the file, the rest from the fallback.
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingTable {
    pub dim: usize,
    pub words: Vec<Vec<String>>,
    pub vectors: Vec<Vec<f64>>,
    pub source: EmbeddingSource,
}

impl LabelEmbeddingTable {
    pub fn get(&self, class: usize) -> &[f64] {
        &self.vectors[class]
    }
}

/// Parses `word v1 ... vE` lines. Blank lines are skipped; every vector
/// must have the same length.
pub fn parse_word_vectors(text: &str, path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let vals = parts
            .map(|p| p.parse::<f64>().map_err(|e| err(format!("`{p}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.is_empty() {
            return Err(err(format!("word `{word}` has no vector")));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("word `{word}` has a non-finite component")));
        }
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => return Err(err(format!("expected {d} components, found {}", vals.len()))),
            _ => {}
        }
        out.insert(word.to_lowercase(), vals);
    }
    Ok(out)
}

pub fn load_word_vectors(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    parse_word_vectors(&std::fs::read_to_string(path)?, path)
}

/// Unit-norm vector determined by `(seed, word)`.
pub fn fallback_vector(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(word.to_lowercase().as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Splits each class's word list on whitespace and averages the word vectors.
pub fn build_label_embeddings(
    class_words: &[Vec<String>],
    vectors: Option<&HashMap<String, Vec<f64>>>,
    dim: usize,
    seed: u64,
) -> Result<LabelEmbeddingTable> {
    if let Some(v) = vectors.and_then(|m| m.values().next()) {
        if v.len() != dim {
            return Err(Error::dim("word vectors", &[v.len()], &[dim]));
        }
    }
    let (mut hits, mut misses) = (0usize, 0usize);
    let mut words_out = Vec::with_capacity(class_words.len());
    let mut table = Vec::with_capacity(class_words.len());
    for (c, words) in class_words.iter().enumerate() {
        let words: Vec<String> = words.iter().flat_map(|w| w.split_whitespace().map(str::to_lowercase)).collect();
        if words.is_empty() {
            return Err(Error::contract(format!("class {c} has an empty word list")));
        }
        let mut acc = vec![0.0; dim];
        for w in &words {
            let v = match vectors.and_then(|m| m.get(w)) {
                Some(v) => {
                    hits += 1;
                    v.clone()
                }
                None => {
                    misses += 1;
                    fallback_vector(w, dim, seed)
                }
            };
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        let n = words.len() as f64;
        table.push(acc.into_iter().map(|a| a / n).collect());
        words_out.push(words);
    }
    let source = match (hits, misses) {
        (_, 0) if vectors.is_some() => EmbeddingSource::File,
        (0, _) => EmbeddingSource::Fallback,
        _ => EmbeddingSource::Mixed,
    };
    Ok(LabelEmbeddingTable {
        dim,
        words: words_out,
        vectors: table,
        source,
    })
}
