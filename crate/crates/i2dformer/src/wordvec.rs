//! Pretrained word-vector files, tokenization, and token-to-matrix embedding.
//!
//! The vector file format is plain text, one `token v1 v2 ... v_dim` record
//! per line with single-space separators. Floats are printed in shortest
//! round-trip form, so parse → write → parse preserves every vector bitwise.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Immutable vocabulary-to-vector map. Entries keep file order; lookups go
/// through a side index.
#[derive(Debug, Clone)]
pub struct WordVectors {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    mean: Vec<f64>,
}

impl WordVectors {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Arithmetic mean of all entry vectors.
    pub fn mean_vector(&self) -> &[f64] {
        &self.mean
    }

    pub fn from_entries(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Protocol("word vector set is empty".into()));
        }
        let dim = entries[0].1.len();
        let mut tokens = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (token, vec) in entries {
            if vec.len() != dim {
                return Err(Error::Protocol(format!(
                    "vector for '{}' has {} components, expected {}",
                    token,
                    vec.len(),
                    dim
                )));
            }
            if index.contains_key(&token) {
                return Err(Error::Protocol(format!("duplicate token '{}'", token)));
            }
            index.insert(token.clone(), tokens.len());
            tokens.push(token);
            vectors.push(vec);
        }
        let mean = compute_mean(&vectors, dim);
        Ok(WordVectors {
            dim,
            tokens,
            vectors,
            index,
            mean,
        })
    }

    /// Write back in the same line format; floats in shortest round-trip form.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (token, vec) in self.tokens.iter().zip(&self.vectors) {
            out.push_str(token);
            for v in vec {
                let _ = write!(out, " {}", v);
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn compute_mean(vectors: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for vec in vectors {
        for (m, &v) in mean.iter_mut().zip(vec) {
            *m += v;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Parse a word-vector text file. The dimension is inferred from the first
/// line; every later line must match it.
pub fn parse_wordvec_file(path: &Path) -> Result<WordVectors> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields
            .next()
            .ok_or_else(|| Error::format(path, lineno, "empty record"))?;
        let mut vec = Vec::new();
        for field in fields {
            let v: f64 = field.parse().map_err(|_| {
                Error::format(path, lineno, format!("non-numeric field '{}'", field))
            })?;
            vec.push(v);
        }
        match dim {
            None => {
                if vec.is_empty() {
                    return Err(Error::format(path, lineno, "record has no components"));
                }
                dim = Some(vec.len());
            }
            Some(d) => {
                if vec.len() != d {
                    return Err(Error::format(
                        path,
                        lineno,
                        format!("expected {} components, got {}", d, vec.len()),
                    ));
                }
            }
        }
        entries.push((token.to_string(), vec));
    }
    if entries.is_empty() {
        return Err(Error::format(path, 0, "empty word-vector file"));
    }
    WordVectors::from_entries(entries)
}

/// Lowercase, split on whitespace, strip leading/trailing punctuation, drop
/// empty fragments, truncate to `max_words`. Interior punctuation (hyphens,
/// apostrophes) is kept.
pub fn tokenize(text: &str, max_words: usize) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .take(max_words)
        .collect()
}

/// What to do with tokens missing from the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OovPolicy {
    /// Remove the token and count it.
    Drop,
    /// Substitute the vocabulary mean vector.
    Mean,
}

/// Result of embedding a token sequence: the M×dim matrix, the tokens that
/// produced its rows, and how many were dropped.
#[derive(Debug, Clone)]
pub struct EmbeddedTokens {
    pub matrix: Tensor,
    pub retained: Vec<String>,
    pub dropped: usize,
}

/// Map tokens to a row-per-token matrix under the given OOV policy.
pub fn embed_tokens(
    class_id: &str,
    tokens: &[String],
    wv: &WordVectors,
    policy: OovPolicy,
) -> Result<EmbeddedTokens> {
    let mut rows: Vec<f64> = Vec::new();
    let mut retained = Vec::new();
    let mut dropped = 0usize;
    for token in tokens {
        match (wv.get(token), policy) {
            (Some(vec), _) => {
                rows.extend_from_slice(vec);
                retained.push(token.clone());
            }
            (None, OovPolicy::Mean) => {
                rows.extend_from_slice(wv.mean_vector());
                retained.push(token.clone());
            }
            (None, OovPolicy::Drop) => dropped += 1,
        }
    }
    if retained.is_empty() {
        return Err(Error::Protocol(format!(
            "document for class '{}' is empty after OOV handling",
            class_id
        )));
    }
    let matrix = Tensor::matrix(retained.len(), wv.dim(), rows);
    Ok(EmbeddedTokens {
        matrix,
        retained,
        dropped,
    })
}
