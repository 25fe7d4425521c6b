//! Word vectors and the type-phrase embedding matrix.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::TypeVocabulary;
use crate::error::{Error, Result};
use crate::rng;

/// Standard deviation for random type rows.
pub const RANDOM_INIT_STD: f64 = 0.02;
/// Width of random type embeddings when no word vectors are given.
pub const DEFAULT_RANDOM_DIM: usize = 300;

/// Pretrained word vectors in the whitespace-separated GloVe text layout.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
}

impl WordVectorTable {
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        if dim == 0 {
            return Err(Error::Dimension("word vectors need dimension > 0".into()));
        }
        let mut index = HashMap::new();
        let mut flat = Vec::new();
        for (word, v) in entries {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "vector for `{word}` has {} entries, expected {dim}",
                    v.len()
                )));
            }
            // Later duplicates are ignored, as GloVe readers usually do.
            if index.contains_key(&word) {
                continue;
            }
            index.insert(word, index.len());
            flat.extend(v);
        }
        let vectors = Array2::from_shape_vec((index.len(), dim), flat).expect("shape checked");
        Ok(WordVectorTable { dim, index, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Verbatim lookup first, then lowercased.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        let row = self
            .index
            .get(word)
            .or_else(|| self.index.get(&word.to_lowercase()))?;
        Some(self.vectors.row(*row).to_slice().expect("row-major"))
    }
}

/// Parses a GloVe-style text file. The dimension is taken from the first line.
pub fn load_word_vectors(path: &Path) -> Result<WordVectorTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dim = None;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|e| parse_err(format!("bad number `{p}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let d = *dim.get_or_insert(values.len());
        if d == 0 || values.len() != d {
            return Err(parse_err(format!(
                "expected {d} components, found {}",
                values.len()
            )));
        }
        entries.push((word.to_owned(), values));
    }
    let dim = dim.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "empty word-vector file, dimension unknown".into(),
    })?;
    WordVectorTable::from_entries(dim, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Pretrained,
    Random,
}

/// N x D matrix whose row j embeds type phrase j.
#[derive(Debug, Clone)]
pub struct TypeEmbeddingMatrix {
    pub matrix: Array2<f64>,
    pub source: EmbeddingSource,
    /// Rows that fell back to random init because none of their words had a vector.
    pub fallback_rows: usize,
}

/// Row j is the mean of the vectors of phrase j's words. Phrases with no
/// known word get a random row drawn from the `embedding-fallback` stream.
pub fn embed_types(vocab: &TypeVocabulary, words: &WordVectorTable, seed: u64) -> TypeEmbeddingMatrix {
    let dim = words.dim();
    let mut matrix = Array2::zeros((vocab.len(), dim));
    let mut rng = rng::substream(seed, rng::FALLBACK);
    let normal = Normal::new(0.0, RANDOM_INIT_STD).expect("valid std");
    let mut fallback_rows = 0;
    for (j, mut row) in matrix.rows_mut().into_iter().enumerate() {
        let found: Vec<&[f64]> = vocab.words(j).into_iter().filter_map(|w| words.get(w)).collect();
        if found.is_empty() {
            fallback_rows += 1;
            warn!("no word vector for any word of type `{}`; using random row", vocab.phrases()[j]);
            row.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            continue;
        }
        let out = row.as_slice_mut().expect("row-major");
        for v in &found {
            crate::math::axpy(out, 1.0, v);
        }
        let k = found.len() as f64;
        out.iter_mut().for_each(|x| *x /= k);
    }
    TypeEmbeddingMatrix {
        matrix,
        source: EmbeddingSource::Pretrained,
        fallback_rows,
    }
}

/// i.i.d. N(0, 0.02^2) rows.
pub fn random_type_embeddings(n_types: usize, dim: usize, seed: u64) -> Result<TypeEmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::Dimension("embedding dimension must be positive".into()));
    }
    let mut rng = rng::substream(seed, rng::INIT);
    Ok(TypeEmbeddingMatrix {
        matrix: gaussian_matrix(&mut rng, n_types, dim, RANDOM_INIT_STD),
        source: EmbeddingSource::Random,
        fallback_rows: 0,
    })
}

pub(crate) fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}
