//! Data embeddings: a fixed random linear projection standing in for a
//! pretrained feature extractor, and the per-client mean embedding that
//! gets uploaded next to model parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::CoreError;
use crate::learner::ClientDataset;
use crate::scalar::Scalar;

/// A point in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Euclidean distance. Dimensions must match; callers validate.
    pub fn distance(&self, other: &Self) -> T {
        assert_eq!(self.values.len(), other.values.len(), "embedding dims");
        let mut acc = T::zero();
        for (a, b) in self.values.iter().zip(&other.values) {
            let d = *a - *b;
            acc += d * d;
        }
        acc.sqrt()
    }
}

/// Deterministic linear projection from input space to embedding space.
/// Entries are drawn once from a seeded standard normal; the same
/// (dims, seed) triple always yields the same matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor<T> {
    embed_dim: usize,
    input_dim: usize,
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> Extractor<T> {
    pub fn new(embed_dim: usize, input_dim: usize, seed: u64) -> Result<Self, CoreError> {
        if embed_dim == 0 || input_dim == 0 {
            return Err(CoreError::InvalidConfig(
                "extractor dims must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..embed_dim)
            .map(|_| {
                (0..input_dim)
                    .map(|_| T::from_real(rng.sample(StandardNormal)))
                    .collect()
            })
            .collect();
        Ok(Extractor {
            embed_dim,
            input_dim,
            rows,
        })
    }

    /// Identity projection, handy in tests where embeddings should equal
    /// raw inputs.
    pub fn identity(dim: usize) -> Self {
        let rows = (0..dim)
            .map(|e| {
                (0..dim)
                    .map(|i| if i == e { T::one() } else { T::zero() })
                    .collect()
            })
            .collect();
        Extractor {
            embed_dim: dim,
            input_dim: dim,
            rows,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed(&self, input: &[T]) -> Result<EmbeddingVector<T>, CoreError> {
        if input.len() != self.input_dim {
            return Err(CoreError::DimMismatch {
                what: "embed input",
                expected: self.input_dim,
                got: input.len(),
            });
        }
        let values = self
            .rows
            .iter()
            .map(|row| {
                let mut acc = T::zero();
                for (w, x) in row.iter().zip(input) {
                    acc += *w * *x;
                }
                acc
            })
            .collect();
        Ok(EmbeddingVector::new(values))
    }

    /// Arithmetic mean of the per-example embeddings, i.e. the vector a
    /// client uploads each round.
    pub fn mean_embedding(&self, data: &ClientDataset<T>) -> Result<EmbeddingVector<T>, CoreError> {
        if data.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        let mut acc = vec![T::zero(); self.embed_dim];
        for x in &data.inputs {
            let e = self.embed(x)?;
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += *v;
            }
        }
        let n = T::from_real(data.len() as f64);
        for a in acc.iter_mut() {
            *a /= n;
        }
        Ok(EmbeddingVector::new(acc))
    }
}
