use super::{Embedder, EmbeddingVector, ProviderError, ProviderErrorKind, ProviderIdentity};

pub const HASH_EMBEDDING_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic bag-of-words embedder: every token adds 1.0 to bucket
/// `fnv1a64(token) % dim`. Identical texts embed identically; texts whose
/// tokens land in disjoint buckets are orthogonal.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    identity: ProviderIdentity,
    dim: usize,
}

impl HashEmbedder {
    pub fn new() -> Self {
        Self::with_dim(HASH_EMBEDDING_DIM)
    }

    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            identity: ProviderIdentity::scripted(format!("hash-bag-{dim}")),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0; self.dim];
        for token in tokenize(text) {
            let bucket = (fnv1a64(token.as_bytes()) % self.dim as u64) as usize;
            values[bucket] += 1.0;
        }
        EmbeddingVector::new(values, self.identity.model_id.clone())
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl Embedder for HashEmbedder {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(ProviderError::new(
                ProviderErrorKind::Refusal,
                "embed requires a non-empty list of non-empty texts",
            ));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
