//! Tokenization, answer normalization and the hashed bag-of-tokens embedding.
//!
//! The embedding hash is part of the external-learner contract: any adapter
//! that computes embeddings on its side must reproduce it bit for bit.
//!
//! Algorithm (`hash_embed(text, dim)`):
//! 1. Split `text` on runs of Unicode whitespace.
//! 2. For each token, compute 64-bit FNV-1a over its UTF-8 bytes
//!    (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`).
//! 3. Bucket = `(h >> 1) % dim`; sign = `+1` if `h & 1 == 0`, else `-1`.
//! 4. Accumulate the signed counts as `f64`, then divide every entry by the
//!    Euclidean norm of the accumulated vector if that norm is nonzero.

use crate::types::EmbeddingVector;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Default embedding dimension.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Splits on runs of whitespace. Punctuation stays attached to its word.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Number of tokens `tokenize` would produce, without allocating.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Trim-only normalization; case and punctuation are significant.
pub fn normalize_answer(text: &str) -> &str {
    text.trim()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashed bag-of-tokens embedding of `text`. See the module docs for the
/// exact algorithm.
///
/// # Panics
/// Panics if `dim == 0`.
pub fn hash_embed(text: &str, dim: usize) -> EmbeddingVector {
    hash_embed_tokens(tokenize(text), dim)
}

/// Same as [`hash_embed`] over an explicit token sequence (used for the
/// unigram+bigram feature maps).
pub fn hash_embed_tokens<I, S>(tokens: I, dim: usize) -> EmbeddingVector
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    assert!(dim >= 1, "embedding dimension must be at least 1");
    let mut values = vec![0.0f64; dim];
    for tok in tokens {
        let h = fnv1a64(tok.as_ref().as_bytes());
        let idx = ((h >> 1) % dim as u64) as usize;
        if h & 1 == 0 {
            values[idx] += 1.0;
        } else {
            values[idx] -= 1.0;
        }
    }
    EmbeddingVector::normalized(values)
}
