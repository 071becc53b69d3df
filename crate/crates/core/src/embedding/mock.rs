use super::{Embedder, ProviderError, EMBEDDING_DIM};
use crate::text::tokenize;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Deterministic signed feature-hashing embedder.
///
/// Each lowercase alphanumeric token adds ±1 at bucket `h mod 1024`, where
/// `h` is the token's FNV-1a hash and the sign comes from bit 63. The result
/// is L2-normalised; a text with no tokens maps to `e₀`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder;

impl MockEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; EMBEDDING_DIM];
        let mut any = false;
        for tok in tokenize(text) {
            let h = fnv1a64(tok.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[(h % EMBEDDING_DIM as u64) as usize] += sign;
            any = true;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !any || norm == 0.0 {
            // Tokens whose contributions cancel out land here as well.
            let mut e0 = vec![0.0f32; EMBEDDING_DIM];
            e0[0] = 1.0;
            return e0;
        }
        acc.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl Embedder for MockEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
