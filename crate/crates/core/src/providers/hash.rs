use super::{l2_normalize, EmbeddingProvider, ProviderError};

/// Feature-hashed bag-of-words embedding.
///
/// Tokens are lowercased alphanumeric runs; each lands in one bucket with a
/// sign taken from an independent hash. Empty input maps to the first basis
/// vector so every output is unit-norm.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for token in tokenize(text) {
            let bucket = (fnv1a(token.as_bytes(), BUCKET_SEED) % self.dim as u64) as usize;
            let sign = if fnv1a(token.as_bytes(), SIGN_SEED) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            v[bucket] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        } else {
            l2_normalize(&mut v);
        }
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn dimension(&self) -> usize {
        self.dim
    }
}

const BUCKET_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const SIGN_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = seed;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche so nearby seeds decorrelate
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::cosine;

    #[test]
    fn unit_norm_and_deterministic() {
        let e = HashEmbedder::new(256);
        for t in ["", "alpha", "database migration postgres plan", "Ünïcode wörds"] {
            let v = e.embed_text(t);
            let norm: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "{t}: {norm}");
            assert_eq!(v, e.embed_text(t));
        }
        assert_eq!(e.embed_text("")[0], 1.0);
    }

    #[test]
    fn order_invariant() {
        let e = HashEmbedder::new(256);
        let c = cosine(&e.embed_text("alpha beta"), &e.embed_text("beta alpha"));
        assert!((c - 1.0).abs() < 1e-9);
    }
}
