use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MovaError, Result};
use crate::seed;

const TEXT_STREAM: u64 = 0x7E47;

/// Instruction embedding shared by every adapter block.
#[derive(Debug, Clone, PartialEq)]
pub struct TextToken(Vec<f64>);

impl TextToken {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(MovaError::Numeric {
                context: "text token".into(),
                index,
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Anything that can turn an instruction into a fixed-width token.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, question: &str) -> TextToken;
}

/// Bag-of-words hash embedder: each whitespace token maps to a seeded unit
/// vector; the mean is rescaled to unit norm. The empty string maps to zero.
#[derive(Debug, Clone, Copy)]
pub struct HashTextEncoder {
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "text dimension must be positive");
        Self { dim }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = seed::rng(&[TEXT_STREAM, seed::hash_str(word)]);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        v
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().fold(0.0, |a, x| a + x * x).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, question: &str) -> TextToken {
        let mut acc = vec![0.0; self.dim];
        let mut count = 0usize;
        for word in question.split_whitespace() {
            for (a, w) in acc.iter_mut().zip(self.word_vector(word)) {
                *a += w;
            }
            count += 1;
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
            normalize(&mut acc);
        }
        TextToken(acc)
    }
}

pub fn encode_text(question: &str, text_dim: usize) -> TextToken {
    HashTextEncoder::new(text_dim).encode(question)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = encode_text("read the chart values", 16);
        assert_eq!(a, encode_text("read the chart values", 16));
        let n: f64 = a.values().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(encode_text("", 8).values(), &[0.0; 8]);
        assert_eq!(encode_text("   ", 8).values(), &[0.0; 8]);
    }

    #[test]
    fn distinct_questions_differ() {
        let a = encode_text("locate the red sign", 8);
        let b = encode_text("read the chart values", 8);
        assert!(cosine(a.values(), b.values()) < 0.99);
    }
}
