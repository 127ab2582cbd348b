//! Ports to swappable backends: embeddings, probability classifiers, the
//! response-probability predictor, and chat-completion models.
//!
//! Live adapters (HTTP classifiers, hosted LLMs) implement these traits
//! outside the core crate; the stubs here are deterministic so the whole
//! pipeline runs and tests offline.

use serde::{Deserialize, Serialize};

use crate::ontology::ConceptCode;
use crate::text::{tokenize, word_count};

/// Failure surfaced by any port implementation.
#[derive(Debug, thiserror::Error)]
#[error("{port} port: {message}")]
pub struct PortError {
    pub port: &'static str,
    pub message: String,
}

impl PortError {
    pub fn new(port: &'static str, message: impl Into<String>) -> Self {
        PortError {
            port,
            message: message.into(),
        }
    }
}

/// Deterministic text embedding: equal inputs must embed to equal vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;

    fn dimension(&self) -> usize;
}

/// Turn-level probability classifier (depression score, toxicity score).
pub trait ProbabilityClassifier: Send + Sync {
    /// Must return a value in `[0, 1]`.
    fn score(&self, text: &str) -> Result<f64, PortError>;
}

/// Predicts the probability of response to the target antidepressant for
/// a set of profile concepts.
pub trait ResponsePredictor {
    fn predict(
        &self,
        concepts: &[ConceptCode],
        outcome: &ConceptCode,
    ) -> Result<f64, PortError>;
}

/// One message in a chat exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    User,
    Assistant,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Minimal chat-completion contract: system prompt plus alternating
/// history in, text out.
pub trait ChatPort: Send + Sync {
    fn request(&self, system: &str, messages: &[ChatMessage]) -> Result<String, PortError>;
}

// FNV-1a; the std hasher is not guaranteed stable across releases and the
// embedding stub must give the same vector forever.
fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = 0xcbf29ce484222325u64 ^ seed;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Offline embedding stub: character-trigram hashing into a fixed number
/// of signed buckets, unit-normalized. Deterministic per (seed, text).
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashEmbedder { dimension, seed }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(64, 0x70617473)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0f64; self.dimension];
        let normalized: String = tokenize(text)
            .into_iter()
            .map(|t| t.text)
            .collect::<Vec<_>>()
            .join(" ");
        let padded = format!(" {normalized} ");
        let chars: Vec<char> = padded.chars().collect();
        if chars.len() < 3 {
            return v;
        }
        for window in chars.windows(3) {
            let gram: String = window.iter().collect();
            let h = fnv1a(gram.as_bytes(), self.seed);
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

/// Offline classifier stub: logistic transform of keyword frequency.
///
/// `score = 1 / (1 + exp(-(steepness · freq + intercept)))` where `freq`
/// is keyword hits per word. With the default intercept a keyword-free
/// turn scores near zero.
#[derive(Debug, Clone)]
pub struct KeywordClassifier {
    keywords: Vec<String>,
    steepness: f64,
    intercept: f64,
}

impl KeywordClassifier {
    pub fn new(keywords: &[&str], steepness: f64, intercept: f64) -> Self {
        KeywordClassifier {
            keywords: keywords.iter().map(|k| k.to_lowercase()).collect(),
            steepness,
            intercept,
        }
    }

    /// Keyword list tuned to the depressive-language stub vocabulary.
    pub fn depression_stub() -> Self {
        KeywordClassifier::new(
            &[
                "hopeless", "empty", "tired", "exhausted", "barely", "numb", "worthless",
                "pointless", "alone",
            ],
            30.0,
            -6.0,
        )
    }

    /// Keyword list tuned to the hostile-language stub vocabulary.
    pub fn toxicity_stub() -> Self {
        KeywordClassifier::new(
            &["stupid", "dumb", "useless", "ridiculous", "waste", "idiotic", "pathetic"],
            30.0,
            -6.0,
        )
    }

    pub fn frequency(&self, text: &str) -> f64 {
        let words = word_count(text);
        if words == 0 {
            return 0.0;
        }
        let hits = tokenize(text)
            .iter()
            .filter(|t| self.keywords.iter().any(|k| k == &t.text))
            .count();
        hits as f64 / words as f64
    }
}

impl ProbabilityClassifier for KeywordClassifier {
    fn score(&self, text: &str) -> Result<f64, PortError> {
        let freq = self.frequency(text);
        let z = self.steepness * freq + self.intercept;
        Ok(1.0 / (1.0 + (-z).exp()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedder_is_deterministic_and_unit_norm() {
        let e = HashEmbedder::new(32, 7);
        let a = e.embed("generalized anxiety disorder");
        let b = e.embed("generalized anxiety disorder");
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn different_texts_embed_differently() {
        let e = HashEmbedder::default();
        assert_ne!(e.embed("fluoxetine"), e.embed("sertraline"));
    }

    #[test]
    fn empty_text_embeds_to_zero_vector() {
        let e = HashEmbedder::new(16, 1);
        assert!(e.embed("").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn keyword_classifier_rises_with_frequency() {
        let c = KeywordClassifier::depression_stub();
        let low = c.score("the weather is fine today").unwrap();
        let high = c.score("i feel hopeless and tired and empty").unwrap();
        assert!(low < 0.01);
        assert!(high > low);
        assert!((0.0..=1.0).contains(&low) && (0.0..=1.0).contains(&high));
    }

    #[test]
    fn classifier_matches_hand_computed_sigmoid() {
        let c = KeywordClassifier::new(&["bad"], 30.0, -6.0);
        // 1 hit over 4 words: z = 30·0.25 − 6 = 1.5.
        let expected = 1.0 / (1.0 + (-1.5f64).exp());
        let got = c.score("it was bad today").unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}
