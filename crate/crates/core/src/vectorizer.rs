//! Hashed bag-of-words featurization for subtask and skill text.
//!
//! Each field (description, keywords, context) is tokenized, every token is
//! salted with a field prefix (`d:`, `k:`, `c:`), and the salted token is
//! hashed into one of [`DIMENSION`] buckets with 64-bit FNV-1a:
//!
//! ```text
//! h = 0xcbf29ce484222325
//! for each byte b of the UTF-8 salted token:
//!     h = (h XOR b) * 0x100000001b3   (mod 2^64)
//! index = h mod D
//! ```
//!
//! Term frequencies accumulate per bucket and the result is L2-normalized.
//! There is no stop-word removal and no stemming.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of hash buckets used by [`embed`].
pub const DIMENSION: usize = 4096;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// A lowercase alphanumeric, non-empty token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercases `text` and splits it on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.to_lowercase()
        .split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit()))
        .filter(|s| !s.is_empty())
        .map(|s| Token(s.to_owned()))
        .collect()
}

/// Convenience for callers that only need the token strings.
pub fn token_strings(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.0).collect()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Bucket index of `token` salted with `prefix`.
pub fn bucket(prefix: &str, token: &Token, dimension: usize) -> usize {
    let mut salted = String::with_capacity(prefix.len() + token.0.len());
    salted.push_str(prefix);
    salted.push_str(&token.0);
    (fnv1a64(salted.as_bytes()) % dimension as u64) as usize
}

/// Sparse vector with strictly positive, finite weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dimension: usize,
    entries: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VectorError {
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("index {index} out of range for dimension {dimension}")]
    IndexOutOfRange { index: usize, dimension: usize },
    #[error("weight at index {index} must be finite and positive, got {weight}")]
    BadWeight { index: usize, weight: f64 },
}

impl FeatureVector {
    pub fn zero(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension, entries: BTreeMap::new() }
    }

    /// Builds a vector from explicit `(index, weight)` pairs. Repeated
    /// indices are summed.
    pub fn from_entries<I>(dimension: usize, entries: I) -> Result<Self, VectorError>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        if dimension == 0 {
            return Err(VectorError::ZeroDimension);
        }
        let mut map = BTreeMap::new();
        for (index, weight) in entries {
            if index >= dimension {
                return Err(VectorError::IndexOutOfRange { index, dimension });
            }
            if !weight.is_finite() || weight <= 0.0 {
                return Err(VectorError::BadWeight { index, weight });
            }
            *map.entry(index).or_insert(0.0) += weight;
        }
        Ok(Self { dimension, entries: map })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &BTreeMap<usize, f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.is_zero()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries.get(&index).copied().unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, VectorError> {
        Self::from_entries(self.dimension, self.entries.iter().map(|(&i, &w)| (i, w * factor)))
    }
}

/// Featurizes a description, a keyword list and free-text context into a
/// unit-length hashed vector (or the zero vector when every field is empty).
pub fn embed(description: &str, keywords: &[String], context: &str) -> FeatureVector {
    embed_with_dimension(description, keywords, context, DIMENSION)
}

pub fn embed_with_dimension(description: &str, keywords: &[String], context: &str, dimension: usize) -> FeatureVector {
    let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
    let mut add = |prefix: &str, tokens: Vec<Token>| {
        for t in &tokens {
            *tf.entry(bucket(prefix, t, dimension)).or_insert(0.0) += 1.0;
        }
    };
    add("d:", tokenize(description));
    add("k:", keywords.iter().flat_map(|k| tokenize(k)).collect());
    add("c:", tokenize(context));

    let norm = tf.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        return FeatureVector::zero(dimension);
    }
    let entries = tf.into_iter().map(|(i, w)| (i, w / norm)).collect();
    FeatureVector { dimension, entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(Token::as_str).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(strs(&tokenize("Move to the door!")), ["move", "to", "the", "door"]);
        assert!(tokenize("").is_empty());
        assert_eq!(strs(&tokenize("Pick_up box-2")), ["pick", "up", "box", "2"]);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_input_is_zero_vector() {
        let v = embed("", &[], "");
        assert!(v.is_zero());
        assert_eq!(v.dimension(), DIMENSION);
    }

    #[test]
    fn repeated_token_normalizes_to_one() {
        let v = embed("pick pick", &[], "");
        assert_eq!(v.len(), 1);
        let (&idx, &w) = v.entries().iter().next().unwrap();
        assert_eq!(w, 1.0);
        assert_eq!(idx, (fnv1a64(b"d:pick") % DIMENSION as u64) as usize);
    }

    #[test]
    fn fields_are_salted_apart() {
        let d = embed("gripper", &[], "");
        let k = embed("", &["gripper".into()], "");
        let c = embed("", &[], "gripper");
        let idx = |v: &FeatureVector| *v.entries().keys().next().unwrap();
        assert_ne!(idx(&d), idx(&k));
        assert_ne!(idx(&k), idx(&c));
        assert_ne!(idx(&d), idx(&c));
    }

    #[test]
    fn rejects_bad_entries() {
        assert_eq!(
            FeatureVector::from_entries(4, [(4, 1.0)]),
            Err(VectorError::IndexOutOfRange { index: 4, dimension: 4 })
        );
        assert!(matches!(FeatureVector::from_entries(4, [(1, 0.0)]), Err(VectorError::BadWeight { .. })));
        assert!(matches!(FeatureVector::from_entries(4, [(1, f64::NAN)]), Err(VectorError::BadWeight { .. })));
        assert_eq!(FeatureVector::from_entries(0, []), Err(VectorError::ZeroDimension));
    }

    #[test]
    fn fixture_corpus_collisions_are_bounded() {
        let raw = include_str!("../data/skills.json");
        let skills: Vec<serde_json::Value> = serde_json::from_str(raw).unwrap();
        let mut salted = std::collections::BTreeSet::new();
        for s in &skills {
            for t in tokenize(s["description"].as_str().unwrap()) {
                salted.insert(("d:", t));
            }
            for k in s["keywords"].as_array().unwrap() {
                for t in tokenize(k.as_str().unwrap()) {
                    salted.insert(("k:", t));
                }
            }
        }
        assert!(salted.len() <= 64, "fixture corpus grew to {}", salted.len());
        let mut buckets = std::collections::BTreeMap::<usize, usize>::new();
        for (p, t) in &salted {
            *buckets.entry(bucket(p, t, DIMENSION)).or_default() += 1;
        }
        let collisions: usize = buckets.values().map(|n| n - 1).sum();
        assert!(collisions <= 2, "{collisions} collisions over {} tokens", salted.len());
    }

    proptest! {
        #[test]
        fn tokens_are_lowercase_alnum(text in ".{0,64}") {
            for t in tokenize(&text) {
                prop_assert!(!t.as_str().is_empty());
                prop_assert!(t.as_str().chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()));
            }
        }

        #[test]
        fn embed_is_unit_or_zero(
            desc in "[a-zA-Z0-9 _-]{0,40}",
            kws in proptest::collection::vec("[a-z]{0,8}", 0..4),
            ctx in "[a-z ]{0,20}",
        ) {
            let v = embed(&desc, &kws, &ctx);
            let any_tokens = !tokenize(&desc).is_empty()
                || kws.iter().any(|k| !tokenize(k).is_empty())
                || !tokenize(&ctx).is_empty();
            if any_tokens {
                prop_assert!((v.norm() - 1.0).abs() < 1e-9);
            } else {
                prop_assert!(v.is_zero());
            }
            prop_assert!(v.entries().iter().all(|(&i, &w)| i < DIMENSION && w > 0.0 && w.is_finite()));
            prop_assert_eq!(v, embed(&desc, &kws, &ctx));
        }
    }
}
