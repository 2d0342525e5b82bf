//! Shared domain types and numeric primitives.
//!
//! Everything downstream speaks in these types. All real arithmetic is f64.
//! Constructors validate invariants once; operations then assume them, so a
//! value of one of these types is always well formed.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DepError, Result};

/// Index into a [`Vocab`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Part-of-speech class of a vocabulary entry. Exactly one per token.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosTag {
    Noun,
    Adj,
    Other,
}

/// Token inventory with part-of-speech tags.
///
/// Tokens are unique, non-empty, and contain no whitespace; the last point is
/// what makes the [`Prompt`] surface-form round trip sound.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    tags: Vec<PosTag>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(entries: Vec<(String, PosTag)>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(DepError::invalid("vocab", "needs at least 2 tokens"));
        }
        let mut tokens = Vec::with_capacity(entries.len());
        let mut tags = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (token, tag)) in entries.into_iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(DepError::invalid(
                    "vocab",
                    format!("token {i:?} is empty or contains whitespace: {token:?}"),
                ));
            }
            if index.insert(token.clone(), i).is_some() {
                return Err(DepError::invalid("vocab", format!("duplicate token {token:?}")));
            }
            tokens.push(token);
            tags.push(tag);
        }
        Ok(Vocab { tokens, tags, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface form of `id`. Panics on an out-of-range id, which cannot come
    /// from a validated `Prompt`.
    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.0]
    }

    pub fn tag(&self, id: TokenId) -> PosTag {
        self.tags[id.0]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied().map(TokenId)
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        id.0 < self.tokens.len()
    }

    /// Ids carrying `tag`, in id order.
    pub fn ids_tagged(&self, tag: PosTag) -> impl Iterator<Item = TokenId> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(move |(_, t)| **t == tag)
            .map(|(i, _)| TokenId(i))
    }
}

/// A tokenized prompt plus its surface form.
///
/// Invariants: non-empty, every id in range for the constructing vocab, and
/// the surface form re-tokenizes to exactly the same ids.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Prompt {
    ids: Vec<TokenId>,
    surface: String,
}

impl Prompt {
    pub fn from_ids(vocab: &Vocab, ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(DepError::invalid("prompt", "empty token sequence"));
        }
        if let Some(bad) = ids.iter().find(|id| !vocab.contains_id(**id)) {
            return Err(DepError::invalid(
                "prompt",
                format!("token id {bad} out of range for vocab of {}", vocab.len()),
            ));
        }
        let surface = ids
            .iter()
            .map(|id| vocab.token(*id))
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Prompt { ids, surface })
    }

    /// Tokenize `text` by whitespace against `vocab`.
    pub fn parse(vocab: &Vocab, text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match vocab.id(word) {
                Some(id) => ids.push(id),
                None => {
                    return Err(DepError::invalid(
                        "prompt",
                        format!("unknown token {word:?}"),
                    ))
                }
            }
        }
        Prompt::from_ids(vocab, ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn token_at(&self, position: usize) -> TokenId {
        self.ids[position]
    }

    /// Copy of this prompt with the token at `position` replaced.
    pub fn with_token(&self, vocab: &Vocab, position: usize, id: TokenId) -> Result<Self> {
        if position >= self.ids.len() {
            return Err(DepError::invalid(
                "prompt",
                format!("position {position} out of range for length {}", self.ids.len()),
            ));
        }
        let mut ids = self.ids.clone();
        ids[position] = id;
        Prompt::from_ids(vocab, ids)
    }

    /// First position whose token carries `tag`, with its id.
    pub fn first_tagged(&self, vocab: &Vocab, tag: PosTag) -> Option<(usize, TokenId)> {
        self.ids
            .iter()
            .enumerate()
            .find(|(_, id)| vocab.tag(**id) == tag)
            .map(|(i, id)| (i, *id))
    }

    /// All positions whose token carries `tag`.
    pub fn positions_tagged(&self, vocab: &Vocab, tag: PosTag) -> Vec<(usize, TokenId)> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, id)| vocab.tag(**id) == tag)
            .map(|(i, id)| (i, *id))
            .collect()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }
}

/// A grid of image patches, each a feature vector, with optional object
/// labels. Patches are stored row-major; patch `p` covers grid cell
/// `(p / width, p % width)`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    dim: usize,
    /// Patch-major features, `height * width * dim` values.
    features: Vec<f64>,
    labels: Vec<Option<String>>,
}

impl ImageGrid {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<Option<String>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(DepError::invalid("image grid", "zero height, width, or dim"));
        }
        let patches = height * width;
        if features.len() != patches * dim {
            return Err(DepError::invalid(
                "image grid",
                format!(
                    "feature length {} does not match {patches} patches x {dim} dims",
                    features.len()
                ),
            ));
        }
        if labels.len() != patches {
            return Err(DepError::invalid(
                "image grid",
                format!("label length {} does not match {patches} patches", labels.len()),
            ));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(DepError::invalid(
                "image grid",
                format!("non-finite feature value {bad}"),
            ));
        }
        Ok(ImageGrid {
            height,
            width,
            dim,
            features,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_count(&self) -> usize {
        self.height * self.width
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.features[p * self.dim..(p + 1) * self.dim]
    }

    pub fn label(&self, p: usize) -> Option<&str> {
        self.labels[p].as_deref()
    }

    pub fn labels(&self) -> &[Option<String>] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Same grid with `features` swapped out; shape and labels are kept.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        ImageGrid::new(
            self.height,
            self.width,
            self.dim,
            features,
            self.labels.clone(),
        )
    }
}

macro_rules! finite_vec_type {
    ($(#[$doc:meta])* $name:ident, $what:literal) => {
        $(#[$doc])*
        #[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if values.is_empty() {
                    return Err(DepError::invalid($what, "empty vector"));
                }
                if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                    return Err(DepError::invalid($what, format!("non-finite entry {bad}")));
                }
                Ok($name(values))
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }
    };
}

finite_vec_type!(
    /// Raw pre-softmax scores over the vocabulary. Finite, non-empty.
    LogitVector,
    "logit vector"
);

finite_vec_type!(
    /// A decoder hidden state. Finite, non-empty.
    HiddenVector,
    "hidden vector"
);

/// A normalized distribution over the vocabulary: entries in [0, 1], summing
/// to 1 within 1e-9.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DepError::invalid("probability vector", "empty vector"));
        }
        if let Some(bad) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(DepError::invalid(
                "probability vector",
                format!("entry {bad} outside [0, 1]"),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(DepError::invalid(
                "probability vector",
                format!("sums to {sum}, not 1"),
            ));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-patch attention weights for one decoding step, already normalized by
/// the model (post-softmax rows): non-negative and finite.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionMap(Vec<f64>);

impl AttentionMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DepError::invalid("attention map", "empty map"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(DepError::invalid(
                "attention map",
                format!("negative or non-finite entry {bad}"),
            ));
        }
        Ok(AttentionMap(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Numerically stable softmax: shifts by the max before exponentiating, then
/// normalizes by the accumulated sum.
pub fn softmax(logits: &LogitVector) -> ProbabilityVector {
    let values = logits.values();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbabilityVector(exps.into_iter().map(|e| e / sum).collect())
}

/// Greedy pick: the index of the largest logit, lowest index on ties.
pub fn argmax_token(logits: &LogitVector) -> TokenId {
    let mut best = 0;
    let values = logits.values();
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    TokenId(best)
}
