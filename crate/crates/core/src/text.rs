//! Caption tokenization, vocabulary construction and id encoding.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<sos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 30;

const DETACHED: [char; 8] = ['.', ',', '!', '?', ';', ':', '"', '\''];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("invalid vocabulary file: {0}")]
    InvalidVocab(String),
    #[error("vocabulary i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Lowercases, splits on whitespace and detaches `. , ! ? ; : " '` as separate tokens.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in raw.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if DETACHED.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Bijection between tokens and ids. Ids 0..4 are PAD, SOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    min_count: usize,
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = TextError;

    fn try_from(file: VocabFile) -> Result<Self, TextError> {
        Self::from_tokens(file.tokens, file.min_count)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            min_count: v.min_count,
            tokens: v.corpus_tokens().to_vec(),
        }
    }
}

impl Vocabulary {
    /// Builds from corpus tokens listed in id order (starting at id 4).
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self, TextError> {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for (i, tok) in id_to_token.iter().enumerate() {
            token_to_id.insert(tok.clone(), i as TokenId);
        }
        for tok in tokens {
            if tok.is_empty() {
                return Err(TextError::InvalidVocab("empty token".into()));
            }
            let id = id_to_token.len() as TokenId;
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(TextError::InvalidVocab(format!("duplicate token {tok:?}")));
            }
            id_to_token.push(tok);
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Corpus tokens in id order, without the specials.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIAL..]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TextError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Builds a vocabulary from tokenized training captions.
///
/// Tokens are ordered by descending count, then ascending lexicographically,
/// and dropped when they occur fewer than `min_count` times.
pub fn build_vocab(captions: &[Vec<String>], min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in captions.iter().flatten() {
        *counts.entry(tok.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(tok, c)| *c >= min_count && !SPECIAL_TOKENS.contains(tok) && !tok.is_empty())
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = kept.into_iter().map(|(t, _)| t.to_string()).collect();
    Vocabulary::from_tokens(tokens, min_count).expect("unique by construction")
}

/// Id sequence beginning with SOS and ending with EOS unless cut at `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub max_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Ids between SOS and the terminating EOS.
    pub fn content(&self) -> &[TokenId] {
        let start = usize::from(self.ids.first() == Some(&SOS));
        let end = self.ids.iter().position(|&i| i == EOS).unwrap_or(self.ids.len());
        &self.ids[start..end.max(start)]
    }
}

/// `SOS + ids + EOS`, truncated to at most `max_len` ids while keeping the final EOS.
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(SOS);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id(t).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSequence { ids, max_len }
}

/// Joins non-special tokens with single spaces, stopping at the first EOS.
pub fn decode(ids: &[TokenId], vocab: &Vocabulary) -> Result<String, TextError> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(TextError::IdOutOfRange {
            id,
            size: vocab.len(),
        })?;
        if id == EOS {
            break;
        }
        if (id as usize) >= NUM_SPECIAL {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
