//! Word-level tokenizer with a corpus-built vocabulary.
//!
//! Text is lowercased and split on whitespace; punctuation becomes its own
//! single-character token. Multi-turn inputs are laid out as
//! `[CLS] turn1 [SEP] turn2 [SEP] ... [SEP]` and padded (or front-truncated)
//! to a fixed length, so the newest turn — the one being classified — always
//! survives truncation.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Reserved token names, in id order.
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Immutable token <-> id bijection with the four reserved ids at 0..4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token_to_id.insert(token.clone(), id as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate token {token:?} in vocabulary"
                )));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// Total number of entries, reserved ids included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Writes one token per line in id order; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for token in &self.id_to_token {
            writeln!(file, "{token}")?;
        }
        Ok(())
    }

    /// Reads a vocabulary file written by [`Vocabulary::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty vocabulary line".into(),
                });
            }
            tokens.push(line);
        }
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(Error::Parse {
                line: tokens.len(),
                msg: "vocabulary file is missing the reserved tokens".into(),
            });
        }
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *reserved {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {reserved}, found {:?}", tokens[i]),
                });
            }
        }
        Self::from_tokens(tokens)
    }
}

/// A fixed-length encoded input: ids padded to `max_len` with a matching
/// 0/1 attention mask that is 1 exactly on the first `true_length` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub true_length: usize,
}

/// Lowercases and splits text into word and single-character punctuation
/// tokens. Whitespace only separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Builds a vocabulary from a corpus: tokens with frequency >= `min_freq`,
/// ranked by (frequency desc, token asc), truncated to `max_size - 4` after
/// the reserved four. An empty corpus yields the reserved tokens only.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if max_size <= RESERVED_TOKENS.len() {
        return Err(Error::InvalidArgument(format!(
            "vocabulary max_size must exceed {}, got {max_size}",
            RESERVED_TOKENS.len()
        )));
    }
    if min_freq < 1 {
        return Err(Error::InvalidArgument("min_freq must be >= 1".into()));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for token in tokenize(text.as_ref()) {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> =
        freq.into_iter().filter(|(_, n)| *n >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED_TOKENS.len());

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// Encodes a list of turns (oldest first) as
/// `[CLS] t1 [SEP] t2 [SEP] ... [SEP]`, padded to exactly `max_len`.
///
/// When the layout overflows, the oldest body tokens are dropped first and
/// the trailing end — the current turn and its final `[SEP]` — is kept, so
/// position 0 is always `[CLS]` and the last real position is always `[SEP]`.
/// Unknown tokens map to `[UNK]`; an empty turn list encodes as `[CLS] [SEP]`.
pub fn encode<S: AsRef<str>>(turns: &[S], vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be >= 2 to hold [CLS] and [SEP], got {max_len}"
        )));
    }
    // Body: every turn's tokens followed by its [SEP]; zero turns still get one [SEP].
    let mut body: Vec<u32> = Vec::new();
    if turns.is_empty() {
        body.push(SEP_ID);
    }
    for turn in turns {
        for token in tokenize(turn.as_ref()) {
            body.push(vocab.id_of(&token).unwrap_or(UNK_ID));
        }
        body.push(SEP_ID);
    }
    if body.len() > max_len - 1 {
        body.drain(..body.len() - (max_len - 1));
    }

    let true_length = 1 + body.len();
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(body);
    ids.resize(max_len, PAD_ID);

    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..true_length].fill(1);
    Ok(TokenSequence {
        ids,
        attention_mask,
        true_length,
    })
}

/// Maps ids back to token strings; reserved ids render as their bracketed
/// names. Debugging aid.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter()
        .map(|&id| {
            vocab
                .token_of(id)
                .map(str::to_string)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "token id {id} out of range for vocabulary of size {}",
                        vocab.size()
                    ))
                })
        })
        .collect()
}
