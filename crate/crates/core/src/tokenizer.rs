//! Character-granularity tokenization and BERT-format vocabularies.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Ids of the reserved tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

/// Bijection between token strings and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    specials: SpecialIds,
}

impl Vocab {
    /// Builds a vocabulary where `tokens[i]` receives id `i`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let id_to_token: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if id_to_token.is_empty() {
            return Err(Error::EmptyVocab);
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::DuplicateToken {
                    token: tok.clone(),
                    line: i + 1,
                });
            }
        }
        let find = |name: &'static str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or(Error::MissingSpecial(name))
        };
        let specials = SpecialIds {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
        };
        Ok(Vocab {
            id_to_token,
            token_to_id,
            specials,
        })
    }

    /// Specials first, then every distinct token of `texts` in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for text in texts {
            for tok in tokenize(text).tokens {
                if seen.insert(tok.clone()) {
                    tokens.push(tok);
                }
            }
        }
        Vocab::from_tokens(tokens).expect("specials present and tokens deduplicated")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut lines: Vec<&str> = text.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        Vocab::from_tokens(lines.into_iter().map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(self.specials.unk)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let s = self.specials;
        id == s.pad || id == s.unk || id == s.cls || id == s.sep || id == s.mask
    }

    /// Ids eligible as random MLM replacements.
    pub fn non_special_ids(&self) -> Vec<u32> {
        (0..self.len() as u32)
            .filter(|&i| !self.is_special(i))
            .collect()
    }
}

/// Tokens plus the byte span each came from in the source text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source_span: Option<Vec<(usize, usize)>>,
}

impl TokenSequence {
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        TokenSequence {
            tokens: tokens.into_iter().map(Into::into).collect(),
            source_span: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// True for CJK Unified Ideographs, their extensions and compatibility block.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x323AF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

/// Splits text into one token per character. Whitespace separates and yields
/// nothing; ASCII letters are lowercased.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for (start, c) in text.char_indices() {
        if c.is_whitespace() {
            continue;
        }
        let c = if c.is_ascii_alphabetic() {
            c.to_ascii_lowercase()
        } else {
            c
        };
        tokens.push(c.to_string());
        spans.push((start, start + c.len_utf8()));
    }
    TokenSequence {
        tokens,
        source_span: Some(spans),
    }
}

/// Fixed-length model input: `[CLS] body [SEP] [PAD]…`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

/// `[CLS] ids [SEP]` without padding, truncating the body to fit `max_len`.
pub fn encode_unpadded(seq: &TokenSequence, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 3, "max_len must be at least 3");
    let s = vocab.specials();
    let body = seq.tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(s.cls);
    ids.extend(seq.tokens[..body].iter().map(|t| vocab.id_or_unk(t)));
    ids.push(s.sep);
    ids
}

/// Encodes to exactly `max_len` ids with an attention mask (1 = real token).
pub fn encode(seq: &TokenSequence, vocab: &Vocab, max_len: usize) -> Encoding {
    let mut ids = encode_unpadded(seq, vocab, max_len);
    let mut attention_mask = vec![1u8; ids.len()];
    ids.resize(max_len, vocab.specials().pad);
    attention_mask.resize(max_len, 0);
    Encoding {
        ids,
        attention_mask,
    }
}

/// Concatenates tokens, omitting special tokens.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::IdRange {
            id,
            size: vocab.len(),
        })?;
        if !vocab.is_special(id) {
            out.push_str(tok);
        }
    }
    Ok(out)
}
