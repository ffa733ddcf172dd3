//! WordPiece tokenization and fixed-length encoding.
//!
//! Text is lowercased (by default), split on whitespace, and every
//! non-alphanumeric character is split off as its own word. Each word is then
//! decomposed greedily: the longest vocabulary prefix, followed by the longest
//! `##`-prefixed continuation of what remains, and so on. A word with any
//! unmatched remainder becomes `[UNK]` as a whole.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const CONTINUATION: &str = "##";

/// Words longer than this many characters map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// Default fixed sequence length.
pub const DEFAULT_MAX_LEN: usize = 192;

/// Bijective token ↔ id mapping with the five special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl Vocab {
    /// Builds a vocabulary where the position in `tokens` is the id.
    /// `[PAD]` must sit at id 0.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocab(format!("empty token at line {}", i + 1)));
            }
            if let Some(prev) = index.insert(tok.clone(), i as u32) {
                return Err(Error::Vocab(format!(
                    "duplicate token {tok:?} on lines {} and {}",
                    prev + 1,
                    i + 1
                )));
            }
        }
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token {name}")))
        };
        let pad = find(PAD)?;
        if pad != 0 {
            return Err(Error::Vocab(format!("{PAD} must have id 0, found at id {pad}")));
        }
        let (unk, cls, sep, mask) = (find(UNK)?, find(CLS)?, find(SEP)?, find(MASK)?);
        Ok(Vocab {
            tokens,
            index,
            unk,
            cls,
            sep,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn special_ids(&self) -> [u32; 5] {
        [0, self.unk, self.cls, self.sep, self.mask]
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special_ids().contains(&id)
    }

    /// Ids of every non-special token, in id order.
    pub fn ordinary_ids(&self) -> Vec<u32> {
        (0..self.tokens.len() as u32).filter(|&i| !self.is_special(i)).collect()
    }

    /// Serialized file form: one token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')))
    }
}

/// Reads a vocabulary file: UTF-8, one token per line, zero-based line index = id.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    Vocab::from_text(&text).map_err(|e| match e {
        Error::Vocab(msg) => Error::Vocab(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Fixed-length encoded sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
    /// Real tokens (including `[CLS]`/`[SEP]`) before padding.
    pub original_length: usize,
}

impl TokenizedSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn real_len(&self) -> usize {
        self.original_length
    }

    /// Returns a copy padded with extra `[PAD]` columns up to `max_len`.
    pub fn padded_to(&self, max_len: usize) -> Self {
        let mut out = self.clone();
        if max_len > out.ids.len() {
            out.ids.resize(max_len, 0);
            out.attention_mask.resize(max_len, 0);
            out.segment_ids.resize(max_len, 0);
        }
        out
    }
}

/// Splits on whitespace, then peels every non-alphanumeric character off as
/// its own word.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if !c.is_alphanumeric() {
                if start < i {
                    words.push(&chunk[start..i]);
                }
                words.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            words.push(&chunk[start..]);
        }
    }
    words
}

fn wordpiece_word(word: &str, vocab: &Vocab, out: &mut Vec<String>) {
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    if bounds.len() - 1 > MAX_WORD_CHARS {
        out.push(UNK.to_string());
        return;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < bounds.len() - 1 {
        let mut matched = None;
        for end in (start + 1..bounds.len()).rev() {
            let sub = &word[bounds[start]..bounds[end]];
            let candidate = if start == 0 {
                sub.to_string()
            } else {
                format!("{CONTINUATION}{sub}")
            };
            if vocab.id(&candidate).is_some() {
                matched = Some((candidate, end));
                break;
            }
        }
        match matched {
            Some((piece, end)) => {
                pieces.push(piece);
                start = end;
            }
            None => {
                out.push(UNK.to_string());
                return;
            }
        }
    }
    out.extend(pieces);
}

/// Greedy longest-match WordPiece tokenization.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab, lowercase: bool) -> Vec<String> {
    let normalized;
    let text = if lowercase {
        normalized = text.to_lowercase();
        normalized.as_str()
    } else {
        text
    };
    let mut out = Vec::new();
    for word in pre_tokenize(text) {
        wordpiece_word(word, vocab, &mut out);
    }
    out
}

fn to_ids(tokens: &[String], vocab: &Vocab) -> Vec<u32> {
    tokens
        .iter()
        .map(|t| vocab.id(t).unwrap_or(vocab.unk_id()))
        .collect()
}

fn finish(mut ids: Vec<u32>, mut segment_ids: Vec<u8>, max_len: usize) -> TokenizedSequence {
    let original_length = ids.len();
    let mut attention_mask = vec![1u8; original_length];
    ids.resize(max_len, 0);
    attention_mask.resize(max_len, 0);
    segment_ids.resize(max_len, 0);
    TokenizedSequence {
        ids,
        attention_mask,
        segment_ids,
        original_length,
    }
}

/// `[CLS] tokens [SEP]`, tail-truncated to `max_len - 2` tokens and padded
/// with `[PAD]`. Lowercases the input.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedSequence> {
    encode_with_case(text, vocab, max_len, true)
}

pub fn encode_with_case(
    text: &str,
    vocab: &Vocab,
    max_len: usize,
    lowercase: bool,
) -> Result<TokenizedSequence> {
    let tokens = wordpiece_tokenize(text, vocab, lowercase);
    encode_ids(&to_ids(&tokens, vocab), vocab, max_len)
}

/// Single-segment encoding from already-tokenized ids.
pub fn encode_ids(token_ids: &[u32], vocab: &Vocab, max_len: usize) -> Result<TokenizedSequence> {
    if max_len < 3 {
        return Err(crate::error::invalid(format!("max_len must be at least 3, got {max_len}")));
    }
    let keep = token_ids.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(&token_ids[..keep]);
    ids.push(vocab.sep_id());
    Ok(finish(ids, Vec::new(), max_len))
}

/// `[CLS] a [SEP] b [SEP]` with segment ids 0 then 1. When the pair does not
/// fit, the longer segment loses its last token until it does.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedSequence> {
    let ta = to_ids(&wordpiece_tokenize(a, vocab, true), vocab);
    let tb = to_ids(&wordpiece_tokenize(b, vocab, true), vocab);
    encode_pair_ids(&ta, &tb, vocab, max_len)
}

pub fn encode_pair_ids(
    a: &[u32],
    b: &[u32],
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenizedSequence> {
    if max_len < 5 {
        return Err(crate::error::invalid(format!(
            "max_len must be at least 5 for pairs, got {max_len}"
        )));
    }
    let budget = max_len - 3;
    let (mut la, mut lb) = (a.len(), b.len());
    while la + lb > budget {
        if la > lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    ids.extend_from_slice(&a[..la]);
    ids.push(vocab.sep_id());
    let first = ids.len();
    ids.extend_from_slice(&b[..lb]);
    ids.push(vocab.sep_id());
    let mut segments = vec![0u8; first];
    segments.resize(ids.len(), 1);
    Ok(finish(ids, segments, max_len))
}

/// Display form: drops `[PAD]`, `[CLS]` and `[SEP]`, glues `##` pieces onto
/// the preceding token and joins the rest with single spaces.
pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == vocab.pad_id() || id == vocab.cls_id() || id == vocab.sep_id() {
            continue;
        }
        let tok = vocab.token(id).unwrap_or(UNK);
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !rest.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    out
}
