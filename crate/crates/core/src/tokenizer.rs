//! Byte-level tokenization and lossless chunking.
//!
//! Ids 0, 1 and 2 are PAD, BOS and EOS; every other id is a byte value plus 3.
//! A token index is therefore a byte offset into the UTF-8 text, which is what
//! chunk spans use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BYTE_OFFSET: usize = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET;

pub const DEFAULT_DELIMITERS: [char; 3] = ['.', '。', '\n'];
pub const DEFAULT_WINDOW_TOKENS: usize = 32;

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize + BYTE_OFFSET).collect()
}

/// Inverse of [`tokenize`]. Reserved ids are skipped.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            PAD | BOS | EOS => {}
            _ if id < VOCAB_SIZE => bytes.push((id - BYTE_OFFSET) as u8),
            _ => return Err(Error::InvalidInput(format!("token id {id} outside vocabulary"))),
        }
    }
    Ok(String::from_utf8(bytes)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub original_index: usize,
    pub text: String,
    /// `[start, end)` token offsets into the tokenized document.
    pub token_span: (usize, usize),
}

impl Chunk {
    pub fn token_len(&self) -> usize {
        self.token_span.1 - self.token_span.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChunkingStrategy {
    Delimiter { delimiters: Vec<char> },
    Window { window_tokens: usize },
}

impl Default for ChunkingStrategy {
    fn default() -> Self {
        Self::Delimiter { delimiters: DEFAULT_DELIMITERS.to_vec() }
    }
}

impl ChunkingStrategy {
    pub fn window(window_tokens: usize) -> Result<Self> {
        let s = Self::Window { window_tokens };
        s.validate()?;
        Ok(s)
    }

    pub fn delimiters(delimiters: Vec<char>) -> Result<Self> {
        let s = Self::Delimiter { delimiters };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Delimiter { delimiters } if delimiters.is_empty() => {
                Err(Error::InvalidInput("delimiter set must not be empty".into()))
            }
            Self::Window { window_tokens: 0 } => Err(Error::InvalidInput("window_tokens must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// Characters that count as an existing boundary when joining chunks.
    pub fn boundary_chars(&self) -> &[char] {
        match self {
            Self::Delimiter { delimiters } => delimiters,
            Self::Window { .. } => &DEFAULT_DELIMITERS,
        }
    }
}

/// Splits `text` into a lossless, ordered partition.
///
/// Delimiter mode closes a chunk right after each delimiter; trailing text
/// without one becomes the final chunk. Window mode cuts every
/// `window_tokens` bytes, moving a cut forward to the next character boundary
/// when it would split a multi-byte character.
pub fn split_chunks(text: &str, strategy: &ChunkingStrategy) -> Vec<Chunk> {
    let mut cuts = Vec::new();
    match strategy {
        ChunkingStrategy::Delimiter { delimiters } => {
            for (i, c) in text.char_indices() {
                if delimiters.contains(&c) {
                    cuts.push(i + c.len_utf8());
                }
            }
            if cuts.last() != Some(&text.len()) && !text.is_empty() {
                cuts.push(text.len());
            }
        }
        ChunkingStrategy::Window { window_tokens } => {
            let w = (*window_tokens).max(1);
            let mut pos = 0;
            while pos < text.len() {
                let mut end = (pos + w).min(text.len());
                while !text.is_char_boundary(end) {
                    end += 1;
                }
                cuts.push(end);
                pos = end;
            }
        }
    }
    let mut start = 0;
    cuts.into_iter()
        .enumerate()
        .map(|(i, end)| {
            let chunk = Chunk { original_index: i, text: text[start..end].to_string(), token_span: (start, end) };
            start = end;
            chunk
        })
        .collect()
}

/// Joins retained chunks in original order with the default boundary set.
pub fn join_chunks(chunks: &[Chunk], retained: &[usize]) -> Result<String> {
    join_chunks_with(chunks, retained, &DEFAULT_DELIMITERS)
}

/// Joins retained chunks in original order. Adjacent chunks are concatenated
/// as-is; across a gap a single space is inserted unless either side of the
/// seam is already whitespace or a boundary character.
pub fn join_chunks_with(chunks: &[Chunk], retained: &[usize], boundary: &[char]) -> Result<String> {
    check_retained(retained, chunks.len())?;
    let mut out = String::new();
    let mut prev: Option<usize> = None;
    for &i in retained {
        let text = &chunks[i].text;
        if let Some(p) = prev {
            if i != p + 1 && needs_separator(&out, text, boundary) {
                out.push(' ');
            }
        }
        out.push_str(text);
        prev = Some(i);
    }
    Ok(out)
}

pub(crate) fn check_retained(retained: &[usize], n: usize) -> Result<()> {
    for w in retained.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidInput(format!("retained indices must be strictly ascending, got {retained:?}")));
        }
    }
    if let Some(&last) = retained.last() {
        if last >= n {
            return Err(Error::InvalidInput(format!("retained index {last} out of range for {n} chunks")));
        }
    }
    Ok(())
}

fn needs_separator(left: &str, right: &str, boundary: &[char]) -> bool {
    let is_boundary = |c: char| c.is_whitespace() || boundary.contains(&c);
    match (left.chars().next_back(), right.chars().next()) {
        (Some(l), Some(r)) => !is_boundary(l) && !is_boundary(r),
        _ => false,
    }
}
