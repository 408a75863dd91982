//! Character-plus-keyword vocabulary.
//!
//! Ids 0..5 are specials, the next 95 ids cover printable ASCII, and the rest
//! are keywords: every word of the fixed dataset phrases plus a few whole
//! phrases. Encoding is greedy longest-keyword-match at word starts, falling
//! back to single characters.

use std::collections::HashMap;

use crate::dataqa::{self, CommandLabel};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];
const FIRST_CHAR: usize = 5;
const N_CHARS: usize = 95;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    size: usize,
    tokens: Vec<String>,
    keywords: HashMap<String, usize>,
    max_keyword_len: usize,
}

fn is_word_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'-'
}

impl Vocabulary {
    /// Build the vocabulary over the dataset phrases; `size` is the logits
    /// width and must cover every assigned id.
    pub fn build(size: usize) -> Result<Self> {
        let phrases = dataqa::fixed_phrases();
        let mut words: Vec<String> = Vec::new();
        for p in &phrases {
            let bytes = p.as_bytes();
            let mut i = 0;
            while i < bytes.len() {
                if bytes[i].is_ascii_alphabetic() {
                    let start = i;
                    while i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_' || bytes[i] == b'-') {
                        i += 1;
                    }
                    if i - start >= 2 {
                        words.push(p[start..i].to_string());
                    }
                } else {
                    i += 1;
                }
            }
        }
        let t = dataqa::templates();
        words.push(t.suffix.clone());
        words.push(dataqa::MC_PREFIX.trim_end().to_string());
        words.push(dataqa::PLANNING_PROMPT.to_string());
        words.push(dataqa::COT_PROMPT.to_string());
        words.extend(dataqa::RELATION_POOL.iter().map(|s| s.to_string()));
        words.extend(CommandLabel::ALL.iter().map(|c| c.instruction().to_string()));
        words.sort();
        words.dedup();

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..N_CHARS).map(|i| ((b' ' + i as u8) as char).to_string()));
        let mut keywords = HashMap::new();
        for w in words {
            keywords.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        if tokens.len() > size {
            return Err(Error::Config(format!(
                "vocabulary needs {} ids but vocab size is {size}",
                tokens.len()
            )));
        }
        let max_keyword_len = keywords.keys().map(|k| k.len()).max().unwrap_or(0);
        Ok(Self {
            size,
            tokens,
            keywords,
            max_keyword_len,
        })
    }

    /// Logits width.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of assigned ids.
    pub fn assigned(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        if let Some(&id) = self.keywords.get(token) {
            return Some(id);
        }
        if let Some(i) = SPECIALS.iter().position(|s| *s == token) {
            return Some(i);
        }
        let b = token.as_bytes();
        (b.len() == 1 && (b' '..=b'~').contains(&b[0])).then(|| FIRST_CHAR + (b[0] - b' ') as usize)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let at_word_start = i == 0 || !is_word_char(bytes[i - 1]);
            if at_word_start && bytes[i].is_ascii_alphabetic() {
                let max = self.max_keyword_len.min(bytes.len() - i);
                let hit = (2..=max).rev().find_map(|len| {
                    let end = i + len;
                    if end < bytes.len() && is_word_char(bytes[end]) && is_word_char(bytes[end - 1]) {
                        return None;
                    }
                    text.get(i..end)
                        .and_then(|s| self.keywords.get(s))
                        .map(|&id| (id, len))
                });
                if let Some((id, len)) = hit {
                    out.push(id);
                    i += len;
                    continue;
                }
            }
            let c = bytes[i];
            if (b' '..=b'~').contains(&c) {
                out.push(FIRST_CHAR + (c - b' ') as usize);
                i += 1;
            } else {
                out.push(UNK);
                // skip the rest of a multi-byte character
                i += 1;
                while i < bytes.len() && (bytes[i] & 0xC0) == 0x80 {
                    i += 1;
                }
            }
        }
        out
    }

    /// Concatenate token strings, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= FIRST_CHAR)
            .filter_map(|&id| self.tokens.get(id))
            .map(String::as_str)
            .collect()
    }
}
