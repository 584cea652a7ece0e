//! Byte-level BPE tokenizer in the CLIP vocabulary layout (`vocab.json` +
//! `merges.txt`). Digits are always split into single-character pieces
//! before merging.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
const WORD_END: &str = "</w>";

/// GPT-2 style reversible byte-to-printable-char table.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from(b'!')..=u32::from(b'~')).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable.contains(&b) {
            char::from_u32(b).expect("latin-1")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("shifted code point")
        };
    }
    table
}

/// Token ids plus how many pieces were cut to fit the context length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub truncated: usize,
}

pub struct ClipTokenizer {
    vocab: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_chars: [char; 256],
    pattern: Regex,
    start: u32,
    end: u32,
    memo: Mutex<HashMap<String, Vec<String>>>,
}

impl std::fmt::Debug for ClipTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClipTokenizer")
            .field("vocab_size", &self.vocab.len())
            .field("merges", &self.ranks.len())
            .finish()
    }
}

impl ClipTokenizer {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab_raw = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges_raw = std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_raw)?;
        Self::new(vocab, &merges_raw)
    }

    pub fn new(vocab: HashMap<String, u32>, merges: &str) -> Result<Self> {
        let mut ranks = HashMap::new();
        for line in merges.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Checkpoint(format!("malformed merge line `{line}`")));
            };
            let next = ranks.len();
            ranks.entry((a.to_string(), b.to_string())).or_insert(next);
        }
        let id = |t: &str| {
            vocab
                .get(t)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("vocabulary lacks `{t}`")))
        };
        let start = id(START_TOKEN)?;
        let end = id(END_TOKEN)?;
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("token pattern");
        Ok(ClipTokenizer {
            vocab,
            ranks,
            byte_chars: bytes_to_unicode(),
            pattern,
            start,
            end,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn start_id(&self) -> u32 {
        self.start
    }

    pub fn end_id(&self) -> u32 {
        self.end
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        if let Some(hit) = self.memo.lock().expect("memo lock").get(piece) {
            return hit.clone();
        }
        let chars: Vec<char> = piece.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str(WORD_END);
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, w[0].clone(), w[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        self.memo
            .lock()
            .expect("memo lock")
            .insert(piece.to_string(), word.clone());
        word
    }

    /// Token ids without start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let piece: String = m.as_str().bytes().map(|b| self.byte_chars[b as usize]).collect();
            for tok in self.bpe(&piece) {
                let id = self
                    .vocab
                    .get(&tok)
                    .ok_or_else(|| Error::Checkpoint(format!("token `{tok}` missing from vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// Wraps the encoding in start/end markers and cuts the tail so the
    /// result fits `context_len`.
    pub fn encode_for_model(&self, text: &str, context_len: usize) -> Result<Tokenized> {
        let mut body = self.encode(text)?;
        let room = context_len.saturating_sub(2);
        let truncated = body.len().saturating_sub(room);
        body.truncate(room);
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(self.start);
        ids.extend(body);
        ids.push(self.end);
        Ok(Tokenized { ids, truncated })
    }
}

/// Vocabulary and merge list for a small BPE model: the 512 byte tokens,
/// merges spelling out `words`, and the two markers.
pub fn build_vocab(words: &[&str]) -> (HashMap<String, u32>, String) {
    let bytes = bytes_to_unicode();
    let mut tokens: Vec<String> = bytes.iter().map(|c| c.to_string()).collect();
    tokens.extend(bytes.iter().map(|c| format!("{c}{WORD_END}")));
    let mut merges = vec!["#version: 0.2".to_string()];
    for w in words {
        let chars: Vec<String> = w.chars().map(|c| c.to_string()).collect();
        if chars.len() < 2 {
            continue;
        }
        let mut acc = chars[0].clone();
        for (i, ch) in chars.iter().enumerate().skip(1) {
            let right = if i == chars.len() - 1 {
                format!("{ch}{WORD_END}")
            } else {
                ch.clone()
            };
            let line = format!("{acc} {right}");
            acc = format!("{acc}{right}");
            if !merges.contains(&line) {
                merges.push(line);
                tokens.push(acc.clone());
            }
        }
    }
    tokens.push(START_TOKEN.to_string());
    tokens.push(END_TOKEN.to_string());
    let vocab = tokens.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
    (vocab, merges.join("\n") + "\n")
}
