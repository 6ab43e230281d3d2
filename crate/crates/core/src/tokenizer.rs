//! Word-level tokenizer built from a caption corpus, with byte fallback for
//! words outside the vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{input, io_err, MsClipError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const BYTE_BASE: usize = SPECIALS.len();

/// A tokenized caption: BOS, content, exactly one EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenIds(Vec<usize>);

impl TokenIds {
    /// Checked constructor: exactly one EOS.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        let t = Self(ids);
        t.eos_position()?;
        Ok(t)
    }

    /// Unchecked; [`TokenIds::eos_position`] reports a malformed sequence.
    pub fn from_raw(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn eos_position(&self) -> Result<usize> {
        let mut found = self.0.iter().enumerate().filter(|(_, &id)| id == EOS).map(|(i, _)| i);
        match (found.next(), found.next()) {
            (Some(p), None) => Ok(p),
            (None, _) => Err(input("token sequence has no EOS")),
            (Some(_), Some(_)) => Err(input("token sequence has more than one EOS")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased alphanumeric runs; every other non-space character is a
/// word of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Tokenizer {
    /// Specials, the 256 byte tokens, then corpus words by descending
    /// frequency (ties alphabetical) until `max_vocab` entries.
    pub fn build<'s>(corpus: impl IntoIterator<Item = &'s str>, max_vocab: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in split_words(line) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=255u8).map(byte_token));
        tokens.truncate(max_vocab.max(SPECIALS.len()));
        let room = max_vocab.saturating_sub(tokens.len());
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w));
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(MsClipError::Format {
                what: "vocabulary",
                msg: format!("must start with {}", SPECIALS.join(", ")),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(MsClipError::Format { what: "vocabulary", msg: format!("bad token on line {}", i + 1) });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(MsClipError::Format { what: "vocabulary", msg: format!("duplicate token {t:?}") });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn push_word(&self, w: &str, out: &mut Vec<usize>) {
        if let Some(id) = self.id(w) {
            out.push(id);
            return;
        }
        let has_bytes = self.tokens.len() >= BYTE_BASE + 256;
        if has_bytes {
            out.extend(w.bytes().map(|b| BYTE_BASE + b as usize));
        } else {
            out.push(UNK);
        }
    }

    /// `BOS words… EOS`, with content truncated so the whole sequence fits
    /// `context_length`.
    pub fn encode(&self, text: &str, context_length: usize) -> TokenIds {
        let mut content = Vec::new();
        for w in split_words(text) {
            self.push_word(&w, &mut content);
        }
        content.truncate(context_length.saturating_sub(2));
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend(content);
        ids.push(EOS);
        TokenIds(ids)
    }

    /// Positions `[start, end)` of the tokens produced by word indices
    /// `[first_word, end_word)` of `text`, counting the leading BOS.
    pub fn word_span(&self, text: &str, first_word: usize, end_word: usize) -> (usize, usize) {
        let mut pos = 1;
        let mut start = 1;
        for (i, w) in split_words(text).iter().enumerate() {
            if i == first_word {
                start = pos;
            }
            if i == end_word {
                return (start, pos);
            }
            let mut tmp = Vec::new();
            self.push_word(w, &mut tmp);
            pos += tmp.len();
        }
        if first_word >= split_words(text).len() {
            start = pos;
        }
        (start, pos)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        let mut bytes = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            match id {
                PAD | BOS | EOS => flush(&mut bytes, &mut words),
                id if (BYTE_BASE..BYTE_BASE + 256).contains(&id) && id < self.tokens.len() => {
                    bytes.push((id - BYTE_BASE) as u8)
                }
                id => {
                    flush(&mut bytes, &mut words);
                    words.push(self.tokens.get(id).cloned().unwrap_or_else(|| SPECIALS[UNK].into()));
                }
            }
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(split_words("A Red, circle!"), vec!["a", "red", ",", "circle", "!"]);
    }

    #[test]
    fn encodes_with_markers_and_byte_fallback() {
        let tok = Tokenizer::build(["a red circle", "a blue square"], 300);
        let ids = tok.encode("a red circle", 16);
        assert_eq!(ids.ids()[0], BOS);
        assert_eq!(*ids.ids().last().unwrap(), EOS);
        assert_eq!(ids.len(), 5);
        let unk = tok.encode("zz", 16);
        assert_eq!(unk.ids(), &[BOS, BYTE_BASE + b'z' as usize, BYTE_BASE + b'z' as usize, EOS]);
        assert_eq!(tok.decode(unk.ids()), "zz");
        assert_eq!(tok.decode(ids.ids()), "a red circle");
    }

    #[test]
    fn truncates_to_context() {
        let tok = Tokenizer::build(["one two three four five"], 300);
        let ids = tok.encode("one two three four five", 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids.eos_position().unwrap(), 3);
    }

    #[test]
    fn unknown_without_byte_room_maps_to_unk() {
        let tok = Tokenizer::build(["a"], 4);
        assert_eq!(tok.encode("b", 8).ids(), &[BOS, UNK, EOS]);
    }

    #[test]
    fn eos_validation() {
        assert!(TokenIds::new(vec![BOS, 7]).is_err());
        assert!(TokenIds::new(vec![BOS, EOS, EOS]).is_err());
        assert_eq!(TokenIds::new(vec![BOS, 9, EOS, PAD]).unwrap().eos_position().unwrap(), 2);
    }

    #[test]
    fn word_spans_count_bos() {
        let tok = Tokenizer::build(["a red circle and a blue square"], 300);
        let text = "a red circle and a blue square";
        assert_eq!(tok.word_span(text, 1, 3), (2, 4));
        assert_eq!(tok.word_span(text, 5, 7), (6, 8));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::build(["a red circle"], 300);
        let p = dir.path().join("vocab.txt");
        tok.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), tok);
    }
}
