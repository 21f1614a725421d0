//! Word-level tokenizer and vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Default per-segment cap for pair encodings.
pub const DEFAULT_SEGMENT_CAP: usize = 128;

/// Lowercases and splits into maximal alphanumeric runs; every other
/// non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// True for tokens made only of punctuation/symbol characters.
pub fn is_punctuation(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Index is the token id; the first five entries are the specials.
    tokens: Vec<String>,
    min_frequency: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Counts tokens over `lines` and keeps those with count ≥ `min_frequency`,
    /// ordered by (count desc, token asc) after the specials.
    pub fn build<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        min_frequency: usize,
    ) -> Result<Vocab> {
        if min_frequency == 0 {
            return Err(Error::InvalidArgument(
                "min_frequency must be at least 1".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in lines {
            for tok in tokenize(line) {
                any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::InvalidArgument(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_frequency && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Vocab::from_tokens(tokens, min_frequency))
    }

    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Vocab {
        let mut v = Vocab {
            tokens,
            min_frequency,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn load(path: &std::path::Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v: Vocab = serde_json::from_str(&text)?;
        v.reindex();
        Ok(v)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Token ids, segment ids and attention mask, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSeq {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub mask: Vec<u8>,
}

impl EncodedSeq {
    fn from_parts(mut ids: Vec<u32>, mut segments: Vec<u8>, max_len: usize) -> EncodedSeq {
        ids.truncate(max_len);
        segments.truncate(max_len);
        let n = ids.len();
        let mut mask = vec![1u8; n];
        ids.resize(max_len, PAD_ID);
        segments.resize(max_len, 0);
        mask.resize(max_len, 0);
        EncodedSeq {
            ids,
            segments,
            mask,
        }
    }

    /// Number of leading positions with mask 1.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().rposition(|&m| m == 1).map_or(0, |p| p + 1)
    }

    /// Appends `n` padding positions.
    pub fn padded(&self, n: usize) -> EncodedSeq {
        let mut s = self.clone();
        s.ids.extend(std::iter::repeat_n(PAD_ID, n));
        s.segments.extend(std::iter::repeat_n(0, n));
        s.mask.extend(std::iter::repeat_n(0, n));
        s
    }
}

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`. Each text is cut to
/// `segment_cap` tokens (tail dropped) before the whole sequence is cut to
/// `max_len` and padded.
pub fn encode_pair(
    a: &str,
    b: Option<&str>,
    vocab: &Vocab,
    max_len: usize,
    segment_cap: Option<usize>,
) -> EncodedSeq {
    let cap = segment_cap.unwrap_or(DEFAULT_SEGMENT_CAP);
    let mut a_ids = vocab.ids(a);
    a_ids.truncate(cap);
    let mut ids = Vec::with_capacity(a_ids.len() + 3);
    ids.push(CLS_ID);
    ids.extend(a_ids);
    ids.push(SEP_ID);
    let mut segments = vec![0u8; ids.len()];
    if let Some(b) = b {
        let mut b_ids = vocab.ids(b);
        b_ids.truncate(cap);
        let start = ids.len();
        ids.extend(b_ids);
        ids.push(SEP_ID);
        segments.resize(start, 0);
        segments.extend(std::iter::repeat_n(1, ids.len() - start));
    }
    EncodedSeq::from_parts(ids, segments, max_len)
}

/// `[CLS] u1 [SEP] u2 [SEP] ... ut [SEP]` with segment 0 for user and 1 for
/// system turns. Overlong histories lose their oldest tokens; `[CLS]` stays.
pub fn encode_history(
    turns: &[crate::data::Utterance],
    vocab: &Vocab,
    max_len: usize,
) -> EncodedSeq {
    let mut body: Vec<(u32, u8)> = Vec::new();
    for turn in turns {
        let seg = match turn.speaker {
            crate::data::Speaker::User => 0,
            crate::data::Speaker::System => 1,
        };
        body.extend(vocab.ids(&turn.text).into_iter().map(|id| (id, seg)));
        body.push((SEP_ID, seg));
    }
    let keep = max_len.saturating_sub(1);
    if body.len() > keep {
        body.drain(..body.len() - keep);
    }
    let mut ids = vec![CLS_ID];
    let mut segments = vec![0u8];
    for (id, seg) in body {
        ids.push(id);
        segments.push(seg);
    }
    EncodedSeq::from_parts(ids, segments, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Book a TAXI, now!"),
            vec!["book", "a", "taxi", ",", "now", "!"]
        );
        assert_eq!(tokenize("10:30"), vec!["10", ":", "30"]);
        assert!(tokenize("  ").is_empty());
    }

    #[test]
    fn vocab_cutoff() {
        let v = Vocab::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(5), Some("a"));
        let v1 = Vocab::build(["a a b"], 1).unwrap();
        assert_eq!(v1.id("b"), 6);
        assert!(Vocab::build(Vec::<&str>::new(), 1).is_err());
        assert!(Vocab::build(["a"], 0).is_err());
    }

    #[test]
    fn vocab_is_permutation_invariant() {
        let a = Vocab::build(["x y z", "y z", "z"], 1).unwrap();
        let b = Vocab::build(["z", "y z", "x y z"], 1).unwrap();
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(&a.tokens()[5..], &["z", "y", "x"]);
    }

    #[test]
    fn encode_single_segment() {
        let v = Vocab::build(["hi there"], 1).unwrap();
        let e = encode_pair("hi", None, &v, 8, None);
        assert_eq!(e.ids, vec![CLS_ID, v.id("hi"), SEP_ID, 0, 0, 0, 0, 0]);
        assert_eq!(e.mask, vec![1, 1, 1, 0, 0, 0, 0, 0]);
        assert_eq!(e.valid_len(), 3);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = Vocab::build(["hi"], 1).unwrap();
        let e = encode_pair("zebra", None, &v, 4, None);
        assert_eq!(e.ids[1], UNK_ID);
    }

    #[test]
    fn segment_cap_keeps_head() {
        let text: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let text = text.join(" ");
        let v = Vocab::build([text.as_str()], 1).unwrap();
        let e = encode_pair(&text, Some("w0"), &v, 256, None);
        // CLS + 128 context tokens + SEP, then the response segment
        assert_eq!(e.ids[128], v.id("w127"));
        assert_eq!(e.ids[129], SEP_ID);
        assert_eq!(e.segments[129], 0);
        assert_eq!(e.segments[130], 1);
        assert_eq!(e.valid_len(), 132);
    }

    #[test]
    fn history_truncates_from_front() {
        use crate::data::{Speaker, Utterance};
        let v = Vocab::build(["a b c d e"], 1).unwrap();
        let turns = vec![
            Utterance {
                speaker: Speaker::User,
                text: "a b".into(),
            },
            Utterance {
                speaker: Speaker::System,
                text: "c d e".into(),
            },
        ];
        let full = encode_history(&turns, &v, 16);
        assert_eq!(full.valid_len(), 8);
        let cut = encode_history(&turns, &v, 5);
        assert_eq!(
            cut.ids,
            vec![CLS_ID, v.id("c"), v.id("d"), v.id("e"), SEP_ID]
        );
        assert_eq!(cut.segments, vec![0, 1, 1, 1, 1]);
    }
}
