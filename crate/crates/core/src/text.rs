//! Character tokenization, greedy lexicon segmentation and text cleanup.
//!
//! Every Unicode scalar is one token, except the guard marker `⟨rep⟩` which is
//! always a single token of its own. Source and target text share one
//! vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const REP: u32 = 4;

pub const REP_TOKEN: &str = "⟨rep⟩";
pub const RESERVED_TOKENS: [&str; 5] = ["⟨pad⟩", "⟨bos⟩", "⟨eos⟩", "⟨unk⟩", REP_TOKEN];

/// Splits text into token units: `⟨rep⟩` markers and single characters.
pub fn units(text: &str) -> Vec<&str> {
    let mut out = Vec::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        if rest.starts_with(REP_TOKEN) {
            out.push(&rest[..REP_TOKEN.len()]);
            rest = &rest[REP_TOKEN.len()..];
        } else {
            let len = rest.chars().next().map_or(1, char::len_utf8);
            out.push(&rest[..len]);
            rest = &rest[len..];
        }
    }
    out
}

/// Number of tokens `text` occupies.
pub fn unit_count(text: &str) -> usize {
    units(text).len()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocab {
    pub fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Builds a vocabulary from an ordered token list. The first five entries
    /// must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens.iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::config("vocabulary must start with the five reserved tokens"));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token: tokens,
        })
    }

    fn push(&mut self, unit: &str) {
        if !self.token_to_id.contains_key(unit) {
            self.token_to_id.insert(unit.to_string(), self.id_to_token.len() as u32);
            self.id_to_token.push(unit.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Shared source/target vocabulary: reserved tokens, then every unit in
/// order of first appearance (source before target within a pair).
pub fn build_vocab<S: AsRef<str>>(corpus: &[(S, S)]) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut v = Vocab::reserved_only();
    for (src, tgt) in corpus {
        for side in [src.as_ref(), tgt.as_ref()] {
            for u in units(side) {
                v.push(u);
            }
        }
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub text: String,
}

/// One id per unit; unknown units become [`UNK`].
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSeq {
    let ids = units(text).into_iter().map(|u| vocab.id(u).unwrap_or(UNK)).collect();
    TokenSeq {
        ids,
        text: text.to_string(),
    }
}

/// Inverse of [`tokenize`]. Padding, sentence markers and `⟨unk⟩` produce no text.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    let mut s = String::new();
    for &id in ids {
        if matches!(id, PAD | BOS | EOS | UNK) {
            continue;
        }
        if let Some(t) = vocab.token(id) {
            s.push_str(t);
        }
    }
    s
}

/// Word list for greedy longest-match segmentation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<String>,
    max_units: usize,
}

impl Lexicon {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut lex = Lexicon::default();
        for w in words {
            lex.insert(w.into());
        }
        lex
    }

    pub fn insert(&mut self, word: String) {
        let n = unit_count(&word);
        if n == 0 {
            return;
        }
        self.max_units = self.max_units.max(n);
        self.words.insert(word);
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in sorted order.
    pub fn sorted_words(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.words.iter().map(String::as_str).collect();
        w.sort_unstable();
        w
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        for w in self.sorted_words() {
            s.push_str(w);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Words and their 0/1 boundary flags (1 on the first unit of each word).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub words: Vec<String>,
    pub flags: Vec<u8>,
}

/// Greedy left-to-right longest match against `lexicon`. Units not covered by
/// any lexicon word become single-unit words; `⟨rep⟩` is always its own word.
pub fn segment_greedy(text: &str, lexicon: &Lexicon) -> Segmentation {
    let us = units(text);
    let mut words = Vec::new();
    let mut flags = Vec::with_capacity(us.len());
    let mut i = 0;
    while i < us.len() {
        let mut len = 1;
        if us[i] != REP_TOKEN {
            let max = lexicon.max_units.min(us.len() - i);
            for l in (2..=max).rev() {
                let span = &us[i..i + l];
                if span.contains(&REP_TOKEN) {
                    continue;
                }
                if lexicon.contains(&span.concat()) {
                    len = l;
                    break;
                }
            }
        }
        words.push(us[i..i + len].concat());
        flags.push(1);
        flags.extend(std::iter::repeat_n(0, len - 1));
        i += len;
    }
    Segmentation { words, flags }
}

/// Tokens plus word-boundary flags, one flag per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedSentence {
    pub tokens: TokenSeq,
    pub boundary_flags: Vec<u8>,
}

impl SegmentedSentence {
    pub fn new(text: &str, vocab: &Vocab, lexicon: &Lexicon) -> Self {
        let tokens = tokenize(text, vocab);
        let boundary_flags = segment_greedy(text, lexicon).flags;
        SegmentedSentence { tokens, boundary_flags }
    }

    /// Builds flags from an existing word split.
    pub fn from_words<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Self {
        let text: String = words.iter().map(AsRef::as_ref).collect();
        let mut flags = Vec::new();
        for w in words {
            let n = unit_count(w.as_ref());
            if n > 0 {
                flags.push(1);
                flags.extend(std::iter::repeat_n(0, n - 1));
            }
        }
        SegmentedSentence {
            tokens: tokenize(&text, vocab),
            boundary_flags: flags,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.ids.is_empty()
    }
}

fn fold_width(c: char) -> char {
    match c {
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        '\u{3000}' => ' ',
        _ => c,
    }
}

/// Maps full-width ASCII variants to half-width, drops control characters
/// and collapses whitespace runs into one space.
pub fn preprocess(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars().map(fold_width) {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() {
            continue;
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    if pending_space {
        out.push(' ');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_from_single_pair() {
        let v = build_vocab(&[("我们", "我哋")]).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(&v.tokens()[5..], &["我", "们", "哋"]);
        assert_eq!(v, build_vocab(&[("我们", "我哋")]).unwrap());
    }

    #[test]
    fn vocab_never_duplicates_marker() {
        let v = build_vocab(&[("去⟨rep⟩啦", "⟨rep⟩")]).unwrap();
        assert_eq!(v.tokens().iter().filter(|t| *t == REP_TOKEN).count(), 1);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [(&str, &str); 0] = [];
        assert!(matches!(build_vocab(&empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn tokenize_cases() {
        let v = build_vocab(&[("我们去啦", "x")]).unwrap();
        assert_eq!(tokenize("我们", &v).ids, vec![5, 6]);
        assert_eq!(tokenize("去⟨rep⟩啦", &v).ids, vec![7, REP, 8]);
        assert_eq!(tokenize("§", &v).ids, vec![UNK]);
    }

    #[test]
    fn segmentation_cases() {
        let lex = Lexicon::new(["我们"]);
        assert_eq!(segment_greedy("我们去", &lex).flags, vec![1, 0, 1]);
        assert_eq!(segment_greedy("我们去", &Lexicon::default()).flags, vec![1, 1, 1]);
        let lex = Lexicon::new(["我们", "我们去"]);
        assert_eq!(segment_greedy("我们去", &lex).flags, vec![1, 0, 0]);
    }

    #[test]
    fn marker_is_its_own_word() {
        let lex = Lexicon::new(["去⟨rep⟩", "⟨rep⟩啦"]);
        let s = segment_greedy("去⟨rep⟩啦", &lex);
        assert_eq!(s.words, vec!["去", "⟨rep⟩", "啦"]);
        assert_eq!(s.flags, vec![1, 1, 1]);
    }

    #[test]
    fn preprocess_cases() {
        assert_eq!(preprocess("Ａ\u{3000}Ｂ"), "A B");
        assert_eq!(preprocess("a\u{7}b"), "ab");
        assert_eq!(preprocess("a \t\n b"), "a b");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = build_vocab(&[("我们", "我哋")]).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(words in prop::collection::vec(prop::sample::select(vec!["我", "们", "去", "⟨rep⟩", "哋", "a"]), 0..12)) {
            let text: String = words.concat();
            let v = build_vocab(&[("我们去哋a", "")]).unwrap();
            prop_assert_eq!(detokenize(&tokenize(&text, &v).ids, &v), text);
        }

        #[test]
        fn segmentation_covers_input(text in "[我们去的了a-c]{0,16}", lex in prop::collection::vec("[我们去的了a-c]{1,3}", 0..6)) {
            let lex = Lexicon::new(lex);
            let s = segment_greedy(&text, &lex);
            prop_assert_eq!(s.words.concat(), text.clone());
            prop_assert_eq!(s.flags.len(), unit_count(&text));
            if !text.is_empty() {
                prop_assert_eq!(s.flags[0], 1);
            }
        }

        #[test]
        fn preprocess_idempotent(t in "\\PC{0,24}|[\\x00-\\x20ＡＢ\u{3000} a]{0,24}") {
            let once = preprocess(&t);
            prop_assert_eq!(preprocess(&once), once.clone());
        }
    }
}
