//! Corpus files and flat key-value configuration files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::aligner::WordPair;
use crate::error::{Error, Result};
use crate::guard::{guard, PatternSet};
use crate::text::{build_vocab, Lexicon, Vocab};

/// Parses `source TAB target` lines. Words are separated by single spaces;
/// blank lines are skipped.
pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<WordPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (s, t) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: "expected `source<TAB>target`".into(),
        })?;
        out.push((split_words(s), split_words(t)));
    }
    Ok(out)
}

fn split_words(s: &str) -> Vec<String> {
    s.split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
}

pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<WordPair>> {
    let path = path.as_ref();
    parse_tsv(&fs::read_to_string(path)?, path)
}

pub fn write_tsv(path: impl AsRef<Path>, pairs: &[WordPair]) -> Result<()> {
    let mut s = String::new();
    for (src, tgt) in pairs {
        s.push_str(&src.join(" "));
        s.push('\t');
        s.push_str(&tgt.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Concatenated sentence text (no separators).
pub fn joined<S: AsRef<str>>(words: &[S]) -> String {
    words.iter().map(AsRef::as_ref).collect()
}

/// Applies the guard to every word, so protected spans become `⟨rep⟩`.
pub fn guard_pairs(pairs: &[WordPair], patterns: &PatternSet) -> Vec<WordPair> {
    let g = |ws: &[String]| -> Vec<String> { ws.iter().map(|w| guard(w, patterns).guarded).collect() };
    pairs.iter().map(|(s, t)| (g(s), g(t))).collect()
}

/// Shared vocabulary over both sides and a lexicon of source words.
pub fn build_resources(pairs: &[WordPair]) -> Result<(Vocab, Lexicon)> {
    let texts: Vec<(String, String)> = pairs.iter().map(|(s, t)| (joined(s), joined(t))).collect();
    let vocab = build_vocab(&texts)?;
    let lexicon = Lexicon::new(pairs.iter().flat_map(|(s, _)| s.iter().cloned()));
    Ok((vocab, lexicon))
}

/// Non-empty lines of a UTF-8 file.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

pub fn read_kv(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    parse_kv(&fs::read_to_string(path)?, path)
}
