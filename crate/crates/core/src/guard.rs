//! Protection of untranslatable spans (URLs, e-mail addresses, Latin
//! abbreviations, emoticons) behind the `⟨rep⟩` marker.

use std::fs;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};
use crate::text::REP_TOKEN;

/// Default pattern set, highest priority first.
pub const DEFAULT_PATTERNS: [&str; 4] = [
    r"(?:https?|ftp)://[A-Za-z0-9\-._~:/?#\[\]@!$&'()*+,;=%]+|www\.[A-Za-z0-9\-._~/?#=&%]+",
    r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,}",
    r"[A-Za-z]{2,}",
    r"(?:[:;=][\-o']?[()\[\]DPp/\\|]+)|\^_*\^|[\x{1F300}-\x{1FAFF}\x{2600}-\x{27BF}]+",
];

/// Compiled, ordered pattern set. Order is priority when two matches start
/// at the same position.
#[derive(Clone, Debug)]
pub struct PatternSet {
    patterns: Vec<Regex>,
}

impl Default for PatternSet {
    fn default() -> Self {
        Self::new(DEFAULT_PATTERNS).expect("default patterns compile")
    }
}

impl PatternSet {
    pub fn new<I, S>(patterns: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let patterns = patterns
            .into_iter()
            .map(|p| {
                Regex::new(p.as_ref()).map_err(|source| Error::Pattern {
                    pattern: p.as_ref().to_string(),
                    source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PatternSet { patterns })
    }

    /// One regular expression per line; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn as_strs(&self) -> Vec<&str> {
        self.patterns.iter().map(Regex::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuardedText {
    pub guarded: String,
    pub originals: Vec<String>,
    /// Byte ranges of the originals in the input text, ascending.
    pub spans: Vec<(usize, usize)>,
}

impl GuardedText {
    pub fn marker_count(&self) -> usize {
        self.guarded.matches(REP_TOKEN).count()
    }
}

/// Replaces matches with `⟨rep⟩`, scanning left to right. The earliest match
/// wins and among matches that start at the same position the
/// higher-priority pattern wins. A match that overlaps the accepted one is
/// not guarded separately; the accepted span grows to cover it instead, so
/// `ABCwww.x.org` becomes a single span. Scanning resumes after the span. A
/// literal `⟨rep⟩` already present in the input is guarded as itself so the
/// marker count always equals the number of originals.
pub fn guard(text: &str, patterns: &PatternSet) -> GuardedText {
    let mut guarded = String::with_capacity(text.len());
    let mut originals = Vec::new();
    let mut spans = Vec::new();
    let mut cursor = 0;
    // Rescan from the cursor after every match.
    while cursor < text.len() {
        let rest = &text[cursor..];
        // (start, end); literal markers outrank every pattern.
        let mut best: Option<(usize, usize)> = rest.find(REP_TOKEN).map(|s| (s, s + REP_TOKEN.len()));
        for re in &patterns.patterns {
            if let Some(m) = re.find_iter(rest).find(|m| !m.is_empty()) {
                if best.is_none_or(|(s, _)| m.start() < s) {
                    best = Some((m.start(), m.end()));
                }
            }
        }
        let Some((s, mut e)) = best else { break };
        if !rest[s..].starts_with(REP_TOKEN) {
            e = absorb_overlaps(rest, patterns, s, e);
        }
        let (s, e) = (cursor + s, cursor + e);
        guarded.push_str(&text[cursor..s]);
        guarded.push_str(REP_TOKEN);
        originals.push(text[s..e].to_string());
        spans.push((s, e));
        cursor = e;
    }
    guarded.push_str(&text[cursor..]);
    GuardedText {
        guarded,
        originals,
        spans,
    }
}

/// Extends `[s, e)` until no pattern match starting inside it runs past its end.
fn absorb_overlaps(text: &str, patterns: &PatternSet, s: usize, mut e: usize) -> usize {
    loop {
        let mut grown = e;
        for re in &patterns.patterns {
            for m in re.find_iter(&text[s..]) {
                if s + m.start() >= e {
                    break;
                }
                grown = grown.max(s + m.end());
            }
        }
        if grown == e {
            return e;
        }
        e = grown;
    }
}

/// Restored text plus the byte ranges where originals were reinserted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Restored {
    pub text: String,
    pub spans: Vec<(usize, usize)>,
}

/// Puts the originals back in order. Missing markers are repaired by
/// appending the leftover originals at the end, separated by spaces; surplus
/// markers are deleted.
pub fn unguard(translated: &str, guarded: &GuardedText) -> String {
    unguard_with_spans(translated, guarded).text
}

pub fn unguard_with_spans(translated: &str, guarded: &GuardedText) -> Restored {
    let mut text = String::with_capacity(translated.len());
    let mut spans = Vec::new();
    let mut originals = guarded.originals.iter();
    let mut pieces = translated.split(REP_TOKEN);
    if let Some(first) = pieces.next() {
        text.push_str(first);
    }
    for piece in pieces {
        if let Some(o) = originals.next() {
            spans.push((text.len(), text.len() + o.len()));
            text.push_str(o);
        }
        text.push_str(piece);
    }
    for o in originals {
        text.push(' ');
        spans.push((text.len(), text.len() + o.len()));
        text.push_str(o);
    }
    Restored { text, spans }
}
