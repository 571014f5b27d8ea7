//! Statistical word alignment and its conversion to character-level
//! attention targets.
//!
//! The word aligner is IBM Model 1 trained by expectation maximization with a
//! NULL source word. Real aligner output in Pharaoh format (`i-j` pairs) can
//! be read with [`read_pharaoh`] instead.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::text::unit_count;

/// Probability assigned to word pairs the table has never seen.
pub const UNKNOWN_FLOOR: f64 = 1e-9;

const NULL: u32 = 0;

/// `t(target | source)` for IBM Model 1. Source id 0 is the NULL word.
#[derive(Clone, Debug, Default)]
pub struct TranslationTable {
    src_ids: HashMap<String, u32>,
    tgt_ids: HashMap<String, u32>,
    src_words: Vec<String>,
    tgt_words: Vec<String>,
    prob: HashMap<(u32, u32), f64>,
}

impl TranslationTable {
    fn new() -> Self {
        TranslationTable {
            src_words: vec![String::new()],
            ..Default::default()
        }
    }

    fn src_id(&mut self, w: &str) -> u32 {
        if let Some(&i) = self.src_ids.get(w) {
            return i;
        }
        let i = self.src_words.len() as u32;
        self.src_ids.insert(w.to_string(), i);
        self.src_words.push(w.to_string());
        i
    }

    fn tgt_id(&mut self, w: &str) -> u32 {
        if let Some(&i) = self.tgt_ids.get(w) {
            return i;
        }
        let i = self.tgt_words.len() as u32;
        self.tgt_ids.insert(w.to_string(), i);
        self.tgt_words.push(w.to_string());
        i
    }

    /// Builds a table from explicit entries; `None` is the NULL source.
    pub fn from_entries<'s>(entries: impl IntoIterator<Item = (Option<&'s str>, &'s str, f64)>) -> Self {
        let mut t = TranslationTable::new();
        for (s, f, p) in entries {
            let e = s.map_or(NULL, |s| t.src_id(s));
            let f = t.tgt_id(f);
            t.prob.insert((e, f), p);
        }
        t
    }

    /// `t(target | source)`, with `None` for NULL. Unseen pairs get
    /// [`UNKNOWN_FLOOR`].
    pub fn prob(&self, source: Option<&str>, target: &str) -> f64 {
        let e = match source {
            None => Some(NULL),
            Some(s) => self.src_ids.get(s).copied(),
        };
        match (e, self.tgt_ids.get(target)) {
            (Some(e), Some(&f)) => self.prob.get(&(e, f)).copied().unwrap_or(UNKNOWN_FLOOR),
            _ => UNKNOWN_FLOOR,
        }
    }

    /// Most probable target word for `source`; ties go to the earlier-seen word.
    pub fn best_target(&self, source: &str) -> Option<&str> {
        let e = *self.src_ids.get(source)?;
        let mut best: Option<(u32, f64)> = None;
        for (&(s, f), &p) in &self.prob {
            if s != e {
                continue;
            }
            match best {
                Some((bf, bp)) if bp > p || (bp == p && bf < f) => {}
                _ => best = Some((f, p)),
            }
        }
        best.map(|(f, _)| self.tgt_words[f as usize].as_str())
    }

    /// Sum of `t(· | source)` for every source word (NULL under `""`).
    pub fn row_sums(&self) -> HashMap<String, f64> {
        let mut sums: HashMap<String, f64> = HashMap::new();
        for (&(e, _), &p) in &self.prob {
            *sums.entry(self.src_words[e as usize].clone()).or_default() += p;
        }
        sums
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }
}

/// Word-segmented sentence pair.
pub type WordPair = (Vec<String>, Vec<String>);

/// IBM Model 1 EM from a uniform start.
pub fn train_ibm1(corpus: &[WordPair], iterations: usize) -> Result<TranslationTable> {
    train_ibm1_traced(corpus, iterations).map(|(t, _)| t)
}

/// Like [`train_ibm1`], also returning the corpus log-likelihood before each
/// iteration and after the last one (`iterations + 1` values).
pub fn train_ibm1_traced(corpus: &[WordPair], iterations: usize) -> Result<(TranslationTable, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::config("IBM Model 1 needs at least one EM iteration"));
    }
    let mut table = TranslationTable::new();
    let mut sents: Vec<(Vec<u32>, Vec<u32>)> = Vec::with_capacity(corpus.len());
    for (src, tgt) in corpus {
        if tgt.is_empty() {
            continue;
        }
        let mut s = vec![NULL];
        s.extend(src.iter().map(|w| table.src_id(w)));
        let t = tgt.iter().map(|w| table.tgt_id(w)).collect();
        sents.push((s, t));
    }
    if sents.is_empty() {
        return Err(Error::EmptyInput(
            "no usable sentence pairs for alignment training".into(),
        ));
    }
    let uniform = 1.0 / table.tgt_words.len() as f64;
    for (s, t) in &sents {
        for &e in s {
            for &f in t {
                table.prob.insert((e, f), uniform);
            }
        }
    }

    let mut trace = Vec::with_capacity(iterations + 1);
    let mut counts: HashMap<(u32, u32), f64> = HashMap::with_capacity(table.prob.len());
    let mut totals = vec![0.0; table.src_words.len()];
    for _ in 0..iterations {
        counts.clear();
        totals.iter_mut().for_each(|x| *x = 0.0);
        let mut ll = 0.0;
        for (s, t) in &sents {
            for &f in t {
                let z: f64 = s.iter().map(|&e| table.prob[&(e, f)]).sum();
                ll += (z / s.len() as f64).ln();
                for &e in s {
                    let c = table.prob[&(e, f)] / z;
                    *counts.entry((e, f)).or_default() += c;
                    totals[e as usize] += c;
                }
            }
        }
        trace.push(ll);
        for (&(e, f), &c) in &counts {
            table.prob.insert((e, f), c / totals[e as usize]);
        }
    }
    trace.push(log_likelihood(&table, &sents));
    Ok((table, trace))
}

fn log_likelihood(table: &TranslationTable, sents: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    sents
        .iter()
        .flat_map(|(s, t)| {
            t.iter().map(move |&f| {
                let z: f64 = s.iter().map(|&e| table.prob[&(e, f)]).sum();
                (z / s.len() as f64).ln()
            })
        })
        .sum()
}

/// Links `(source word index, target word index)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordAlignment {
    pub links: BTreeSet<(usize, usize)>,
    pub src_len: usize,
    pub tgt_len: usize,
}

impl WordAlignment {
    pub fn new(links: impl IntoIterator<Item = (usize, usize)>, src_len: usize, tgt_len: usize) -> Result<Self> {
        let links: BTreeSet<_> = links.into_iter().collect();
        if let Some(&(i, j)) = links.iter().find(|&&(i, j)| i >= src_len || j >= tgt_len) {
            return Err(Error::dim(format!(
                "link {i}-{j} outside a {src_len}x{tgt_len} alignment"
            )));
        }
        Ok(WordAlignment {
            links,
            src_len,
            tgt_len,
        })
    }

    /// Swaps the roles of source and target.
    pub fn transpose(&self) -> Self {
        WordAlignment {
            links: self.links.iter().map(|&(i, j)| (j, i)).collect(),
            src_len: self.tgt_len,
            tgt_len: self.src_len,
        }
    }

    /// Pharaoh line: space-separated `i-j` pairs.
    pub fn to_pharaoh(&self) -> String {
        self.links
            .iter()
            .map(|(i, j)| format!("{i}-{j}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Each target word links to its most probable source word; NULL (or a tie
/// with NULL) leaves it unlinked. Ties between source words go to the
/// smallest index.
pub fn viterbi_align(table: &TranslationTable, src: &[String], tgt: &[String]) -> WordAlignment {
    let mut links = BTreeSet::new();
    for (j, f) in tgt.iter().enumerate() {
        let mut best_p = table.prob(None, f);
        let mut best: Option<usize> = None;
        for (i, e) in src.iter().enumerate() {
            let p = table.prob(Some(e), f);
            if p > best_p {
                best_p = p;
                best = Some(i);
            }
        }
        if let Some(i) = best {
            links.insert((i, j));
        }
    }
    WordAlignment {
        links,
        src_len: src.len(),
        tgt_len: tgt.len(),
    }
}

/// Intersection of two alignments in the same (source, target) orientation.
pub fn symmetrize(m2c: &WordAlignment, c2m: &WordAlignment) -> Result<WordAlignment> {
    if m2c.src_len != c2m.src_len || m2c.tgt_len != c2m.tgt_len {
        return Err(Error::dim(format!(
            "cannot symmetrize {}x{} with {}x{}",
            m2c.src_len, m2c.tgt_len, c2m.src_len, c2m.tgt_len
        )));
    }
    Ok(WordAlignment {
        links: m2c.links.intersection(&c2m.links).copied().collect(),
        src_len: m2c.src_len,
        tgt_len: m2c.tgt_len,
    })
}

/// Which direction to keep as the supervision target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
    Symmetric,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m2c" | "s2t" => Ok(Direction::SourceToTarget),
            "c2m" | "t2s" => Ok(Direction::TargetToSource),
            "sym" | "symmetric" => Ok(Direction::Symmetric),
            other => Err(Error::config(format!("unknown alignment direction `{other}`"))),
        }
    }
}

/// Trains both directions on `corpus` and aligns every pair.
pub fn align_corpus(corpus: &[WordPair], iterations: usize, direction: Direction) -> Result<Vec<WordAlignment>> {
    let fwd = train_ibm1(corpus, iterations)?;
    let need_rev = direction != Direction::SourceToTarget;
    let rev = if need_rev {
        let flipped: Vec<WordPair> = corpus.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
        Some(train_ibm1(&flipped, iterations)?)
    } else {
        None
    };
    corpus
        .iter()
        .map(|(s, t)| {
            let m2c = viterbi_align(&fwd, s, t);
            match (&rev, direction) {
                (None, _) | (_, Direction::SourceToTarget) => Ok(m2c),
                (Some(r), Direction::TargetToSource) => Ok(viterbi_align(r, t, s).transpose()),
                (Some(r), Direction::Symmetric) => symmetrize(&m2c, &viterbi_align(r, t, s).transpose()),
            }
        })
        .collect()
}

/// Binary `T × S` character alignment. A row holds at most one 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharAlignmentMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Source column per target character, `None` for unlinked characters.
    pub target_to_source: Vec<Option<usize>>,
    /// First-character offsets of each source word.
    pub src_word_starts: Vec<usize>,
    /// First-character offsets of each target word.
    pub tgt_word_starts: Vec<usize>,
}

impl CharAlignmentMatrix {
    pub fn get(&self, t: usize, s: usize) -> u8 {
        u8::from(self.target_to_source[t] == Some(s))
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0; self.rows * self.cols];
        for (t, s) in self.target_to_source.iter().enumerate() {
            if let Some(s) = s {
                data[t * self.cols + s] = 1.0;
            }
        }
        Tensor::new(vec![self.rows, self.cols], data).expect("consistent shape")
    }

    /// True for every cell whose row has a link.
    pub fn linked_row_mask(&self) -> Vec<bool> {
        self.target_to_source
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.is_some(), self.cols))
            .collect()
    }
}

fn word_starts<S: AsRef<str>>(words: &[S]) -> (Vec<usize>, usize) {
    let mut starts = Vec::with_capacity(words.len());
    let mut off = 0;
    for w in words {
        starts.push(off);
        off += unit_count(w.as_ref());
    }
    (starts, off)
}

/// Every character of a linked target word points at the first character of
/// its source word. With several links the smallest source index wins.
pub fn word_to_char_alignment<S: AsRef<str>>(
    align: &WordAlignment,
    src_words: &[S],
    tgt_words: &[S],
) -> Result<CharAlignmentMatrix> {
    if align.src_len != src_words.len() || align.tgt_len != tgt_words.len() {
        return Err(Error::dim(format!(
            "alignment is {}x{} but the pair has {} source and {} target words",
            align.src_len,
            align.tgt_len,
            src_words.len(),
            tgt_words.len()
        )));
    }
    let (src_starts, cols) = word_starts(src_words);
    let (tgt_starts, rows) = word_starts(tgt_words);
    let mut first_link: Vec<Option<usize>> = vec![None; tgt_words.len()];
    // BTreeSet iterates in (i, j) order, so the first hit per j is the minimum i.
    for &(i, j) in &align.links {
        if i >= src_words.len() || j >= tgt_words.len() {
            return Err(Error::dim(format!("link {i}-{j} out of range")));
        }
        if first_link[j].is_none() {
            first_link[j] = Some(i);
        }
    }
    let mut target_to_source = Vec::with_capacity(rows);
    for (j, w) in tgt_words.iter().enumerate() {
        let col = first_link[j].map(|i| src_starts[i]);
        target_to_source.extend(std::iter::repeat_n(col, unit_count(w.as_ref())));
    }
    Ok(CharAlignmentMatrix {
        rows,
        cols,
        target_to_source,
        src_word_starts: src_starts,
        tgt_word_starts: tgt_starts,
    })
}

pub fn parse_pharaoh_line(line: &str, src_len: usize, tgt_len: usize) -> Result<WordAlignment> {
    let mut links = Vec::new();
    for tok in line.split_whitespace() {
        let (a, b) = tok
            .split_once('-')
            .ok_or_else(|| Error::config(format!("bad Pharaoh link `{tok}`")))?;
        let i = a
            .parse()
            .map_err(|_| Error::config(format!("bad Pharaoh link `{tok}`")))?;
        let j = b
            .parse()
            .map_err(|_| Error::config(format!("bad Pharaoh link `{tok}`")))?;
        links.push((i, j));
    }
    WordAlignment::new(links, src_len, tgt_len)
}

/// Reads one alignment per corpus pair.
pub fn read_pharaoh(path: impl AsRef<Path>, corpus: &[WordPair]) -> Result<Vec<WordAlignment>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != corpus.len() {
        return Err(Error::dim(format!(
            "{} has {} alignment lines for {} sentence pairs",
            path.display(),
            lines.len(),
            corpus.len()
        )));
    }
    lines
        .iter()
        .zip(corpus)
        .enumerate()
        .map(|(n, (l, (s, t)))| {
            parse_pharaoh_line(l, s.len(), t.len()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_pharaoh(path: impl AsRef<Path>, aligns: &[WordAlignment]) -> Result<()> {
    let mut s = String::new();
    for a in aligns {
        s.push_str(&a.to_pharaoh());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
