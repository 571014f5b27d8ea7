//! Deterministic synthetic "toy dialect" corpora with gold translations and
//! gold word alignments.
//!
//! A rule set rewrites a source sentence word by word: a word rule replaces
//! a whole word, otherwise every character goes through the character map.
//! A reorder marker emits itself and then swaps the two words after it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::{WordAlignment, WordPair};
use crate::error::{Error, Result};

const SOURCE_CHARS: &str = "的一是不了人我在有他这中大来上国个到说们为子和你地出道也时年得就那要下以生会自着去之过家学对可她里后小么心多天而能好都然没日于起还发成事只作当想看文无开手十用主行方又如前所本见经头面公同三已老从动两长知民样现分将外但身些与高意进把法此实回二理美点月明其种声全工己话儿者向情部正名定女问力机给等几很业最间新什打便位因重被走电四第门相次东政海口使教西再平真听世气信北少关并内加化由却代军产入先山五太水万市眼体别处总才场师书比住员九笑性通目华报立马命张活难神数件安表原车白应路期叫死常提感金何更反合放做系计或司利受光王果亲界及今京务制解各任至清物台象记边共风战干接它许八特觉望直服";
const DIALECT_CHARS: &str =
    "嘅咗哋佢啲冇嘢喺咁睇畀揾嚟乜嗰噉咩啱攞嘥掂嬲瞓翻郁嗌睬靓孖氹冚揸搵渠咪嚿餸窿劏瀡焗煲蒸滚烫";

/// Character substitutions, word replacements and reorder markers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DialectRuleSet {
    pub char_map: BTreeMap<char, char>,
    pub word_rules: BTreeMap<String, String>,
    pub reorder_markers: BTreeSet<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub links: WordAlignment,
}

impl SynthPair {
    pub fn word_pair(&self) -> WordPair {
        (self.src.clone(), self.tgt.clone())
    }
}

/// How many rules of each kind [`DialectRuleSet::random`] creates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuleOptions {
    /// Fraction of source characters that get a substitute.
    pub char_sub_rate: f64,
    /// Fraction of inventory words with a whole-word replacement.
    pub word_rule_rate: f64,
    /// Fraction of word replacements whose length differs by one.
    pub length_change_rate: f64,
    pub reorder_markers: usize,
}

impl Default for RuleOptions {
    fn default() -> Self {
        RuleOptions {
            char_sub_rate: 0.3,
            word_rule_rate: 0.15,
            length_change_rate: 0.2,
            reorder_markers: 1,
        }
    }
}

impl RuleOptions {
    /// Character substitutions only: every link is `(i, i)`.
    pub fn substitution_only() -> Self {
        RuleOptions {
            char_sub_rate: 0.4,
            word_rule_rate: 0.0,
            length_change_rate: 0.0,
            reorder_markers: 0,
        }
    }
}

/// Sampling parameters for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    /// Number of distinct ordinary source words.
    pub vocab_size: usize,
    /// Inclusive bounds on words per sentence.
    pub len_range: (usize, usize),
    pub seed: u64,
    /// Probability that a sentence carries one URL, e-mail address or
    /// abbreviation, copied unchanged to the target.
    pub irregular_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            vocab_size: 60,
            len_range: (3, 8),
            seed: 7,
            irregular_rate: 0.1,
        }
    }
}

/// Word inventory derived from a seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inventory {
    pub words: Vec<String>,
    pub irregular: Vec<String>,
}

impl Inventory {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size < 10 {
            return Err(Error::config(format!(
                "vocab_size must be at least 10, got {vocab_size}"
            )));
        }
        let pool: Vec<char> = SOURCE_CHARS.chars().collect();
        let n_chars = (vocab_size + 40).min(pool.len());
        let chars = &pool[..n_chars];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e_4701);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(vocab_size);
        let mut attempts = 0;
        while words.len() < vocab_size {
            attempts += 1;
            if attempts > vocab_size * 1000 {
                return Err(Error::config("could not draw enough distinct words"));
            }
            let r: f64 = rng.gen();
            let len = if r < 0.3 {
                1
            } else if r < 0.8 {
                2
            } else {
                3
            };
            let w: String = (0..len).map(|_| *chars.choose(&mut rng).unwrap()).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let mut irregular = Vec::new();
        let letters = b"abcdefghijklmnopqrstuvwxyz";
        let word = |rng: &mut ChaCha8Rng, n: usize| -> String {
            (0..n).map(|_| *letters.choose(rng).unwrap() as char).collect()
        };
        for k in 0..4 {
            irregular.push(format!("https://{}.com/{}", word(&mut rng, 5), k));
            irregular.push(format!("www.{}.cn", word(&mut rng, 4)));
            irregular.push(format!("{}@{}.com", word(&mut rng, 4), word(&mut rng, 3)));
            irregular.push(word(&mut rng, 3).to_uppercase());
        }
        Ok(Inventory { words, irregular })
    }
}

impl DialectRuleSet {
    /// Random rules over `inventory`.
    pub fn random(inventory: &Inventory, seed: u64, opts: &RuleOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1e_55ed);
        let src_chars: BTreeSet<char> = inventory.words.iter().flat_map(|w| w.chars()).collect();
        let src_chars: Vec<char> = src_chars.into_iter().collect();
        let mut targets: Vec<char> = DIALECT_CHARS.chars().collect();
        targets.extend(SOURCE_CHARS.chars().filter(|c| !src_chars.contains(c)));
        targets.dedup();
        let mut shuffled = src_chars.clone();
        shuffled.shuffle(&mut rng);
        let n_sub = ((opts.char_sub_rate * src_chars.len() as f64).round() as usize).min(targets.len());
        let mut tpool = targets.clone();
        tpool.shuffle(&mut rng);
        let char_map: BTreeMap<char, char> = shuffled[..n_sub].iter().copied().zip(tpool.iter().copied()).collect();

        let mut words = inventory.words.clone();
        words.shuffle(&mut rng);
        let n_markers = opts.reorder_markers.min(words.len());
        let reorder_markers: BTreeSet<String> = words
            .iter()
            .filter(|w| w.chars().count() == 1)
            .take(n_markers)
            .cloned()
            .collect();
        let candidates: Vec<&String> = words.iter().filter(|w| !reorder_markers.contains(*w)).collect();
        let n_rules = (opts.word_rule_rate * inventory.words.len() as f64).round() as usize;
        let mut word_rules = BTreeMap::new();
        for w in candidates.into_iter().take(n_rules) {
            let len = w.chars().count();
            let new_len = if rng.gen::<f64>() < opts.length_change_rate {
                if len == 1 || rng.gen::<bool>() {
                    len + 1
                } else {
                    len - 1
                }
            } else {
                len
            };
            let rhs: String = (0..new_len).map(|_| *targets.choose(&mut rng).unwrap()).collect();
            word_rules.insert(w.clone(), rhs);
        }
        DialectRuleSet {
            char_map,
            word_rules,
            reorder_markers,
            seed,
        }
    }

    pub fn map_word(&self, w: &str) -> String {
        if let Some(r) = self.word_rules.get(w) {
            return r.clone();
        }
        w.chars().map(|c| *self.char_map.get(&c).unwrap_or(&c)).collect()
    }

    /// Target words and gold links for a source sentence.
    pub fn apply(&self, src: &[String]) -> (Vec<String>, Vec<(usize, usize)>) {
        let mut tgt = Vec::with_capacity(src.len());
        let mut links = Vec::with_capacity(src.len());
        let mut i = 0;
        while i < src.len() {
            if self.reorder_markers.contains(&src[i]) && i + 2 < src.len() {
                for k in [i, i + 2, i + 1] {
                    links.push((k, tgt.len()));
                    tgt.push(self.map_word(&src[k]));
                }
                i += 3;
            } else {
                links.push((i, tgt.len()));
                tgt.push(self.map_word(&src[i]));
                i += 1;
            }
        }
        (tgt, links)
    }

    /// `rule_type TAB lhs TAB rhs` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed\t{}\t-", self.seed);
        for (a, b) in &self.char_map {
            let _ = writeln!(s, "char\t{a}\t{b}");
        }
        for (a, b) in &self.word_rules {
            let _ = writeln!(s, "word\t{a}\t{b}");
        }
        for m in &self.reorder_markers {
            let _ = writeln!(s, "reorder\t{m}\tswap");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut rules = DialectRuleSet::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: m.to_string(),
            };
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(err("expected `rule_type<TAB>lhs<TAB>rhs`"));
            }
            match parts[0] {
                "seed" => rules.seed = parts[1].parse().map_err(|_| err("bad seed"))?,
                "char" => {
                    let mut a = parts[1].chars();
                    let mut b = parts[2].chars();
                    match (a.next(), a.next(), b.next(), b.next()) {
                        (Some(x), None, Some(y), None) => {
                            if rules.char_map.insert(x, y).is_some() {
                                return Err(err("character mapped twice"));
                            }
                        }
                        _ => return Err(err("char rules map one character to one character")),
                    }
                }
                "word" => {
                    if parts[1].is_empty() || parts[2].is_empty() {
                        return Err(err("word rules need non-empty sides"));
                    }
                    if rules.word_rules.insert(parts[1].into(), parts[2].into()).is_some() {
                        return Err(err("word mapped twice"));
                    }
                }
                "reorder" => {
                    rules.reorder_markers.insert(parts[1].into());
                }
                other => return Err(err(&format!("unknown rule type `{other}`"))),
            }
        }
        Ok(rules)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }
}

/// Samples `cfg.n` sentences over the inventory built from
/// `(cfg.vocab_size, rules.seed)` and translates them with `rules`.
pub fn generate(rules: &DialectRuleSet, cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    let (lo, hi) = cfg.len_range;
    if lo < 1 || hi < lo {
        return Err(Error::config(format!("invalid length range ({lo}, {hi})")));
    }
    if !(0.0..=1.0).contains(&cfg.irregular_rate) {
        return Err(Error::config("irregular_rate must lie in [0, 1]"));
    }
    let inv = Inventory::new(cfg.vocab_size, rules.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let len = rng.gen_range(lo..=hi);
        let mut src: Vec<String> = (0..len).map(|_| inv.words.choose(&mut rng).unwrap().clone()).collect();
        if rng.gen::<f64>() < cfg.irregular_rate {
            let pos = rng.gen_range(0..len);
            src[pos] = inv.irregular.choose(&mut rng).unwrap().clone();
        }
        let (tgt, links) = rules.apply(&src);
        let links = WordAlignment::new(links, src.len(), tgt.len())?;
        out.push(SynthPair { src, tgt, links });
    }
    Ok(out)
}

/// True when `rules` reproduce the stored target and links exactly.
pub fn verify_pair(rules: &DialectRuleSet, pair: &SynthPair) -> bool {
    let (tgt, links) = rules.apply(&pair.src);
    tgt == pair.tgt
        && pair.links.src_len == pair.src.len()
        && pair.links.tgt_len == pair.tgt.len()
        && links.into_iter().collect::<BTreeSet<_>>() == pair.links.links
}
