//! Corpus BLEU and decoding latency measurement.

use std::collections::HashMap;
use std::hash::Hash;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::text::{segment_greedy, units, Lexicon, SegmentedSentence};

/// Default speech duration assumed per output character, in seconds.
pub const SECONDS_PER_CHAR: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    /// Modified precision per order, `1..=max_order`.
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Strict corpus BLEU: no smoothing, zero if any order has no match.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_order: usize) -> Result<BleuReport> {
    bleu_with(candidates, references, max_order, false)
}

/// Corpus BLEU with clipped n-gram precisions and a brevity penalty.
/// Orders for which neither side has any n-gram are left out of the mean.
/// `smooth` adds one to the match and total counts of orders above 1.
pub fn bleu_with<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_order: usize,
    smooth: bool,
) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::dim(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput("BLEU over an empty corpus".into()));
    }
    if max_order == 0 {
        return Err(Error::config("max_order must be at least 1"));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let mut ref_totals = vec![0usize; max_order];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_order {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += c.len().saturating_sub(n - 1);
            ref_totals[n - 1] += r.len().saturating_sub(n - 1);
            for (g, k) in cc {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = Vec::with_capacity(max_order);
    let mut log_sum = 0.0;
    let mut used = 0usize;
    let mut zero = false;
    for n in 0..max_order {
        let (m, t) = if smooth && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        let p = if t == 0 { 0.0 } else { m as f64 / t as f64 };
        precisions.push(p);
        if totals[n] == 0 && ref_totals[n] == 0 {
            continue;
        }
        used += 1;
        if m == 0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
    }
    let brevity_penalty = if c_len == 0 {
        if r_len == 0 {
            1.0
        } else {
            0.0
        }
    } else if c_len <= r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if zero {
        0.0
    } else if used == 0 {
        brevity_penalty
    } else {
        brevity_penalty * (log_sum / used as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    })
}

/// Character units of a line, or lexicon words when `lexicon` is given.
pub fn bleu_units(line: &str, lexicon: Option<&Lexicon>) -> Vec<String> {
    let line = line.trim();
    match lexicon {
        None => units(line)
            .into_iter()
            .filter(|u| !u.trim().is_empty())
            .map(str::to_string)
            .collect(),
        Some(lex) => segment_greedy(line, lex)
            .words
            .into_iter()
            .filter(|w| !w.trim().is_empty())
            .collect(),
    }
}

/// Character BLEU of a model's outputs against reference id sequences.
pub fn model_bleu(model: &Model, sources: &[SegmentedSentence], references: &[Vec<u32>]) -> Result<BleuReport> {
    let candidates = sources
        .iter()
        .map(|s| model.translate_sentence(s))
        .collect::<Result<Vec<_>>>()?;
    bleu(&candidates, references, 4)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    /// Median wall-clock seconds per sentence.
    pub per_sentence: Vec<f64>,
    pub output_chars: Vec<usize>,
    pub mean_latency: f64,
    pub mean_latency_per_char: f64,
    /// Total latency over the estimated speech duration of all outputs.
    pub rtf_proxy: f64,
    pub seconds_per_char: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyComparison {
    pub nat: LatencyReport,
    pub at: LatencyReport,
    /// Mean AT latency over mean NAT latency.
    pub speedup: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub seconds_per_char: f64,
    /// Decode exactly this many tokens instead of the model's own length.
    pub forced_len: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: 5,
            warmup: 1,
            seconds_per_char: SECONDS_PER_CHAR,
            forced_len: None,
        }
    }
}

/// Encodes and decodes one sentence, returning the output length in tokens.
pub fn decode_once(model: &Model, sentence: &SegmentedSentence, forced_len: Option<usize>) -> Result<usize> {
    let enc = model.encode(sentence)?;
    match (model.config.kind, forced_len) {
        (ModelKind::Nat, f) => Ok(model.decode_nat(&enc, f)?.predicted_ids.len()),
        (ModelKind::At, Some(n)) => Ok(model.decode_greedy_fixed(&enc, n)?.len()),
        (ModelKind::At, None) => {
            let cap = (2 * enc.src_len() + 10).min(model.config.max_len);
            Ok(model.decode_greedy(&enc, cap)?.len())
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-sentence median latency over `repetitions` timed runs after
/// `warmup` untimed ones.
pub fn bench_latency(model: &Model, testset: &[SegmentedSentence], opts: &BenchOptions) -> Result<LatencyReport> {
    if testset.is_empty() {
        return Err(Error::EmptyInput(
            "latency benchmark needs at least one sentence".into(),
        ));
    }
    if opts.repetitions == 0 {
        return Err(Error::config("repetitions must be at least 1"));
    }
    if opts.seconds_per_char <= 0.0 {
        return Err(Error::config("seconds_per_char must be positive"));
    }
    let mut per_sentence = Vec::with_capacity(testset.len());
    let mut output_chars = Vec::with_capacity(testset.len());
    for s in testset {
        for _ in 0..opts.warmup {
            decode_once(model, s, opts.forced_len)?;
        }
        let mut times = Vec::with_capacity(opts.repetitions);
        let mut chars = 0;
        for _ in 0..opts.repetitions {
            let t0 = Instant::now();
            chars = decode_once(model, s, opts.forced_len)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        per_sentence.push(median(&mut times));
        output_chars.push(chars);
    }
    Ok(summarize(per_sentence, output_chars, opts.seconds_per_char))
}

/// Builds a report from measured per-sentence latencies.
pub fn summarize(per_sentence: Vec<f64>, output_chars: Vec<usize>, seconds_per_char: f64) -> LatencyReport {
    let total: f64 = per_sentence.iter().sum();
    let chars: usize = output_chars.iter().sum();
    let n = per_sentence.len().max(1) as f64;
    let chars_f = chars.max(1) as f64;
    LatencyReport {
        mean_latency: total / n,
        mean_latency_per_char: total / chars_f,
        rtf_proxy: total / (chars_f * seconds_per_char),
        per_sentence,
        output_chars,
        seconds_per_char,
    }
}

/// Benchmarks both models on the same sentences, interleaved per sentence so
/// drift in machine load affects both alike.
pub fn compare_latency(
    nat: &Model,
    at: &Model,
    testset: &[SegmentedSentence],
    opts: &BenchOptions,
) -> Result<LatencyComparison> {
    if testset.is_empty() {
        return Err(Error::EmptyInput(
            "latency benchmark needs at least one sentence".into(),
        ));
    }
    let mut nat_t = Vec::new();
    let mut at_t = Vec::new();
    let mut nat_c = Vec::new();
    let mut at_c = Vec::new();
    for s in testset {
        let one = std::slice::from_ref(s);
        let a = bench_latency(nat, one, opts)?;
        let b = bench_latency(at, one, opts)?;
        nat_t.extend(a.per_sentence);
        nat_c.extend(a.output_chars);
        at_t.extend(b.per_sentence);
        at_c.extend(b.output_chars);
    }
    let nat = summarize(nat_t, nat_c, opts.seconds_per_char);
    let at = summarize(at_t, at_c, opts.seconds_per_char);
    let speedup = at.mean_latency / nat.mean_latency;
    Ok(LatencyComparison { nat, at, speedup })
}
