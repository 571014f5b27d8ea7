mod common;

use std::collections::HashMap;

use dialect_frontend::aligner::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn toy_corpus() -> Vec<WordPair> {
    let mut c = Vec::new();
    for _ in 0..50 {
        c.push((words("a b"), words("x y")));
    }
    for _ in 0..50 {
        c.push((words("a c"), words("x z")));
    }
    c
}

/// Plain IBM Model 1 EM over string keys, NULL written as "".
fn reference_em(corpus: &[WordPair], iters: usize) -> HashMap<(String, String), f64> {
    let tgt_vocab: std::collections::BTreeSet<&String> = corpus.iter().flat_map(|(_, t)| t).collect();
    let mut t: HashMap<(String, String), f64> = HashMap::new();
    for (s, f) in corpus {
        for e in std::iter::once(&String::new()).chain(s) {
            for w in f {
                t.insert((e.clone(), w.clone()), 1.0 / tgt_vocab.len() as f64);
            }
        }
    }
    for _ in 0..iters {
        let mut count: HashMap<(String, String), f64> = HashMap::new();
        let mut total: HashMap<String, f64> = HashMap::new();
        for (s, f) in corpus {
            let src: Vec<String> = std::iter::once(String::new()).chain(s.iter().cloned()).collect();
            for w in f {
                let z: f64 = src.iter().map(|e| t[&(e.clone(), w.clone())]).sum();
                for e in &src {
                    let c = t[&(e.clone(), w.clone())] / z;
                    *count.entry((e.clone(), w.clone())).or_default() += c;
                    *total.entry(e.clone()).or_default() += c;
                }
            }
        }
        for (k, c) in count {
            let tot = total[&k.0];
            t.insert(k, c / tot);
        }
    }
    t
}

#[test]
fn em_matches_hand_run_oracle() {
    let corpus = toy_corpus();
    for iters in [1, 2, 5] {
        let table = train_ibm1(&corpus, iters).unwrap();
        let oracle = reference_em(&corpus, iters);
        for ((e, f), p) in &oracle {
            let src = if e.is_empty() { None } else { Some(e.as_str()) };
            let got = table.prob(src, f);
            assert!((got - p).abs() < 1e-12, "iter {iters} t({f}|{e}) {got} vs {p}");
        }
    }
    let table = train_ibm1(&corpus, 5).unwrap();
    assert_eq!(table.best_target("a"), Some("x"));
    // `a` occurs in every pair just like NULL, so the two are indistinguishable and ties go to NULL.
    assert!((table.prob(Some("a"), "x") - table.prob(None, "x")).abs() < 1e-12);
    assert_eq!(
        viterbi_align(&table, &words("a b"), &words("x y")).links,
        [(1, 1)].into()
    );
}

#[test]
fn two_iterations_by_hand() {
    let corpus = toy_corpus();
    let table = train_ibm1(&corpus, 1).unwrap();
    // Uniform start 1/3: every target word splits its count evenly over NULL, a and b/c.
    // t(x|a) = 100/3 / (100/3 * 2) = 1/2.
    assert!((table.prob(Some("a"), "x") - 0.5).abs() < 1e-12);
    assert!((table.prob(Some("b"), "y") - 0.5).abs() < 1e-12);
    let table = train_ibm1(&corpus, 2).unwrap();
    // Second E-step: x splits 1/3 to a in all 100 pairs, y and z give a 1/4 in 50 pairs each.
    // t(x|a) = (100/3) / (100/3 + 25) = 4/7.
    assert!((table.prob(Some("a"), "x") - 4.0 / 7.0).abs() < 1e-12);
}

#[test]
fn single_pair_mass_only_shared_with_null() {
    let table = train_ibm1(&[(words("a"), words("x"))], 5).unwrap();
    assert!((table.prob(Some("a"), "x") - 1.0).abs() < 1e-12);
    assert!((table.prob(None, "x") - 1.0).abs() < 1e-12);
}

#[test]
fn empty_target_sentences_are_skipped() {
    let corpus = vec![(words("a"), vec![]), (words("a"), words("x"))];
    let table = train_ibm1(&corpus, 3).unwrap();
    assert!(table.prob(Some("a"), "x") > 0.99);
    assert!(train_ibm1(&[(words("a"), vec![])], 3).is_err());
}

#[test]
fn log_likelihood_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vocab = ["a", "b", "c", "d", "e", "f"];
    let corpus: Vec<WordPair> = (0..200)
        .map(|_| {
            let n = rng.gen_range(1..5);
            let s: Vec<String> = (0..n).map(|_| vocab[rng.gen_range(0..6)].to_string()).collect();
            let t: Vec<String> = s.iter().map(|w| w.to_uppercase()).collect();
            (s, t)
        })
        .collect();
    let (_, trace) = train_ibm1_traced(&corpus, 8).unwrap();
    assert_eq!(trace.len(), 9);
    for w in trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{trace:?}");
    }
}

#[test]
fn viterbi_examples() {
    let table = TranslationTable::from_entries([
        (Some("a"), "a", 1.0),
        (Some("b"), "b", 1.0),
        (None, "a", 1e-3),
        (None, "b", 1e-3),
    ]);
    assert_eq!(
        viterbi_align(&table, &words("a b"), &words("a b")).links,
        [(0, 0), (1, 1)].into()
    );
    assert!(viterbi_align(&table, &words("p q"), &words("r s")).links.is_empty());
}

#[test]
fn symmetrize_examples() {
    let a = WordAlignment::new([(0, 0), (1, 1)], 2, 2).unwrap();
    let b = WordAlignment::new([(0, 0)], 2, 2).unwrap();
    let c = WordAlignment::new([(0, 1), (1, 0)], 2, 2).unwrap();
    assert_eq!(symmetrize(&a, &a).unwrap(), a);
    assert!(symmetrize(&a, &c).unwrap().links.is_empty());
    assert_eq!(symmetrize(&a, &b).unwrap().links, [(0, 0)].into());
    let d = WordAlignment::new([], 3, 2).unwrap();
    assert!(symmetrize(&a, &d).is_err());
}

#[test]
fn word_to_char_documented_example() {
    let a = WordAlignment::new([(0, 0), (1, 1)], 2, 2).unwrap();
    let m = word_to_char_alignment(&a, &["我们", "去"], &["我哋", "去"]).unwrap();
    assert_eq!(m.target_to_source, vec![Some(0), Some(0), Some(2)]);
    let empty = WordAlignment::new([], 2, 2).unwrap();
    let z = word_to_char_alignment(&empty, &["我们", "去"], &["我哋", "去"]).unwrap();
    assert!(z.to_tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn word_to_char_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet: Vec<char> = "甲乙丙丁戊己庚辛壬癸".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(1..4))
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect()
    };
    for _ in 0..200 {
        let ns = rng.gen_range(1..6);
        let nt = rng.gen_range(1..6);
        let src: Vec<String> = (0..ns).map(|_| word(&mut rng)).collect();
        let tgt: Vec<String> = (0..nt).map(|_| word(&mut rng)).collect();
        let links: Vec<(usize, usize)> = (0..rng.gen_range(0..8))
            .map(|_| (rng.gen_range(0..ns), rng.gen_range(0..nt)))
            .collect();
        let a = WordAlignment::new(links.clone(), ns, nt).unwrap();
        let m = word_to_char_alignment(&a, &src, &tgt).unwrap();
        let oracle = common::brute_force_char_alignment(&links, &src, &tgt);
        assert_eq!(m.rows, oracle.len());
        for (t, row) in oracle.iter().enumerate() {
            for (s, &v) in row.iter().enumerate() {
                assert_eq!(m.get(t, s), v, "cell {t},{s} for {src:?} {tgt:?} {links:?}");
            }
        }
    }
}

#[test]
fn pharaoh_round_trip() {
    let a = WordAlignment::new([(0, 1), (2, 0)], 3, 2).unwrap();
    assert_eq!(a.to_pharaoh(), "0-1 2-0");
    assert_eq!(parse_pharaoh_line(&a.to_pharaoh(), 3, 2).unwrap(), a);
    assert!(parse_pharaoh_line("0-5", 3, 2).is_err());
    assert!(parse_pharaoh_line("0:1", 3, 2).is_err());
}
