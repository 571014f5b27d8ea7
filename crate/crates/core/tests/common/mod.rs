#![allow(dead_code)]

use dialect_frontend::aligner::{WordAlignment, WordPair};
use dialect_frontend::autodiff::{Graph, Tensor, Var};
use dialect_frontend::corpus::build_resources;
use dialect_frontend::model::{Model, ModelConfig, ModelKind};
use dialect_frontend::synth::{generate, DialectRuleSet, Inventory, RuleOptions, SynthConfig};
use dialect_frontend::training::{prepare_examples, train, Example, OptimizerKind, TrainConfig};
use dialect_frontend::Result;

pub type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub op: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], op: OpFn) -> GradCase {
    GradCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        op,
    }
}

/// One entry per differentiable graph operation.
pub fn gradient_catalog() -> Vec<GradCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1])),
        case("matmul_nt", &[&[3, 4], &[5, 4]], |g, x| g.matmul_nt(x[0], x[1])),
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        case("add_row", &[&[3, 4], &[4]], |g, x| g.add_row(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case("scale", &[&[2, 3]], |g, x| Ok(g.scale(x[0], -1.7))),
        case("relu", &[&[4, 5]], |g, x| Ok(g.relu(x[0]))),
        case("softmax_rows", &[&[3, 5]], |g, x| g.softmax_rows(x[0])),
        case("masked_softmax_rows", &[&[4, 5]], |g, x| {
            g.masked_softmax_rows(x[0], Some(&[true, false, true, true, false]), false)
        }),
        case("causal_softmax_rows", &[&[4, 4]], |g, x| {
            g.masked_softmax_rows(x[0], None, true)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, x| {
            g.layer_norm(x[0], x[1], x[2])
        }),
        case("gather_rows", &[&[5, 3]], |g, x| g.gather_rows(x[0], &[4, 0, 4, 2])),
        case("concat_cols", &[&[3, 2], &[3, 4]], |g, x| g.concat_cols(&[x[0], x[1]])),
        case("slice_cols", &[&[3, 6]], |g, x| g.slice_cols(x[0], 1, 4)),
        case("select_rows", &[&[4, 3], &[4, 3]], |g, x| {
            g.select_rows(x[0], x[1], &[true, false, false, true])
        }),
        case("mean_rows", &[&[4, 3]], |g, x| {
            g.mean_rows(x[0], &[true, true, false, true])
        }),
        case("sum", &[&[2, 3], &[2, 3], &[2, 3]], |g, x| g.sum(&[x[0], x[1], x[2]])),
        case("sum_all", &[&[3, 4]], |g, x| Ok(g.sum_all(x[0]))),
        case("cross_entropy", &[&[4, 6]], |g, x| {
            g.cross_entropy(x[0], &[1, 5, 0, 3], &[false, false, true, false])
        }),
        case("mse_loss", &[&[3, 4], &[3, 4]], |g, x| g.mse_loss(x[0], x[1])),
        case("mse_loss_masked", &[&[2, 3], &[2, 3]], |g, x| {
            g.mse_loss_masked(x[0], x[1], &[true, false, true, true, false, true])
        }),
        case("attention_composite", &[&[3, 4], &[5, 4], &[5, 4]], |g, x| {
            let s = g.matmul_nt(x[0], x[1])?;
            let s = g.scale(s, 0.5);
            let p = g.softmax_rows(s)?;
            g.matmul(p, x[2])
        }),
    ]
}

/// Walks every target character and applies the rule directly.
pub fn brute_force_char_alignment(links: &[(usize, usize)], src: &[String], tgt: &[String]) -> Vec<Vec<u8>> {
    let cols: usize = src.iter().map(|w| w.chars().count()).sum();
    let mut rows = Vec::new();
    for (j, w) in tgt.iter().enumerate() {
        for _ in w.chars() {
            let mut row = vec![0u8; cols];
            let best = links.iter().filter(|l| l.1 == j).map(|l| l.0).min();
            if let Some(i) = best {
                let col: usize = src[..i].iter().map(|w| w.chars().count()).sum();
                row[col] = 1;
            }
            rows.push(row);
        }
    }
    rows
}

fn dense_matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            (0..b.cols())
                .map(|j| r.iter().enumerate().map(|(k, x)| x * b.at(k, j)).sum())
                .collect()
        })
        .collect()
}

/// Textbook multi-head self-attention written with plain loops.
pub fn reference_mha(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    bo: &Tensor,
    heads: usize,
) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    let (q, k, v) = (
        dense_matmul(&rows, wq),
        dense_matmul(&rows, wk),
        dense_matmul(&rows, wv),
    );
    let d = x.cols();
    let dh = d / heads;
    let l = x.rows();
    let mut cat = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let mut out = dense_matmul(&cat, wo);
    for r in &mut out {
        for (j, x) in r.iter_mut().enumerate() {
            *x += bo.data()[j];
        }
    }
    out
}

pub struct Tiny {
    pub pairs: Vec<WordPair>,
    pub links: Vec<WordAlignment>,
    pub rules: DialectRuleSet,
}

/// A small synthetic corpus of 2–4 word sentences.
pub fn tiny(n: usize, seed: u64) -> Tiny {
    let inv = Inventory::new(20, seed).unwrap();
    let rules = DialectRuleSet::random(&inv, seed, &RuleOptions::default());
    let cfg = SynthConfig {
        n,
        vocab_size: 20,
        len_range: (2, 4),
        seed,
        irregular_rate: 0.0,
    };
    let pairs = generate(&rules, &cfg).unwrap();
    Tiny {
        pairs: pairs.iter().map(|p| p.word_pair()).collect(),
        links: pairs.into_iter().map(|p| p.links).collect(),
        rules,
    }
}

pub fn tiny_config(kind: ModelKind, d_model: usize) -> ModelConfig {
    ModelConfig {
        kind,
        d_model,
        n_branches: 2,
        n_heads: 1,
        d_seg: 4,
        max_len: 32,
        length_offset_range: 4,
        collapse_repeats: false,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(kind: ModelKind, pairs: &[WordPair], d_model: usize, seed: u64) -> Model {
    let (vocab, lex) = build_resources(pairs).unwrap();
    Model::new(tiny_config(kind, d_model), vocab, lex, seed).unwrap()
}

pub fn examples(model: &Model, t: &Tiny) -> Vec<Example> {
    prepare_examples(model, &t.pairs, Some(&t.links)).unwrap().0
}

/// Trains until the training pairs are memorized.
pub fn overfit(kind: ModelKind, t: &Tiny, epochs: usize) -> Model {
    let init = tiny_model(kind, &t.pairs, 32, 3);
    let ex = examples(&init, t);
    let cfg = TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 0.005,
        optimizer: OptimizerKind::Adam,
        lambda_start: 0.3,
        lambda_end: 0.0,
        ..TrainConfig::default()
    };
    train(init, &ex, &[], &ex, &cfg, |_| {}).unwrap().0
}
