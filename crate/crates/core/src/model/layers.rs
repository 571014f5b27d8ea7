use std::collections::HashMap;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (n, t)) in entries.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate parameter `{n}`")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(ParamStore { names, tensors, index })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn position(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }
}

/// Parameters registered on a graph, looked up by name.
pub(crate) struct Bound<'s> {
    store: &'s ParamStore,
    vars: Vec<Var>,
}

impl<'s> Bound<'s> {
    pub(crate) fn bind(g: &mut Graph<'s>, store: &'s ParamStore, trainable: bool) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.frozen(t) })
            .collect();
        Bound { store, vars }
    }

    /// Wraps variables already registered for every parameter, in store order.
    #[cfg(test)]
    pub(crate) fn from_vars(store: &'s ParamStore, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), store.len());
        Bound { store, vars }
    }

    pub(crate) fn get(&self, name: &str) -> Var {
        self.vars[self.store.position(name)]
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `x·W + b`.
pub(crate) fn linear(g: &mut Graph<'_>, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = g.matmul(x, p.get(w))?;
    g.add_row(y, p.get(b))
}

/// Layer-normalized residual sum.
pub(crate) fn add_norm(g: &mut Graph<'_>, p: &Bound, prefix: &str, x: Var, y: Var) -> Result<Var> {
    let s = g.add(x, y)?;
    g.layer_norm(s, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")))
}

/// Attention over `n_branches` feature slices with `n_heads` heads each.
/// Branch outputs are concatenated and mixed by one shared output
/// projection. Returns the output and, when `keep_weights`, every head's
/// attention matrix (branch-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn multibranch_attention(
    g: &mut Graph<'_>,
    p: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    key_mask: Option<&[bool]>,
    causal: bool,
    keep_weights: bool,
) -> Result<(Var, Vec<Var>)> {
    let db = cfg.branch_width();
    let dh = cfg.head_width();
    let inv = 1.0 / (dh as f64).sqrt();
    let single = cfg.n_branches == 1;
    let mut heads = Vec::with_capacity(cfg.total_heads());
    let mut weights = Vec::new();
    for b in 0..cfg.n_branches {
        let (qs, ks) = if single {
            (q_in, kv_in)
        } else {
            let qs = g.slice_cols(q_in, b * db, (b + 1) * db)?;
            let ks = if kv_in == q_in {
                qs
            } else {
                g.slice_cols(kv_in, b * db, (b + 1) * db)?
            };
            (qs, ks)
        };
        let q = g.matmul(qs, p.get(&format!("{prefix}.b{b}.wq")))?;
        let k = g.matmul(ks, p.get(&format!("{prefix}.b{b}.wk")))?;
        let v = g.matmul(ks, p.get(&format!("{prefix}.b{b}.wv")))?;
        for h in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh)?,
                    g.slice_cols(k, h * dh, (h + 1) * dh)?,
                    g.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, inv);
            let att = g.masked_softmax_rows(scores, key_mask, causal)?;
            if keep_weights {
                weights.push(att);
            }
            heads.push(g.matmul(att, vh)?);
        }
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = linear(g, p, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
    Ok((out, weights))
}

/// Block-diagonal position-wise feed-forward: one small FFN per branch slice.
pub(crate) fn multibranch_ffn(g: &mut Graph<'_>, p: &Bound, cfg: &ModelConfig, prefix: &str, x: Var) -> Result<Var> {
    let db = cfg.branch_width();
    let mut outs = Vec::with_capacity(cfg.n_branches);
    for b in 0..cfg.n_branches {
        let xs = if cfg.n_branches == 1 {
            x
        } else {
            g.slice_cols(x, b * db, (b + 1) * db)?
        };
        let h = linear(g, p, xs, &format!("{prefix}.b{b}.w1"), &format!("{prefix}.b{b}.b1"))?;
        let h = g.relu(h);
        outs.push(linear(
            g,
            p,
            h,
            &format!("{prefix}.b{b}.w2"),
            &format!("{prefix}.b{b}.b2"),
        )?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Mean of several same-shaped matrices.
pub(crate) fn average(g: &mut Graph<'_>, parts: &[Var]) -> Result<Var> {
    let s = g.sum(parts)?;
    Ok(g.scale(s, 1.0 / parts.len() as f64))
}

/// Sinusoidal position table `[len × d]`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("table shape")
}

/// Shapes of every parameter for `cfg`, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let db = cfg.branch_width();
    let hidden = cfg.ffn_multiplier * db;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("tok_emb".into(), vec![cfg.vocab_size, d]),
        ("seg_emb".into(), vec![2, cfg.d_seg]),
        ("stitch.w".into(), vec![d + cfg.d_seg, d]),
        ("stitch.b".into(), vec![d]),
        ("out_bias".into(), vec![cfg.vocab_size]),
    ];
    if cfg.kind == super::ModelKind::Nat {
        v.push(("len.w".into(), vec![d, cfg.length_classes()]));
        v.push(("len.b".into(), vec![cfg.length_classes()]));
    }
    let attn = |v: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for b in 0..cfg.n_branches {
            for m in ["wq", "wk", "wv"] {
                v.push((format!("{prefix}.b{b}.{m}"), vec![db, db]));
            }
        }
        v.push((format!("{prefix}.wo"), vec![d, d]));
        v.push((format!("{prefix}.bo"), vec![d]));
    };
    let norm = |v: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        v.push((format!("{prefix}.g"), vec![d]));
        v.push((format!("{prefix}.b"), vec![d]));
    };
    let ffn = |v: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for b in 0..cfg.n_branches {
            v.push((format!("{prefix}.b{b}.w1"), vec![db, hidden]));
            v.push((format!("{prefix}.b{b}.b1"), vec![hidden]));
            v.push((format!("{prefix}.b{b}.w2"), vec![hidden, db]));
            v.push((format!("{prefix}.b{b}.b2"), vec![db]));
        }
    };
    for l in 0..cfg.n_layers {
        attn(&mut v, &format!("enc{l}.self"));
        norm(&mut v, &format!("enc{l}.ln1"));
        ffn(&mut v, &format!("enc{l}.ffn"));
        norm(&mut v, &format!("enc{l}.ln2"));
    }
    for l in 0..cfg.n_layers {
        attn(&mut v, &format!("dec{l}.self"));
        norm(&mut v, &format!("dec{l}.ln1"));
        attn(&mut v, &format!("dec{l}.cross"));
        norm(&mut v, &format!("dec{l}.ln2"));
        ffn(&mut v, &format!("dec{l}.ffn"));
        norm(&mut v, &format!("dec{l}.ln3"));
    }
    v
}
