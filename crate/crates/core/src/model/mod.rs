//! Encoder-decoder translator: multibranch transformer encoder with a
//! segmentation stitch, a length predictor and either a parallel (NAT) or a
//! causal (AT) decoder.

mod accounting;
pub mod checkpoint;
mod config;
mod layers;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use accounting::{count_ffn_multadds, ffn_weight_counts};
pub use config::{ModelConfig, ModelKind, SegPlacement};
pub use layers::{param_shapes, sinusoidal_table, ParamStore};

pub(crate) use layers::Bound;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::guard::{guard, unguard, PatternSet};
use crate::text::{self, detokenize, preprocess, Lexicon, SegmentedSentence, Vocab, BOS, EOS, PAD, REP_TOKEN};

/// Encoder output for one sentence.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// `[S × d_model]`.
    pub states: Tensor,
    /// `true` at real (non-padding) positions.
    pub mask: Vec<bool>,
    /// `[1 × d_model]` mean over unpadded rows.
    pub pooled: Tensor,
    pub flags: Vec<u8>,
    /// Input was longer than `max_len` and was cut.
    pub truncated: bool,
}

impl EncoderState {
    pub fn src_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// `[T × vocab]`.
    pub logits: Tensor,
    /// `[T × S]`, averaged over heads and branches of the last layer.
    pub cross_attention: Tensor,
    pub predicted_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationResult {
    pub text: String,
    /// Output token ids after post-processing.
    pub ids: Vec<u32>,
    pub predicted_length: usize,
    pub cross_attention: Option<Tensor>,
    pub truncated: bool,
}

impl TranslationResult {
    fn passthrough(text: String) -> Self {
        TranslationResult {
            text,
            ids: Vec::new(),
            predicted_length: 0,
            cross_attention: None,
            truncated: false,
        }
    }
}

/// Graph handles for an encoded sentence.
pub(crate) struct EncVars {
    pub states: Var,
    pub pooled: Var,
    pub mask: Vec<bool>,
    pub flags: Vec<u8>,
}

pub(crate) struct DecVars {
    pub logits: Var,
    pub cross_attention: Option<Var>,
}

/// Trained or freshly initialized translator with its vocabulary and
/// segmentation lexicon.
#[derive(Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pos_table: Tensor,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.config.kind)
            .field("d_model", &self.config.d_model)
            .field("n_branches", &self.config.n_branches)
            .field("vocab", &self.vocab.len())
            .field("parameters", &self.params.scalar_count())
            .finish()
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Merges runs of identical adjacent tokens.
pub fn collapse_repeats(ids: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(ids.len());
    for &i in ids {
        if out.last() != Some(&i) {
            out.push(i);
        }
    }
    out
}

/// Target length from length-offset logits: `clamp(src_len + Δ, 1, max_len)`
/// with `Δ = argmax − K`. Ties prefer the smaller `|Δ|`, then the smaller `Δ`.
pub fn length_from_logits(logits: &[f64], src_len: usize, k: usize, max_len: usize) -> usize {
    let mut best = 0;
    for c in 1..logits.len() {
        let (dc, db) = (c as i64 - k as i64, best as i64 - k as i64);
        let better = logits[c] > logits[best] || (logits[c] == logits[best] && (dc.abs(), dc) < (db.abs(), db));
        if better {
            best = c;
        }
    }
    let delta = best as i64 - k as i64;
    (src_len as i64 + delta).clamp(1, max_len.max(1) as i64) as usize
}

/// Source position copied into each of `t_len` decoder slots.
pub fn uniform_copy_indices(mask: &[bool], t_len: usize) -> Vec<usize> {
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let s = valid.len();
    (0..t_len).map(|t| valid[t * s / t_len]).collect()
}

fn argmax_rows(t: &Tensor) -> Vec<u32> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

impl Model {
    /// Random initialization. `config.vocab_size` is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, lexicon: Lexicon, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if name == "tok_emb" {
                uniform(&mut rng, n, (3.0 / d as f64).sqrt())
            } else if name == "seg_emb" {
                uniform(&mut rng, n, 1.0)
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                uniform(&mut rng, n, limit)
            } else {
                vec![0.0; n]
            };
            entries.push((name, Tensor::new(shape, data)?));
        }
        let params = ParamStore::from_entries(entries)?;
        Self::from_parts(config, params, vocab, lexicon)
    }

    /// Assembles a model from stored parts, checking every parameter shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore, vocab: Vocab, lexicon: Lexicon) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "config vocab_size {} but vocabulary has {} entries",
                config.vocab_size,
                vocab.len()
            )));
        }
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {:?}, config expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => return Err(Error::config(format!("parameter `{name}` missing"))),
            }
        }
        let pos_table = sinusoidal_table(config.max_len + 1, config.d_model);
        Ok(Model {
            config,
            params,
            vocab,
            lexicon,
            pos_table,
        })
    }

    fn seg_on_encoder(&self) -> bool {
        self.config.kind == ModelKind::At || self.config.seg_placement == SegPlacement::Encoder
    }

    fn embed(&self, g: &mut Graph<'_>, p: &Bound, ids: &[u32]) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::dim(format!("token id {bad} outside vocabulary")));
        }
        let e = g.gather_rows(p.get("tok_emb"), &idx)?;
        Ok(g.scale(e, (self.config.d_model as f64).sqrt()))
    }

    fn stitch(&self, g: &mut Graph<'_>, p: &Bound, x: Var, flags: &[u8]) -> Result<Var> {
        let fi: Vec<usize> = flags.iter().map(|&f| (f != 0) as usize).collect();
        let seg = g.gather_rows(p.get("seg_emb"), &fi)?;
        let cat = g.concat_cols(&[x, seg])?;
        layers::linear(g, p, cat, "stitch.w", "stitch.b")
    }

    fn add_positions<'a>(&'a self, g: &mut Graph<'a>, x: Var, len: usize) -> Result<Var> {
        if len > self.pos_table.rows() {
            return Err(Error::dim(format!(
                "length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let table = g.frozen(&self.pos_table);
        let idx: Vec<usize> = (0..len).collect();
        let pe = g.gather_rows(table, &idx)?;
        g.add(x, pe)
    }

    pub(crate) fn encode_vars<'a>(
        &'a self,
        g: &mut Graph<'a>,
        p: &Bound,
        ids: &[u32],
        flags: &[u8],
    ) -> Result<EncVars> {
        if ids.len() != flags.len() {
            return Err(Error::dim(format!(
                "{} tokens but {} boundary flags",
                ids.len(),
                flags.len()
            )));
        }
        let mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyInput("sentence has no unpadded positions".into()));
        }
        let cfg = &self.config;
        let mut x = self.embed(g, p, ids)?;
        if self.seg_on_encoder() {
            x = self.stitch(g, p, x, flags)?;
        }
        x = self.add_positions(g, x, ids.len())?;
        for l in 0..cfg.n_layers {
            let (a, _) =
                layers::multibranch_attention(g, p, cfg, &format!("enc{l}.self"), x, x, Some(&mask), false, false)?;
            x = layers::add_norm(g, p, &format!("enc{l}.ln1"), x, a)?;
            let f = layers::multibranch_ffn(g, p, cfg, &format!("enc{l}.ffn"), x)?;
            x = layers::add_norm(g, p, &format!("enc{l}.ln2"), x, f)?;
        }
        let pooled = g.mean_rows(x, &mask)?;
        Ok(EncVars {
            states: x,
            pooled,
            mask,
            flags: flags.to_vec(),
        })
    }

    pub(crate) fn length_logits_var(&self, g: &mut Graph<'_>, p: &Bound, pooled: Var) -> Result<Var> {
        if self.config.kind != ModelKind::Nat {
            return Err(Error::config("length prediction needs a NAT model"));
        }
        layers::linear(g, p, pooled, "len.w", "len.b")
    }

    /// Uniform-copy decoder inputs, optionally with reference embeddings
    /// substituted at `glance` positions.
    pub(crate) fn nat_inputs_var<'a>(
        &'a self,
        g: &mut Graph<'a>,
        p: &Bound,
        enc: &EncVars,
        t_len: usize,
        glance: Option<(&[u32], &[bool])>,
    ) -> Result<Var> {
        if t_len == 0 || t_len > self.config.max_len {
            return Err(Error::dim(format!(
                "target length {t_len} outside 1..={}",
                self.config.max_len
            )));
        }
        let idx = uniform_copy_indices(&enc.mask, t_len);
        let mut x = g.gather_rows(enc.states, &idx)?;
        if let Some((reference, take)) = glance {
            if reference.len() != t_len || take.len() != t_len {
                return Err(Error::dim("glancing reference and mask must match the target length"));
            }
            if take.iter().any(|&t| t) {
                let e = self.embed(g, p, reference)?;
                x = g.select_rows(x, e, take)?;
            }
        }
        if !self.seg_on_encoder() {
            let flags: Vec<u8> = idx.iter().map(|&i| enc.flags[i]).collect();
            x = self.stitch(g, p, x, &flags)?;
        }
        self.add_positions(g, x, t_len)
    }

    /// Inputs for the causal decoder: `⟨bos⟩` followed by `prefix`.
    pub(crate) fn at_inputs_var<'a>(&'a self, g: &mut Graph<'a>, p: &Bound, prefix: &[u32]) -> Result<Var> {
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(prefix);
        if ids.len() > self.config.max_len + 1 {
            return Err(Error::dim(format!(
                "decoder prefix longer than max_len {}",
                self.config.max_len
            )));
        }
        let x = self.embed(g, p, &ids)?;
        self.add_positions(g, x, ids.len())
    }

    pub(crate) fn decode_vars(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        dec_in: Var,
        states: Var,
        src_mask: &[bool],
        want_attention: bool,
    ) -> Result<DecVars> {
        let cfg = &self.config;
        let causal = cfg.kind == ModelKind::At;
        let mut x = dec_in;
        let mut cross = None;
        for l in 0..cfg.n_layers {
            let (a, _) = layers::multibranch_attention(g, p, cfg, &format!("dec{l}.self"), x, x, None, causal, false)?;
            x = layers::add_norm(g, p, &format!("dec{l}.ln1"), x, a)?;
            let last = l + 1 == cfg.n_layers;
            let (c, w) = layers::multibranch_attention(
                g,
                p,
                cfg,
                &format!("dec{l}.cross"),
                x,
                states,
                Some(src_mask),
                false,
                last && want_attention,
            )?;
            if last && want_attention {
                cross = Some(layers::average(g, &w)?);
            }
            x = layers::add_norm(g, p, &format!("dec{l}.ln2"), x, c)?;
            let f = layers::multibranch_ffn(g, p, cfg, &format!("dec{l}.ffn"), x)?;
            x = layers::add_norm(g, p, &format!("dec{l}.ln3"), x, f)?;
        }
        let logits = g.matmul_nt(x, p.get("tok_emb"))?;
        let logits = g.add_row(logits, p.get("out_bias"))?;
        Ok(DecVars {
            logits,
            cross_attention: cross,
        })
    }

    /// Encodes one sentence. Inputs longer than `max_len` are truncated and
    /// flagged.
    pub fn encode(&self, sentence: &SegmentedSentence) -> Result<EncoderState> {
        if sentence.tokens.ids.len() != sentence.boundary_flags.len() {
            return Err(Error::dim("token and flag counts differ"));
        }
        let truncated = sentence.len() > self.config.max_len;
        let n = sentence.len().min(self.config.max_len);
        let ids = &sentence.tokens.ids[..n];
        let flags = &sentence.boundary_flags[..n];
        let mut g = Graph::inference();
        let p = Bound::bind(&mut g, &self.params, false);
        let e = self.encode_vars(&mut g, &p, ids, flags)?;
        Ok(EncoderState {
            states: g.value(e.states).clone(),
            pooled: g.value(e.pooled).clone(),
            mask: e.mask,
            flags: e.flags,
            truncated,
        })
    }

    fn enc_vars_from_state<'a>(&self, g: &mut Graph<'a>, enc: &'a EncoderState) -> EncVars {
        EncVars {
            states: g.frozen(&enc.states),
            pooled: g.frozen(&enc.pooled),
            mask: enc.mask.clone(),
            flags: enc.flags.clone(),
        }
    }

    /// Length-offset logits over `[-K, K]`.
    pub fn length_logits(&self, enc: &EncoderState) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let p = Bound::bind(&mut g, &self.params, false);
        let pooled = g.frozen(&enc.pooled);
        let l = self.length_logits_var(&mut g, &p, pooled)?;
        Ok(g.value(l).data().to_vec())
    }

    pub fn predict_length(&self, enc: &EncoderState) -> Result<usize> {
        let logits = self.length_logits(enc)?;
        Ok(length_from_logits(
            &logits,
            enc.src_len(),
            self.config.length_offset_range,
            self.config.max_len,
        ))
    }

    /// `[T × d_model]` uniform-copy decoder inputs with positional encoding.
    pub fn init_decoder_inputs(&self, enc: &EncoderState, tgt_len: usize) -> Result<Tensor> {
        if self.config.kind != ModelKind::Nat {
            return Err(Error::config("uniform-copy inputs belong to the NAT decoder"));
        }
        let mut g = Graph::inference();
        let p = Bound::bind(&mut g, &self.params, false);
        let e = self.enc_vars_from_state(&mut g, enc);
        let x = self.nat_inputs_var(&mut g, &p, &e, tgt_len, None)?;
        Ok(g.value(x).clone())
    }

    /// One decoder pass over prepared inputs. For an AT model the inputs are
    /// the embedded, position-encoded prefix and the pass is causal.
    pub fn decode_parallel(&self, dec_inputs: &Tensor, enc: &EncoderState) -> Result<DecodeOutput> {
        if dec_inputs.shape().len() != 2 || dec_inputs.cols() != self.config.d_model {
            return Err(Error::dim(format!(
                "decoder inputs {:?} do not have width {}",
                dec_inputs.shape(),
                self.config.d_model
            )));
        }
        let mut g = Graph::inference();
        let p = Bound::bind(&mut g, &self.params, false);
        let e = self.enc_vars_from_state(&mut g, enc);
        let x = g.frozen(dec_inputs);
        let out = self.decode_vars(&mut g, &p, x, e.states, &e.mask, true)?;
        let logits = g.value(out.logits).clone();
        let cross_attention = g.value(out.cross_attention.expect("requested")).clone();
        let predicted_ids = argmax_rows(&logits);
        Ok(DecodeOutput {
            logits,
            cross_attention,
            predicted_ids,
        })
    }

    /// Runs one attention sublayer, such as `enc0.self` or `dec0.cross`, on
    /// plain inputs. Returns the output and every head's weights.
    pub fn attention(
        &self,
        prefix: &str,
        queries: &Tensor,
        keys: &Tensor,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if self.params.get(&format!("{prefix}.wo")).is_none() {
            return Err(Error::config(format!("no attention sublayer `{prefix}`")));
        }
        let mut g = Graph::inference();
        let p = Bound::bind(&mut g, &self.params, false);
        let q = g.constant(queries.clone());
        let kv = if std::ptr::eq(queries, keys) {
            q
        } else {
            g.constant(keys.clone())
        };
        let (out, w) = layers::multibranch_attention(&mut g, &p, &self.config, prefix, q, kv, key_mask, causal, true)?;
        Ok((g.value(out).clone(), w.iter().map(|&v| g.value(v).clone()).collect()))
    }

    /// Teacher-forced logits of the causal decoder for `⟨bos⟩ + prefix`.
    pub fn at_logits(&self, enc: &EncoderState, prefix: &[u32]) -> Result<Tensor> {
        if self.config.kind != ModelKind::At {
            return Err(Error::config("at_logits needs an AT model"));
        }
        let mut g = Graph::inference();
        let p = Bound::bind(&mut g, &self.params, false);
        let e = self.enc_vars_from_state(&mut g, enc);
        let x = self.at_inputs_var(&mut g, &p, prefix)?;
        let out = self.decode_vars(&mut g, &p, x, e.states, &e.mask, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Greedy left-to-right decoding. Stops at `⟨eos⟩` or after `max_len`
    /// tokens; each step reruns the decoder over the whole prefix.
    pub fn decode_greedy(&self, enc: &EncoderState, max_len: usize) -> Result<Vec<u32>> {
        self.decode_greedy_impl(enc, max_len, true)
    }

    /// Greedy decoding that ignores `⟨eos⟩` and always emits `len` tokens.
    pub fn decode_greedy_fixed(&self, enc: &EncoderState, len: usize) -> Result<Vec<u32>> {
        self.decode_greedy_impl(enc, len, false)
    }

    fn decode_greedy_impl(&self, enc: &EncoderState, max_len: usize, stop: bool) -> Result<Vec<u32>> {
        let max_len = max_len.min(self.config.max_len);
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let logits = self.at_logits(enc, &out)?;
            let last = logits.rows() - 1;
            let row = logits.row(last);
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if !stop && j as u32 == EOS {
                    continue;
                }
                if best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            let tok = best.unwrap_or(0) as u32;
            if stop && tok == EOS {
                break;
            }
            out.push(tok);
        }
        Ok(out)
    }

    /// NAT decoding of an encoded sentence at a predicted or forced length.
    /// Returns raw argmax ids (no collapse) and the decoder output.
    pub fn decode_nat(&self, enc: &EncoderState, forced_len: Option<usize>) -> Result<DecodeOutput> {
        let t = match forced_len {
            Some(t) => t,
            None => self.predict_length(enc)?,
        };
        let inputs = self.init_decoder_inputs(enc, t)?;
        self.decode_parallel(&inputs, enc)
    }

    /// Output ids for a segmented sentence, post-processed as in
    /// [`Model::translate`].
    pub fn translate_sentence(&self, sentence: &SegmentedSentence) -> Result<Vec<u32>> {
        Ok(self.translate_sentence_full(sentence)?.0)
    }

    fn translate_sentence_full(&self, sentence: &SegmentedSentence) -> Result<(Vec<u32>, usize, Option<Tensor>, bool)> {
        let enc = self.encode(sentence)?;
        match self.config.kind {
            ModelKind::Nat => {
                let out = self.decode_nat(&enc, None)?;
                let t = out.predicted_ids.len();
                let ids = if self.config.collapse_repeats {
                    collapse_repeats(&out.predicted_ids)
                } else {
                    out.predicted_ids
                };
                Ok((ids, t, Some(out.cross_attention), enc.truncated))
            }
            ModelKind::At => {
                let cap = (2 * enc.src_len() + 10).min(self.config.max_len);
                let ids = self.decode_greedy(&enc, cap)?;
                let n = ids.len();
                Ok((ids, n, None, enc.truncated))
            }
        }
    }

    /// Full text translation: guard, preprocess, segment, decode, detokenize,
    /// unguard. Text with nothing to translate besides guarded spans comes
    /// back unchanged.
    pub fn translate(&self, input: &str, patterns: &PatternSet) -> Result<TranslationResult> {
        let g = guard(input, patterns);
        let mut r = self.translate_guarded(&g.guarded)?;
        if !r.text.is_empty() || !g.originals.is_empty() {
            r.text = unguard(&r.text, &g);
        }
        Ok(r)
    }

    /// Translates text whose protected spans are already `⟨rep⟩` markers.
    /// Markers in the output are left in place.
    pub fn translate_guarded(&self, guarded: &str) -> Result<TranslationResult> {
        let cleaned = preprocess(guarded);
        if cleaned.replace(REP_TOKEN, "").trim().is_empty() {
            return Ok(TranslationResult::passthrough(cleaned.trim().to_string()));
        }
        let sentence = SegmentedSentence::new(&cleaned, &self.vocab, &self.lexicon);
        let (ids, predicted_length, cross_attention, truncated) = self.translate_sentence_full(&sentence)?;
        Ok(TranslationResult {
            text: detokenize(&ids, &self.vocab),
            ids,
            predicted_length,
            cross_attention,
            truncated,
        })
    }

    /// Segments `text` with this model's lexicon.
    pub fn segment(&self, text: &str) -> SegmentedSentence {
        SegmentedSentence::new(text, &self.vocab, &self.lexicon)
    }

    /// Character count of a token sequence as emitted text.
    pub fn output_chars(&self, ids: &[u32]) -> usize {
        text::unit_count(&detokenize(ids, &self.vocab))
    }
}

#[cfg(test)]
mod tests;
