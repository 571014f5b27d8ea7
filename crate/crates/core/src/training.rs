//! Two-pass glancing training for the NAT model, teacher-forced training for
//! the AT baseline, and the shared run loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::{word_to_char_alignment, CharAlignmentMatrix, WordAlignment, WordPair};
use crate::autodiff::{clip_global_norm, Graph, Optimizer, Tensor, Var};
use crate::corpus::joined;
use crate::error::{Error, Result};
use crate::eval::model_bleu;
use crate::model::{length_from_logits, Bound, EncoderState, Model, ModelKind};
use crate::text::{tokenize, SegmentedSentence, EOS};

/// One training pair in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: SegmentedSentence,
    pub tgt: Vec<u32>,
    pub alignment: Option<CharAlignmentMatrix>,
}

/// Converts word pairs to examples using the model's vocabulary and lexicon.
/// Pairs with an empty side or longer than `max_len` are skipped; the second
/// value counts them.
pub fn prepare_examples(
    model: &Model,
    pairs: &[WordPair],
    alignments: Option<&[WordAlignment]>,
) -> Result<(Vec<Example>, usize)> {
    if let Some(a) = alignments {
        if a.len() != pairs.len() {
            return Err(Error::dim(format!("{} alignments for {} pairs", a.len(), pairs.len())));
        }
    }
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (k, (s, t)) in pairs.iter().enumerate() {
        let src = model.segment(&joined(s));
        let tgt = tokenize(&joined(t), &model.vocab).ids;
        let max = model.config.max_len;
        if src.is_empty() || tgt.is_empty() || src.len() > max || tgt.len() > max {
            skipped += 1;
            continue;
        }
        let alignment = match alignments {
            Some(a) => Some(word_to_char_alignment(&a[k], s, t)?),
            None => None,
        };
        out.push(Example { src, tgt, alignment });
    }
    Ok((out, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlancingSchedule {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub total_steps: usize,
}

impl GlancingSchedule {
    pub fn new(lambda_start: f64, lambda_end: f64, total_steps: usize) -> Result<Self> {
        if !(0.0 <= lambda_end && lambda_end <= lambda_start && lambda_start <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= lambda_end ({lambda_end}) <= lambda_start ({lambda_start}) <= 1"
            )));
        }
        Ok(GlancingSchedule {
            lambda_start,
            lambda_end,
            total_steps,
        })
    }

    /// Linear from `lambda_start` at step 0 to `lambda_end` at `total_steps`.
    pub fn lambda(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lambda_end;
        }
        let f = (step as f64 / self.total_steps as f64).min(1.0);
        self.lambda_start + (self.lambda_end - self.lambda_start) * f
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub token: f64,
    pub length: f64,
    pub alignment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            token: 1.0,
            length: 0.1,
            alignment: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.token, self.length, self.alignment]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Positions drawn uniformly from the whole target.
    Uniform,
    /// Positions drawn from the mispredicted ones only.
    ErrorWeighted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub sampling: SamplingMode,
    /// Leave unlinked target rows out of the alignment loss.
    pub mask_null_rows: bool,
    /// Learning rate is multiplied by this factor every epoch from
    /// `decay_start` on.
    pub lr_decay: f64,
    pub decay_start: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.1,
            optimizer: OptimizerKind::Sgd,
            clip_norm: 1.0,
            lambda_start: 0.5,
            lambda_end: 0.3,
            weights: LossWeights::default(),
            seed: 1,
            sampling: SamplingMode::Uniform,
            mask_null_rows: false,
            lr_decay: 1.0,
            decay_start: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.lr_decay.is_nan() || self.lr_decay <= 0.0 {
            return Err(Error::config("lr_decay must be positive"));
        }
        self.weights.validate()?;
        GlancingSchedule::new(self.lambda_start, self.lambda_end, 0)?;
        Ok(())
    }

    /// Overrides fields from recognized keys of a run config.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn f(k: &str, v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::config(format!("`{k}` expects a number, got `{v}`")))
        }
        fn u(k: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("`{k}` expects an integer, got `{v}`")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "epochs" => self.epochs = u(k, v)?,
                "batch_size" => self.batch_size = u(k, v)?,
                "learning_rate" => self.learning_rate = f(k, v)?,
                "optimizer" => {
                    self.optimizer = match v.as_str() {
                        "sgd" => OptimizerKind::Sgd,
                        "adam" => OptimizerKind::Adam,
                        _ => return Err(Error::config(format!("unknown optimizer `{v}`"))),
                    }
                }
                "clip_norm" => self.clip_norm = f(k, v)?,
                "lambda_start" => self.lambda_start = f(k, v)?,
                "lambda_end" => self.lambda_end = f(k, v)?,
                "token_weight" => self.weights.token = f(k, v)?,
                "length_weight" => self.weights.length = f(k, v)?,
                "alignment_weight" => self.weights.alignment = f(k, v)?,
                "seed" => {
                    self.seed = v
                        .parse()
                        .map_err(|_| Error::config(format!("`seed` expects an integer, got `{v}`")))?
                }
                "sampling" => {
                    self.sampling = match v.as_str() {
                        "uniform" => SamplingMode::Uniform,
                        "error" | "error_weighted" => SamplingMode::ErrorWeighted,
                        _ => return Err(Error::config(format!("unknown sampling mode `{v}`"))),
                    }
                }
                "mask_null_rows" => {
                    self.mask_null_rows = v
                        .parse()
                        .map_err(|_| Error::config("`mask_null_rows` expects true/false"))?
                }
                "lr_decay" => self.lr_decay = f(k, v)?,
                "decay_start" => self.decay_start = u(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("learning_rate".into(), self.learning_rate.to_string());
        m.insert(
            "optimizer".into(),
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .into(),
        );
        m.insert("clip_norm".into(), self.clip_norm.to_string());
        m.insert("lambda_start".into(), self.lambda_start.to_string());
        m.insert("lambda_end".into(), self.lambda_end.to_string());
        m.insert("token_weight".into(), self.weights.token.to_string());
        m.insert("length_weight".into(), self.weights.length.to_string());
        m.insert("alignment_weight".into(), self.weights.alignment.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert(
            "sampling".into(),
            match self.sampling {
                SamplingMode::Uniform => "uniform",
                SamplingMode::ErrorWeighted => "error_weighted",
            }
            .into(),
        );
        m.insert("mask_null_rows".into(), self.mask_null_rows.to_string());
        m.insert("lr_decay".into(), self.lr_decay.to_string());
        m.insert("decay_start".into(), self.decay_start.to_string());
        m
    }
}

/// Number of positions to reveal: `floor(λ · hamming)`.
pub fn glance_count(lambda: f64, hamming: usize) -> usize {
    // The small offset absorbs representation error in products such as 0.29 · 100.
    (lambda * hamming as f64 + 1e-9).floor() as usize
}

/// Chooses `floor(λ · Hamming(pred, reference))` positions uniformly
/// without replacement from all target positions.
pub fn sample_glancing_positions<R: Rng + ?Sized>(
    first_pass_pred: &[u32],
    reference: &[u32],
    lambda: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    sample_positions(first_pass_pred, reference, lambda, SamplingMode::Uniform, rng)
}

pub fn sample_positions<R: Rng + ?Sized>(
    pred: &[u32],
    reference: &[u32],
    lambda: f64,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if pred.len() != reference.len() {
        return Err(Error::dim(format!(
            "prediction length {} differs from reference length {}",
            pred.len(),
            reference.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    let wrong: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] != reference[i]).collect();
    let n = glance_count(lambda, wrong.len());
    let mut mask = vec![false; pred.len()];
    match mode {
        SamplingMode::Uniform => {
            for i in rand::seq::index::sample(rng, pred.len(), n) {
                mask[i] = true;
            }
        }
        SamplingMode::ErrorWeighted => {
            for i in rand::seq::index::sample(rng, wrong.len(), n) {
                mask[wrong[i]] = true;
            }
        }
    }
    Ok(mask)
}

/// Mean loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub token: f64,
    pub length: f64,
    pub alignment: f64,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub losses: StepLosses,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Vec<f64>>,
    pub glance_masks: Vec<Vec<bool>>,
    /// Examples whose predicted length equals the gold length.
    pub length_correct: usize,
}

struct ExampleVars {
    total: Var,
    token: Option<Var>,
    length: Option<Var>,
    alignment: Option<Var>,
    logits: Var,
    length_correct: bool,
}

#[allow(clippy::too_many_arguments)]
fn nat_example<'a, F>(
    g: &mut Graph<'a>,
    p: &Bound,
    model: &'a Model,
    ex: &Example,
    weights: &LossWeights,
    mask_null_rows: bool,
    choose: &mut F,
) -> Result<(ExampleVars, Vec<bool>)>
where
    F: FnMut(&Model, &Example, &EncoderState) -> Result<Vec<bool>>,
{
    let cfg = &model.config;
    let t_len = ex.tgt.len();
    let enc = model.encode_vars(g, p, &ex.src.tokens.ids, &ex.src.boundary_flags)?;
    let snapshot = EncoderState {
        states: g.value(enc.states).clone(),
        pooled: g.value(enc.pooled).clone(),
        mask: enc.mask.clone(),
        flags: enc.flags.clone(),
        truncated: false,
    };
    let glance = choose(model, ex, &snapshot)?;
    if glance.len() != t_len {
        return Err(Error::dim("glancing mask length differs from the target"));
    }
    let x = model.nat_inputs_var(g, p, &enc, t_len, Some((&ex.tgt, &glance)))?;
    let want_attention = weights.alignment > 0.0;
    let out = model.decode_vars(g, p, x, enc.states, &enc.mask, want_attention)?;
    let targets: Vec<usize> = ex.tgt.iter().map(|&t| t as usize).collect();
    let mut terms = Vec::new();
    let token = if glance.iter().all(|&m| m) {
        None
    } else {
        let l = g.cross_entropy(out.logits, &targets, &glance)?;
        terms.push(g.scale(l, weights.token));
        Some(l)
    };
    let len_logits = model.length_logits_var(g, p, enc.pooled)?;
    let src_len = snapshot.src_len();
    let k = cfg.length_offset_range as i64;
    let class = ((t_len as i64 - src_len as i64).clamp(-k, k) + k) as usize;
    let length_correct = length_from_logits(
        g.value(len_logits).data(),
        src_len,
        cfg.length_offset_range,
        cfg.max_len,
    ) == t_len;
    let length = g.cross_entropy(len_logits, &[class], &[false])?;
    terms.push(g.scale(length, weights.length));
    let alignment = if want_attention {
        let a = ex
            .alignment
            .as_ref()
            .ok_or_else(|| Error::config("alignment weight is positive but the example has no alignment target"))?;
        let att = out.cross_attention.expect("requested");
        let shape = g.value(att).shape().to_vec();
        if shape != [a.rows, a.cols] {
            return Err(Error::dim(format!(
                "alignment target is {}x{} but cross-attention is {:?}",
                a.rows, a.cols, shape
            )));
        }
        let target = g.constant(a.to_tensor());
        let l = if mask_null_rows {
            let mask = a.linked_row_mask();
            if mask.iter().any(|&m| m) {
                Some(g.mse_loss_masked(att, target, &mask)?)
            } else {
                None
            }
        } else {
            Some(g.mse_loss(att, target)?)
        };
        if let Some(l) = l {
            terms.push(g.scale(l, weights.alignment));
        }
        l
    } else {
        None
    };
    let total = g.sum(&terms)?;
    Ok((
        ExampleVars {
            total,
            token,
            length: Some(length),
            alignment,
            logits: out.logits,
            length_correct,
        },
        glance,
    ))
}

fn at_example<'a>(g: &mut Graph<'a>, p: &Bound, model: &'a Model, ex: &Example) -> Result<ExampleVars> {
    let enc = model.encode_vars(g, p, &ex.src.tokens.ids, &ex.src.boundary_flags)?;
    let x = model.at_inputs_var(g, p, &ex.tgt)?;
    let out = model.decode_vars(g, p, x, enc.states, &enc.mask, false)?;
    let mut targets: Vec<usize> = ex.tgt.iter().map(|&t| t as usize).collect();
    targets.push(EOS as usize);
    let ignore = vec![false; targets.len()];
    let token = g.cross_entropy(out.logits, &targets, &ignore)?;
    Ok(ExampleVars {
        total: token,
        token: Some(token),
        length: None,
        alignment: None,
        logits: out.logits,
        length_correct: false,
    })
}

fn run_batch<F>(
    model: &Model,
    batch: &[Example],
    weights: &LossWeights,
    mask_null_rows: bool,
    mut choose: F,
) -> Result<BatchResult>
where
    F: FnMut(&Model, &Example, &EncoderState) -> Result<Vec<bool>>,
{
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    weights.validate()?;
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &model.params, true);
    let mut totals = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    let mut sums = StepLosses::default();
    let mut length_correct = 0;
    for ex in batch {
        let vars = match model.config.kind {
            ModelKind::Nat => {
                let (v, m) = nat_example(&mut g, &p, model, ex, weights, mask_null_rows, &mut choose)?;
                masks.push(m);
                v
            }
            ModelKind::At => {
                masks.push(vec![false; ex.tgt.len()]);
                at_example(&mut g, &p, model, ex)?
            }
        };
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        sums.token += val(vars.token);
        sums.length += val(vars.length);
        sums.alignment += val(vars.alignment);
        length_correct += usize::from(vars.length_correct);
        totals.push(vars.total);
    }
    let sum = g.sum(&totals)?;
    let loss = g.scale(sum, 1.0 / batch.len() as f64);
    let b = batch.len() as f64;
    let losses = StepLosses {
        total: g.value(loss).item(),
        token: sums.token / b,
        length: sums.length / b,
        alignment: sums.alignment / b,
    };
    g.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();
    Ok(BatchResult {
        losses,
        grads,
        glance_masks: masks,
        length_correct,
    })
}

/// First-pass predictions at the gold length, computed without recording.
pub fn first_pass(model: &Model, enc: &EncoderState, tgt_len: usize) -> Result<Vec<u32>> {
    Ok(model.decode_nat(enc, Some(tgt_len))?.predicted_ids)
}

/// One glancing step: pass 1 without gradients, position sampling, pass 2
/// with reference embeddings at the sampled positions, and the weighted
/// token, length and alignment losses averaged over the batch.
pub fn glancing_step<R: Rng + ?Sized>(
    model: &Model,
    batch: &[Example],
    lambda: f64,
    weights: &LossWeights,
    sampling: SamplingMode,
    mask_null_rows: bool,
    rng: &mut R,
) -> Result<BatchResult> {
    run_batch(model, batch, weights, mask_null_rows, |m, ex, enc| {
        let pred = first_pass(m, enc, ex.tgt.len())?;
        sample_positions(&pred, &ex.tgt, lambda, sampling, rng)
    })
}

/// Gradients of the batch loss for fixed glancing masks.
pub fn batch_gradients(
    model: &Model,
    batch: &[Example],
    glance_masks: &[Vec<bool>],
    weights: &LossWeights,
    mask_null_rows: bool,
) -> Result<BatchResult> {
    if glance_masks.len() != batch.len() {
        return Err(Error::dim("one glancing mask per example is required"));
    }
    let mut k = 0;
    run_batch(model, batch, weights, mask_null_rows, |_, _, _| {
        k += 1;
        Ok(glance_masks[k - 1].clone())
    })
}

/// Gradient of the token loss with respect to the logits of one example under
/// a fixed glancing mask, `[T × vocab]`. `None` when every position is masked.
pub fn token_loss_logit_grad(model: &Model, ex: &Example, glance_mask: &[bool]) -> Result<Option<Tensor>> {
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &model.params, true);
    let weights = LossWeights {
        token: 1.0,
        length: 0.0,
        alignment: 0.0,
    };
    let mask = glance_mask.to_vec();
    let (vars, _) = nat_example(&mut g, &p, model, ex, &weights, false, &mut |_, _, _| Ok(mask.clone()))?;
    let Some(token) = vars.token else {
        return Ok(None);
    };
    g.backward(token)?;
    let shape = g.value(vars.logits).shape().to_vec();
    let grad = g
        .grad(vars.logits)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
    Ok(Some(Tensor::new(shape, grad)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub token_loss: f64,
    pub length_accuracy: f64,
    pub alignment_loss: f64,
    pub valid_bleu: f64,
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
}

impl TrainReport {
    pub const TSV_HEADER: &'static str =
        "epoch\tstep\ttoken_loss\tlength_accuracy\talignment_loss\tvalid_bleu\twall_clock_s";

    pub fn tsv_line(r: &EpochRecord) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.4}\t{:.6}\t{:.4}\t{:.2}",
            r.epoch, r.step, r.token_loss, r.length_accuracy, r.alignment_loss, r.valid_bleu, r.wall_clock
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::TSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{}", Self::tsv_line(r));
        }
        s
    }
}

/// Trains `init` on `train` plus `augmented` (shuffled together). When
/// `valid` is non-empty the parameters with the best validation BLEU are
/// returned, otherwise the final ones. `on_epoch` sees every record as it is
/// produced.
pub fn train(
    init: Model,
    train: &[Example],
    augmented: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let data: Vec<&Example> = train.iter().chain(augmented).collect();
    if data.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    if init.config.kind == ModelKind::Nat && cfg.weights.alignment > 0.0 && data.iter().any(|e| e.alignment.is_none()) {
        return Err(Error::config(
            "alignment weight is positive but some examples have no alignment target",
        ));
    }
    let mut model = init;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((model, report));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = GlancingSchedule::new(cfg.lambda_start, cfg.lambda_end, cfg.epochs * steps_per_epoch)?;
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::sgd(cfg.learning_rate),
        OptimizerKind::Adam => Optimizer::adam(cfg.learning_rate),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x474c_414e);
    let valid_src: Vec<SegmentedSentence> = valid.iter().map(|e| e.src.clone()).collect();
    let valid_ref: Vec<Vec<u32>> = valid.iter().map(|e| e.tgt.clone()).collect();
    let mut best: Option<(f64, Model)> = None;
    let start = Instant::now();
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        if epoch > cfg.decay_start && cfg.lr_decay != 1.0 {
            let e = (epoch - cfg.decay_start) as i32;
            opt.set_lr(cfg.learning_rate * cfg.lr_decay.powi(e));
        }
        order.shuffle(&mut shuffle_rng);
        let (mut tok, mut ali, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let lambda = schedule.lambda(step);
            let res = glancing_step(
                &model,
                &batch,
                lambda,
                &cfg.weights,
                cfg.sampling,
                cfg.mask_null_rows,
                &mut sample_rng,
            );
            let mut res = match res {
                Ok(r) => r,
                Err(Error::Instability(_)) => {
                    return Err(Error::Diverged {
                        step,
                        last_finite: Box::new(model),
                    })
                }
                Err(e) => return Err(e),
            };
            let finite = res.losses.total.is_finite() && res.grads.iter().flatten().all(|x| x.is_finite());
            if !finite {
                return Err(Error::Diverged {
                    step,
                    last_finite: Box::new(model),
                });
            }
            clip_global_norm(&mut res.grads, cfg.clip_norm);
            let before = model.params.clone();
            opt.step(model.params.tensors_mut(), &res.grads)?;
            if !model.params.all_finite() {
                model.params = before;
                return Err(Error::Diverged {
                    step,
                    last_finite: Box::new(model),
                });
            }
            let n = batch.len() as f64;
            tok += res.losses.token * n;
            ali += res.losses.alignment * n;
            correct += res.length_correct;
            step += 1;
        }
        let n = data.len() as f64;
        let valid_bleu = if valid.is_empty() {
            f64::NAN
        } else {
            model_bleu(&model, &valid_src, &valid_ref)?.bleu
        };
        let rec = EpochRecord {
            epoch,
            step,
            token_loss: tok / n,
            length_accuracy: if model.config.kind == ModelKind::Nat {
                correct as f64 / n
            } else {
                f64::NAN
            },
            alignment_loss: ali / n,
            valid_bleu,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        report.epochs.push(rec);
        if !valid.is_empty() && best.as_ref().is_none_or(|(b, _)| valid_bleu > *b) {
            best = Some((valid_bleu, model.clone()));
            report.best_epoch = epoch;
        }
    }
    match best {
        Some((_, m)) => Ok((m, report)),
        None => {
            report.best_epoch = cfg.epochs;
            Ok((model, report))
        }
    }
}

/// Teacher translations of monolingual sentences. Empty translations are
/// dropped.
pub fn augment_corpus(teacher: &Model, mono: &[SegmentedSentence]) -> Result<Vec<(SegmentedSentence, Vec<u32>)>> {
    let mut out = Vec::with_capacity(mono.len());
    for s in mono {
        if s.is_empty() {
            continue;
        }
        let ids = teacher.translate_sentence(s)?;
        if !ids.is_empty() {
            out.push((s.clone(), ids));
        }
    }
    Ok(out)
}
