//! TTS frontend pipeline: guard, translate, unguard, preprocess, text
//! normalization, word segmentation, POS, prosody and G2P. Only the guard,
//! translation and preprocessing stages do real work; the others are
//! deterministic placeholders with the same interface a real component
//! would use.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::guard::{guard, unguard_with_spans, GuardedText, PatternSet};
use crate::model::Model;
use crate::text::{preprocess, segment_greedy, Lexicon};

/// Stage names in default order.
pub const DEFAULT_STAGES: [&str; 9] = [
    "guard",
    "translate",
    "unguard",
    "preprocess",
    "tn",
    "cws",
    "pos",
    "prosody",
    "g2p",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: String,
    pub input: String,
    pub output: String,
}

/// Document passed from stage to stage. `text` is the working text; the
/// other fields hold what individual stages produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrontendDoc {
    pub original: String,
    pub text: String,
    pub guarded: Option<GuardedText>,
    /// Translation with markers still in place.
    pub raw_translation: Option<String>,
    /// Translation with guarded spans restored.
    pub translated: Option<String>,
    /// Byte ranges of restored originals in `text`.
    pub protected: Vec<(usize, usize)>,
    pub normalized: Option<String>,
    pub words: Vec<String>,
    pub pos_tags: Vec<String>,
    pub prosody_breaks: Vec<usize>,
    pub phonemes: Vec<String>,
    pub trace: Vec<TraceEntry>,
}

impl FrontendDoc {
    pub fn new(text: &str) -> Self {
        FrontendDoc {
            original: text.to_string(),
            text: text.to_string(),
            ..Default::default()
        }
    }
}

pub trait Stage: Send + Sync {
    fn name(&self) -> &str;

    /// Stages that must run earlier.
    fn requires(&self) -> &[&'static str] {
        &[]
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()>;
}

pub struct GuardStage {
    pub patterns: PatternSet,
}

impl Stage for GuardStage {
    fn name(&self) -> &str {
        "guard"
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        let g = guard(&doc.text, &self.patterns);
        doc.text = g.guarded.clone();
        doc.guarded = Some(g);
        Ok(())
    }
}

pub struct TranslateStage {
    pub model: Arc<Model>,
}

impl Stage for TranslateStage {
    fn name(&self) -> &str {
        "translate"
    }

    fn requires(&self) -> &[&'static str] {
        &["guard"]
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        let r = self.model.translate_guarded(&doc.text)?;
        doc.text = r.text;
        doc.raw_translation = Some(doc.text.clone());
        Ok(())
    }
}

/// Translation stage that leaves the text unchanged.
pub struct IdentityTranslateStage;

impl Stage for IdentityTranslateStage {
    fn name(&self) -> &str {
        "translate"
    }

    fn requires(&self) -> &[&'static str] {
        &["guard"]
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        doc.raw_translation = Some(doc.text.clone());
        Ok(())
    }
}

pub struct UnguardStage;

impl Stage for UnguardStage {
    fn name(&self) -> &str {
        "unguard"
    }

    fn requires(&self) -> &[&'static str] {
        &["translate"]
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        let g = doc
            .guarded
            .as_ref()
            .ok_or_else(|| Error::config("unguard without a guarded document"))?;
        let r = unguard_with_spans(&doc.text, g);
        doc.text = r.text;
        doc.protected = r.spans;
        doc.translated = Some(doc.text.clone());
        Ok(())
    }
}

/// Unifies character widths and strips control characters everywhere except
/// inside restored originals.
pub struct PreprocessStage;

impl Stage for PreprocessStage {
    fn name(&self) -> &str {
        "preprocess"
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        let mut out = String::with_capacity(doc.text.len());
        let mut spans = Vec::with_capacity(doc.protected.len());
        let mut cursor = 0;
        for &(s, e) in &doc.protected {
            out.push_str(&preprocess(&doc.text[cursor..s]));
            spans.push((out.len(), out.len() + (e - s)));
            out.push_str(&doc.text[s..e]);
            cursor = e;
        }
        out.push_str(&preprocess(&doc.text[cursor..]));
        doc.text = out;
        doc.protected = spans;
        Ok(())
    }
}

/// Text normalization placeholder (identity).
pub struct TnStub;

impl Stage for TnStub {
    fn name(&self) -> &str {
        "tn"
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        doc.normalized = Some(doc.text.clone());
        Ok(())
    }
}

/// Greedy lexicon segmentation; restored originals stay whole words.
pub struct CwsStage {
    pub lexicon: Lexicon,
}

impl Stage for CwsStage {
    fn name(&self) -> &str {
        "cws"
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        let mut words = Vec::new();
        let push_plain = |s: &str, words: &mut Vec<String>| {
            for chunk in s.split_whitespace() {
                words.extend(segment_greedy(chunk, &self.lexicon).words);
            }
        };
        let mut cursor = 0;
        for &(s, e) in &doc.protected {
            push_plain(&doc.text[cursor..s], &mut words);
            words.push(doc.text[s..e].to_string());
            cursor = e;
        }
        push_plain(&doc.text[cursor..], &mut words);
        doc.words = words;
        Ok(())
    }
}

/// Tags every word `X`.
pub struct PosStub;

impl Stage for PosStub {
    fn name(&self) -> &str {
        "pos"
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        doc.pos_tags = vec!["X".to_string(); doc.words.len()];
        Ok(())
    }
}

/// Inserts no prosodic breaks.
pub struct ProsodyStub;

impl Stage for ProsodyStub {
    fn name(&self) -> &str {
        "prosody"
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        doc.prosody_breaks.clear();
        Ok(())
    }
}

/// Maps each non-space character `c` to the placeholder `PH(c)`.
pub struct G2pStub;

impl G2pStub {
    pub fn convert(text: &str) -> Vec<String> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| format!("PH({c})"))
            .collect()
    }
}

impl Stage for G2pStub {
    fn name(&self) -> &str {
        "g2p"
    }

    fn run(&self, doc: &mut FrontendDoc) -> Result<()> {
        doc.phonemes = Self::convert(&doc.text);
        Ok(())
    }
}

/// TN, POS, prosody and G2P placeholders.
pub fn default_stubs() -> Vec<Box<dyn Stage>> {
    vec![
        Box::new(TnStub),
        Box::new(PosStub),
        Box::new(ProsodyStub),
        Box::new(G2pStub),
    ]
}

/// What named stages are built from.
#[derive(Clone, Default)]
pub struct StageContext {
    /// Used by `translate`; without a model the stage is the identity.
    pub model: Option<Arc<Model>>,
    pub patterns: PatternSet,
    pub lexicon: Lexicon,
}

pub fn stage_by_name(name: &str, ctx: &StageContext) -> Result<Box<dyn Stage>> {
    Ok(match name {
        "guard" => Box::new(GuardStage {
            patterns: ctx.patterns.clone(),
        }),
        "translate" => match &ctx.model {
            Some(m) => Box::new(TranslateStage { model: m.clone() }),
            None => Box::new(IdentityTranslateStage),
        },
        "identity" => Box::new(IdentityTranslateStage),
        "unguard" => Box::new(UnguardStage),
        "preprocess" => Box::new(PreprocessStage),
        "tn" => Box::new(TnStub),
        "cws" => Box::new(CwsStage {
            lexicon: ctx.lexicon.clone(),
        }),
        "pos" => Box::new(PosStub),
        "prosody" => Box::new(ProsodyStub),
        "g2p" => Box::new(G2pStub),
        other => return Err(Error::config(format!("unknown pipeline stage `{other}`"))),
    })
}

/// Ordered, dependency-checked stage list.
pub struct Pipeline {
    stages: Vec<Box<dyn Stage>>,
}

impl Pipeline {
    pub fn new(stages: Vec<Box<dyn Stage>>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("pipeline needs at least one stage"));
        }
        for (i, s) in stages.iter().enumerate() {
            for &dep in s.requires() {
                if !stages[..i].iter().any(|p| p.name() == dep) {
                    return Err(Error::config(format!(
                        "stage `{}` requires `{dep}` to run before it",
                        s.name()
                    )));
                }
            }
        }
        Ok(Pipeline { stages })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S], ctx: &StageContext) -> Result<Self> {
        let stages = names
            .iter()
            .map(|n| stage_by_name(n.as_ref(), ctx))
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }

    pub fn default_with(ctx: &StageContext) -> Result<Self> {
        Self::from_names(&DEFAULT_STAGES, ctx)
    }

    /// Stage names from a file, one per line; blank lines and `#` comments
    /// are skipped.
    pub fn load(path: impl AsRef<Path>, ctx: &StageContext) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_names(&names, ctx)
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name()).collect()
    }

    pub fn run(&self, text: &str) -> Result<FrontendDoc> {
        run_pipeline(text, &self.stages)
    }
}

/// Runs `stages` in order, recording a trace entry per stage. A failing
/// stage aborts with the trace so far.
pub fn run_pipeline(text: &str, stages: &[Box<dyn Stage>]) -> Result<FrontendDoc> {
    if stages.is_empty() {
        return Err(Error::config("pipeline needs at least one stage"));
    }
    let mut doc = FrontendDoc::new(text);
    for s in stages {
        let input = doc.text.clone();
        if let Err(e) = s.run(&mut doc) {
            return Err(Error::Pipeline {
                stage: s.name().to_string(),
                message: e.to_string(),
                trace: doc.trace,
            });
        }
        doc.trace.push(TraceEntry {
            stage: s.name().to_string(),
            input,
            output: doc.text.clone(),
        });
    }
    Ok(doc)
}

/// Batch output row: input, translated text, space-joined phonemes.
pub fn tsv_row(doc: &FrontendDoc) -> String {
    let clean = |s: &str| s.replace(['\t', '\n'], " ");
    format!(
        "{}\t{}\t{}",
        clean(&doc.original),
        clean(doc.translated.as_deref().unwrap_or(&doc.text)),
        doc.phonemes.join(" ")
    )
}
