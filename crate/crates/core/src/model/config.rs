use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Parallel decoder with a length predictor.
    Nat,
    /// Causally masked left-to-right decoder.
    At,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Nat => "nat",
            ModelKind::At => "at",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nat" => Ok(ModelKind::Nat),
            "at" => Ok(ModelKind::At),
            _ => Err(Error::config(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Where the word-boundary embedding is stitched in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegPlacement {
    Encoder,
    Decoder,
}

impl fmt::Display for SegPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegPlacement::Encoder => "encoder",
            SegPlacement::Decoder => "decoder",
        })
    }
}

impl FromStr for SegPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(SegPlacement::Encoder),
            "decoder" => Ok(SegPlacement::Decoder),
            _ => Err(Error::config(format!("unknown segmentation placement `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    pub n_branches: usize,
    /// Heads per branch.
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_seg: usize,
    pub ffn_multiplier: usize,
    pub max_len: usize,
    /// Length offsets are classified over `[-K, K]`.
    pub length_offset_range: usize,
    pub vocab_size: usize,
    pub seg_placement: SegPlacement,
    /// Merge runs of identical adjacent output tokens at inference.
    pub collapse_repeats: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Nat,
            d_model: 300,
            n_branches: 2,
            n_heads: 2,
            n_layers: 1,
            d_seg: 16,
            ffn_multiplier: 4,
            max_len: 256,
            length_offset_range: 20,
            vocab_size: 0,
            seg_placement: SegPlacement::Encoder,
            collapse_repeats: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_branches == 0 || self.n_heads == 0 {
            return Err(Error::config("n_branches and n_heads must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_branches) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_branches {}",
                self.d_model, self.n_branches
            )));
        }
        if !self.branch_width().is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "branch width {} is not divisible by n_heads {}",
                self.branch_width(),
                self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::config("d_model must be at least 2"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be at least 1"));
        }
        if self.length_offset_range == 0 {
            return Err(Error::config("length_offset_range must be at least 1"));
        }
        if self.max_len == 0 || self.ffn_multiplier == 0 || self.d_seg == 0 {
            return Err(Error::config("max_len, ffn_multiplier and d_seg must be positive"));
        }
        if self.vocab_size <= crate::text::REP as usize {
            return Err(Error::config("vocab_size must cover the reserved tokens"));
        }
        Ok(())
    }

    pub fn branch_width(&self) -> usize {
        self.d_model / self.n_branches
    }

    pub fn head_width(&self) -> usize {
        self.branch_width() / self.n_heads
    }

    pub fn total_heads(&self) -> usize {
        self.n_branches * self.n_heads
    }

    pub fn length_classes(&self) -> usize {
        2 * self.length_offset_range + 1
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), self.kind.to_string());
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("n_branches".into(), self.n_branches.to_string());
        m.insert("n_heads".into(), self.n_heads.to_string());
        m.insert("n_layers".into(), self.n_layers.to_string());
        m.insert("d_seg".into(), self.d_seg.to_string());
        m.insert("ffn_multiplier".into(), self.ffn_multiplier.to_string());
        m.insert("max_len".into(), self.max_len.to_string());
        m.insert("length_offset_range".into(), self.length_offset_range.to_string());
        m.insert("vocab_size".into(), self.vocab_size.to_string());
        m.insert("seg_placement".into(), self.seg_placement.to_string());
        m.insert("collapse_repeats".into(), self.collapse_repeats.to_string());
        m
    }

    /// Overrides defaults with any recognized keys in `kv`.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn num(k: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("`{k}` expects an integer, got `{v}`")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "kind" => self.kind = v.parse()?,
                "d_model" => self.d_model = num(k, v)?,
                "n_branches" => self.n_branches = num(k, v)?,
                "n_heads" => self.n_heads = num(k, v)?,
                "n_layers" => self.n_layers = num(k, v)?,
                "d_seg" => self.d_seg = num(k, v)?,
                "ffn_multiplier" => self.ffn_multiplier = num(k, v)?,
                "max_len" => self.max_len = num(k, v)?,
                "length_offset_range" => self.length_offset_range = num(k, v)?,
                "vocab_size" => self.vocab_size = num(k, v)?,
                "seg_placement" => self.seg_placement = v.parse()?,
                "collapse_repeats" => {
                    self.collapse_repeats = v
                        .parse()
                        .map_err(|_| Error::config(format!("`{k}` expects true/false")))?
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }
}
