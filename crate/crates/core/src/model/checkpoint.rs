//! Binary checkpoint format. All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "DLFCKPT\0"
//! version    u32      1
//! kind       u8       0 = NAT, 1 = AT
//! config     u32 byte length, UTF-8 "key=value\n" lines
//! vocab      u32 count, then per token: u32 byte length, UTF-8 bytes
//! lexicon    u32 count, then per word:  u32 byte length, UTF-8 bytes
//! tensors    u32 count, then per tensor:
//!              u32 name length, UTF-8 name, u8 ndim, ndim × u64 dims,
//!              product(dims) × f64 row-major data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelKind, ParamStore};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::text::{Lexicon, Vocab};

pub const MAGIC: &[u8; 8] = b"DLFCKPT\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(match model.config.kind {
        ModelKind::Nat => 0,
        ModelKind::At => 1,
    });
    let mut cfg = String::new();
    for (k, v) in model.config.to_kv() {
        cfg.push_str(&format!("{k}={v}\n"));
    }
    put_str(&mut out, &cfg);
    put_u32(&mut out, model.vocab.len() as u32);
    for t in model.vocab.tokens() {
        put_str(&mut out, t);
    }
    let words = model.lexicon.sorted_words();
    put_u32(&mut out, words.len() as u32);
    for w in words {
        put_str(&mut out, w);
    }
    put_u32(&mut out, model.params.len() as u32);
    for (name, t) in model.params.iter() {
        put_str(&mut out, name);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Nat,
        1 => ModelKind::At,
        k => return Err(Error::Checkpoint(format!("unknown model kind byte {k}"))),
    };
    let cfg_text = r.string()?;
    let mut kv = BTreeMap::new();
    for line in cfg_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig::from_kv(&kv).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if config.kind != kind {
        return Err(Error::Checkpoint("kind byte disagrees with config block".into()));
    }
    let n_tokens = r.u32()? as usize;
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_tokens(tokens).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_words = r.u32()? as usize;
    let words = (0..n_words).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let lexicon = Lexicon::new(words);
    let n_tensors = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let params = ParamStore::from_entries(entries)?;
    Model::from_parts(config, params, vocab, lexicon).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its architecture matches
/// `expected` (vocabulary size excluded).
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let m = load_checkpoint(path)?;
    let mut have = m.config.clone();
    have.vocab_size = expected.vocab_size;
    if &have != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config (d_model {}, n_branches {}, kind {}) does not match the expected one (d_model {}, n_branches {}, kind {})",
            m.config.d_model, m.config.n_branches, m.config.kind,
            expected.d_model, expected.n_branches, expected.kind
        )));
    }
    Ok(m)
}
