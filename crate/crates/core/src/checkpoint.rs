//! Versioned binary tensor archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"FPRN"
//! version    u32
//! length     u64            payload byte count
//! payload    length bytes
//! checksum   [u8; 32]       SHA-256 of payload
//!
//! payload:
//!   kind       u16 len + utf-8
//!   metadata   u32 len + utf-8 (JSON)
//!   count      u32
//!   count × { name u16 len + utf-8, rank u8, dims u32 × rank, values f64 × product(dims) }
//! ```

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderModel, Tokenizer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FPRN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub metadata: String,
    pub tensors: Vec<StoredTensor>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        put_str16(&mut payload, &self.kind);
        payload.extend((self.metadata.len() as u32).to_le_bytes());
        payload.extend(self.metadata.as_bytes());
        payload.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str16(&mut payload, &t.name);
            payload.push(t.shape.len() as u8);
            for &d in &t.shape {
                payload.extend((d as u32).to_le_bytes());
            }
            for v in &t.values {
                payload.extend(v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 48);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((payload.len() as u64).to_le_bytes());
        out.extend(&payload);
        out.extend(Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut header = Reader::new(bytes);
        if header.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = header.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = header.u64()? as usize;
        let payload = header.take(len)?;
        let checksum = header.take(32)?;
        if Sha256::digest(payload).as_slice() != checksum {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        if !header.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after checksum".into()));
        }
        let mut r = Reader::new(payload);
        let kind = r.str16()?;
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not utf-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str16()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(StoredTensor { name, shape, values });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes in payload".into()));
        }
        Ok(Self {
            kind,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` archive, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn metadata<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_str(&self.metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u16).to_le_bytes());
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not utf-8".into()))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: EncoderConfig,
    vocab: Vec<String>,
}

pub const MODEL_KIND: &str = "encoder";

pub fn model_archive(model: &EncoderModel, tokenizer: &Tokenizer) -> Archive {
    let meta = ModelMeta {
        config: model.config.clone(),
        vocab: tokenizer.words().to_vec(),
    };
    Archive {
        kind: MODEL_KIND.into(),
        metadata: serde_json::to_string(&meta).expect("serializable"),
        tensors: model
            .named_params()
            .into_iter()
            .map(|(name, t)| StoredTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.to_vec(),
            })
            .collect(),
    }
}

pub fn save_checkpoint(model: &EncoderModel, tokenizer: &Tokenizer, path: &Path) -> Result<()> {
    model_archive(model, tokenizer).save(path)
}

fn fill_params(model: &mut EncoderModel, archive: &Archive) -> Result<()> {
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != archive.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            archive.tensors.len(),
            names.len()
        )));
    }
    for ((slot, name), stored) in model.params_mut().into_iter().zip(&names).zip(&archive.tensors) {
        if &stored.name != name || stored.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match `{name}` {:?}",
                stored.name,
                stored.shape,
                slot.shape()
            )));
        }
        *slot = Tensor::new(stored.values.clone(), &stored.shape)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, Tokenizer)> {
    let archive = Archive::load(path)?;
    archive.expect_kind(MODEL_KIND)?;
    let meta: ModelMeta = archive.metadata()?;
    meta.config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
    let tokenizer = Tokenizer::from_vocab(meta.vocab)?;
    if tokenizer.vocab_size() != meta.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size disagrees with config".into()));
    }
    let mut model = EncoderModel::init(&meta.config, &mut crate::rng::rng(0, crate::rng::Stream::Init))?
        .with_requires_grad(false);
    fill_params(&mut model, &archive)?;
    Ok((model, tokenizer))
}

/// Overwrites the weights of an existing model; the stored config must match.
pub fn load_into(model: &mut EncoderModel, path: &Path) -> Result<()> {
    let archive = Archive::load(path)?;
    archive.expect_kind(MODEL_KIND)?;
    let meta: ModelMeta = archive.metadata()?;
    if meta.config != model.config {
        return Err(Error::Checkpoint(format!(
            "checkpoint config {:?} does not match model config {:?}",
            meta.config, model.config
        )));
    }
    fill_params(model, &archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng, Stream};

    fn fixture() -> (EncoderModel, Tokenizer) {
        let tok = Tokenizer::from_words(["he", "she", "doctor"]);
        let cfg = EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 8,
            ffn_size: 8,
            vocab_size: tok.vocab_size(),
            max_seq_len: 5,
            layer_norm_eps: 1e-12,
        };
        (EncoderModel::init(&cfg, &mut rng(11, Stream::Init)).unwrap(), tok)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, tok) = fixture();
        save_checkpoint(&model, &tok, &path).unwrap();
        let (loaded, loaded_tok) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_tok, tok);
        assert_eq!(loaded.config, model.config);
        for ((n1, a), (n2, b)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_and_tampered_files_are_rejected() {
        let (model, tok) = fixture();
        let bytes = model_archive(&model, &tok).to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Archive::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Archive::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let mut versioned = bytes;
        versioned[4] = 9;
        assert!(matches!(Archive::from_bytes(&versioned), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn config_mismatch_on_load_into() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, tok) = fixture();
        save_checkpoint(&model, &tok, &path).unwrap();
        let mut other_cfg = model.config.clone();
        other_cfg.ffn_size = 16;
        let mut other = EncoderModel::init(&other_cfg, &mut rng(1, Stream::Init)).unwrap();
        assert!(matches!(load_into(&mut other, &path), Err(Error::Checkpoint(_))));
        let mut same = EncoderModel::init(&model.config, &mut rng(2, Stream::Init)).unwrap();
        load_into(&mut same, &path).unwrap();
        assert_eq!(same.weights_checksum(), model.weights_checksum());
    }
}
