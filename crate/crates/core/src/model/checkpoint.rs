//! Versioned binary checkpoints: magic, format version, the model config
//! and vocabulary as JSON, then every named parameter tensor as raw
//! little-endian `f64` bits.

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::network::BgaModel;
use crate::data::Vocab;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BGAMNER\0";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

pub fn to_bytes(model: &BgaModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_blob(&mut out, &serde_json::to_vec(&model.config)?);
    put_blob(&mut out, &serde_json::to_vec(&model.vocab)?);
    put_u64(&mut out, model.store.len() as u64);
    for id in model.store.ids() {
        put_blob(&mut out, model.store.name(id).as_bytes());
        let t = model.store.value(id);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?)
            .map_err(|_| Error::Checkpoint("oversized field".into()))?;
        self.take(n)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<BgaModel> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.blob()?)?;
    let vocab: Vocab = serde_json::from_slice(r.blob()?)?;
    let mut model = BgaModel::new(config, vocab)?;
    let count = r.u64()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = std::str::from_utf8(r.blob()?)
            .map_err(|_| Error::Checkpoint("bad tensor name".into()))?;
        if name != model.store.name(id) {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} found where {:?} was expected",
                model.store.name(id)
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != model.store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "shape {shape:?} of {name} does not match the config"
            )));
        }
        let dst = model.store.value_mut(id).data_mut();
        let raw = r.take(dst.len() * 8)?;
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_bits(u64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(model: &BgaModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<BgaModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
