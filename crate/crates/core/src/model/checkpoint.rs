//! Binary checkpoint format.
//!
//! ```text
//! "KWSC" | version u32 | header_len u32 | header JSON
//! tensor_count u32 | { name_len u32 | name | rank u32 | dims u32* | f32* }
//! counter_count u32 | { name_len u32 | name | u64 }
//! ```
//!
//! All integers and floats are little-endian. Tensors cover every parameter
//! (all normalization branches included) and every branch's running
//! statistics; counters hold the per-branch statistic update counts.
//! Values are stored as `f32`, so an `f64` model round-trips only up to
//! single precision.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, NormConfig};
use crate::error::{KwsError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KWSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    norm: NormConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

struct Named {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn stat_names(bn: &str, k: usize) -> (String, String, String) {
    (
        format!("{bn}.b{k}.running_mean"),
        format!("{bn}.b{k}.running_var"),
        format!("{bn}.b{k}.update_count"),
    )
}

/// Serializes `model` plus free-form `meta` (epoch, flags, ...).
pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.config().clone(),
        norm: *model.norm_config(),
        meta: meta.clone(),
    })
    .map_err(|e| KwsError::Format(format!("cannot encode header: {e}")))?;

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .store()
        .iter()
        .map(|(_, p)| {
            let data = p.tensor.data().iter().map(|v| v.as_f32()).collect();
            (p.name.clone(), p.tensor.shape().to_vec(), data)
        })
        .collect();
    let mut counters = Vec::new();
    for bn in model.norms() {
        for (k, b) in bn.branches().iter().enumerate() {
            let (m, v, c) = stat_names(bn.name(), k);
            let f = |x: &[T]| x.iter().map(|v| v.as_f32()).collect::<Vec<_>>();
            tensors.push((m, vec![bn.channels()], f(&b.running_mean)));
            tensors.push((v, vec![bn.channels()], f(&b.running_var)));
            counters.push((c, b.update_count));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, len_u32(header.len())?);
    out.extend_from_slice(&header);
    put_u32(&mut out, len_u32(tensors.len())?);
    for (name, dims, data) in &tensors {
        put_str(&mut out, name)?;
        put_u32(&mut out, len_u32(dims.len())?);
        for &d in dims {
            put_u32(&mut out, len_u32(d)?);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, len_u32(counters.len())?);
    for (name, value) in &counters {
        put_str(&mut out, name)?;
        out.extend_from_slice(&value.to_le_bytes());
    }
    Ok(out)
}

/// Rebuilds a model from [`encode_checkpoint`] output, returning its meta.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, serde_json::Value)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(KwsError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(KwsError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| KwsError::Format(format!("bad checkpoint header: {e}")))?;

    let mut tensors = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.insert(name.clone(), Named { dims, data }).is_some() {
            return Err(KwsError::Integrity(format!("duplicate tensor `{name}`")));
        }
    }
    let mut counters = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let v = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        counters.insert(name, v);
    }
    if r.pos != bytes.len() {
        return Err(KwsError::Integrity(format!(
            "{} trailing bytes after checkpoint body",
            bytes.len() - r.pos
        )));
    }

    let mut model = Model::<T>::new(&header.model, header.norm, 0)
        .map_err(|e| KwsError::Integrity(format!("checkpoint config rejected: {e}")))?;
    let cast = |v: &[f32]| v.iter().map(|&x| T::from_f32_lossless(x)).collect::<Vec<T>>();
    let mut take_tensor = |name: &str, dims: &[usize]| -> Result<Vec<T>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| KwsError::Integrity(format!("missing tensor `{name}`")))?;
        if t.dims != dims {
            return Err(KwsError::Integrity(format!(
                "tensor `{name}` has shape {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(cast(&t.data))
    };

    for (_, p) in model.store_mut().iter_mut() {
        let dims = p.tensor.shape().to_vec();
        let data = take_tensor(&p.name, &dims)?;
        p.tensor.data_mut().copy_from_slice(&data);
    }
    for bn in model.norms_mut() {
        let channels = bn.channels();
        let name = bn.name().to_string();
        for k in 0..bn.num_branches() {
            let (m, v, c) = stat_names(&name, k);
            let b = bn.branch_mut(k);
            b.running_mean = take_tensor(&m, &[channels])?;
            b.running_var = take_tensor(&v, &[channels])?;
            b.update_count = counters
                .remove(&c)
                .ok_or_else(|| KwsError::Integrity(format!("missing counter `{c}`")))?;
        }
    }
    if let Some(name) = tensors.keys().next().or(counters.keys().next()) {
        return Err(KwsError::Integrity(format!("unexpected entry `{name}`")));
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    path: impl AsRef<Path>,
    meta: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| KwsError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn truncated() -> KwsError {
    KwsError::Integrity("checkpoint is truncated".into())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| KwsError::Format(format!("length {n} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, len_u32(s.len())?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| KwsError::Integrity("tensor name is not UTF-8".into()))
    }
}
