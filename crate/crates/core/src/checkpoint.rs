//! Checkpoint container: a version line, a TOML header describing config,
//! sharing policy, vocabulary and tensor table, then the raw little-endian
//! payload.
//!
//! ```text
//! MSCLIP-CKPT 1 <header bytes>\n
//! <header TOML>
//! <payload>
//! ```

use std::path::Path;

use msclip_numerics::{RunningStats, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{EncoderConfig, SharingPolicy};
use crate::error::{io_err, MsClipError, Result};
use crate::model::MsClipModel;
use crate::params::{Group, Param, ParamStore};
use crate::tokenizer::Tokenizer;

pub const MAGIC: &str = "MSCLIP-CKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: EncoderConfig,
    policy: SharingPolicy,
    vocab: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
    buffers: Vec<BufferEntry>,
}

fn bad(msg: impl Into<String>) -> MsClipError {
    MsClipError::Format { what: "checkpoint", msg: msg.into() }
}

/// Serializes a model (and optionally its tokenizer) to bytes.
pub fn encode_checkpoint<T: Scalar>(model: &MsClipModel<T>, tokenizer: Option<&Tokenizer>) -> Vec<u8> {
    let store = &model.store;
    let header = Header {
        dtype: T::DTYPE.into(),
        config: model.config.clone(),
        policy: model.policy.clone(),
        vocab: tokenizer.map(|t| t.tokens().to_vec()),
        tensors: store
            .params()
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), group: p.group, shape: p.tensor.shape().to_vec() })
            .collect(),
        buffers: store
            .bn_buffers()
            .iter()
            .map(|(n, s)| BufferEntry { name: n.clone(), channels: s.channels() })
            .collect(),
    };
    let text = toml::to_string(&header).expect("checkpoint header serializes");
    let mut out = format!("{MAGIC} {VERSION} {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    for p in store.params() {
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    for (_, s) in store.bn_buffers() {
        for &v in s.mean.iter().chain(&s.var) {
            v.write_le(&mut out);
        }
    }
    out
}

/// Inverse of [`encode_checkpoint`]; the stored dtype must equal `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(MsClipModel<T>, Option<Tokenizer>)> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing version line"))?;
    let first = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("version line is not UTF-8"))?;
    let parts: Vec<&str> = first.split(' ').collect();
    let [magic, version, len] = parts[..] else {
        return Err(bad(format!("bad version line {first:?}")));
    };
    if magic != MAGIC {
        return Err(bad(format!("not a checkpoint (found {magic:?})")));
    }
    if version != VERSION.to_string() {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len: usize = len.parse().map_err(|_| bad(format!("bad header length {len:?}")))?;
    let start = nl + 1;
    let body = bytes.get(start..start + len).ok_or_else(|| bad("truncated header"))?;
    let text = std::str::from_utf8(body).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
    if header.dtype != T::DTYPE {
        return Err(bad(format!("stored dtype {} but {} was requested", header.dtype, T::DTYPE)));
    }
    let mut payload = &bytes[start + len..];
    let mut take = |n: usize| -> Result<Vec<T>> {
        let need = n * T::BYTES;
        if payload.len() < need {
            return Err(bad("truncated payload"));
        }
        let (head, rest) = payload.split_at(need);
        payload = rest;
        Ok(head.chunks_exact(T::BYTES).map(T::read_le).collect())
    };
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.shape.iter().product();
        let tensor = Tensor::new(e.shape, take(n)?)?.with_requires_grad(true);
        params.push(Param { name: e.name, group: e.group, tensor });
    }
    let mut bn = Vec::with_capacity(header.buffers.len());
    for b in header.buffers {
        let mean = take(b.channels)?;
        let var = take(b.channels)?;
        bn.push((b.name, RunningStats::from_parts(mean, var)));
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing payload bytes", payload.len())));
    }
    let model = MsClipModel::from_store(header.config, header.policy, ParamStore::from_parts(params, bn))?;
    let tok = header.vocab.map(Tokenizer::from_tokens).transpose()?;
    Ok((model, tok))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &MsClipModel<T>, tokenizer: Option<&Tokenizer>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, tokenizer)).map_err(io_err(path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MsClipModel<T>, Option<Tokenizer>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, pol) = Preset::MsClipSAvgpool.build(true);
        let mut m = MsClipModel::<f32>::build(cfg, pol, 5).unwrap();
        m.store.bn_buffers_mut()[0].1.mean[0] = 0.25;
        let tok = Tokenizer::build(["a red circle"], 300);
        let bytes = encode_checkpoint(&m, Some(&tok));
        let (back, t2) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(t2.unwrap(), tok);
        assert_eq!(encode_checkpoint(&back, Some(&tok)), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let (cfg, pol) = Preset::ClipB32.build(true);
        let m = MsClipModel::<f32>::build(cfg, pol, 0).unwrap();
        let bytes = encode_checkpoint(&m, None);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f64>(&bytes).is_err());
        assert!(decode_checkpoint::<f32>(b"nope\n").is_err());
    }
}
