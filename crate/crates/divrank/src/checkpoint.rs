//! Binary checkpoint: `DRCK`, a `u32` version, a `u64` header length, a JSON
//! header, little-endian `f64` tensor data in header order, then a CRC32 of
//! everything before it.

use std::fs;
use std::path::Path;

use divrank_core::corpus::CategoryId;
use divrank_core::nn::{Matrix, ParamStore};
use divrank_core::reencoder::ReEncoderModel;
use divrank_core::scl::PrototypeBank;
use divrank_core::token_classifier::{LabelSpace, TokenClassifierModel, TtcConfig};
use divrank_core::nn::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"DRCK";
pub const VERSION: u32 = 1;

const REENCODER: &str = "reencoder/";
const TTC: &str = "ttc/";
const BANK: &str = "bank";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub reencoder: ReEncoderModel,
    pub bank: PrototypeBank,
    /// Absent when the classifier stage was skipped.
    pub ttc: Option<TokenClassifierModel>,
    pub scl_steps: usize,
    pub ttc_steps: usize,
    /// Labels of the RNG streams each stage drew from.
    pub rng_streams: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TtcInfo {
    heads: usize,
    layers: usize,
    d_ff: usize,
    ln_eps_bits: u64,
    seq_len: usize,
    categories: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: String,
    dim: usize,
    beta_bits: u64,
    bank_categories: Vec<u32>,
    ttc: Option<TtcInfo>,
    tensors: Vec<TensorInfo>,
    scl_steps: usize,
    ttc_steps: usize,
    rng_streams: Vec<String>,
}

fn collect(prefix: &str, params: &ParamStore, infos: &mut Vec<TensorInfo>, data: &mut Vec<f64>) {
    for (name, m) in params.iter() {
        infos.push(TensorInfo {
            name: format!("{prefix}{name}"),
            rows: m.rows(),
            cols: m.cols(),
        });
        data.extend_from_slice(m.data());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    collect(REENCODER, &ckpt.reencoder.params, &mut tensors, &mut data);
    let bank = ckpt.bank.prototypes();
    tensors.push(TensorInfo {
        name: BANK.into(),
        rows: bank.rows(),
        cols: bank.cols(),
    });
    data.extend_from_slice(bank.data());
    let ttc = ckpt.ttc.as_ref().map(|m| {
        collect(TTC, &m.params, &mut tensors, &mut data);
        let t = m.config.transformer;
        TtcInfo {
            heads: t.heads,
            layers: t.layers,
            d_ff: t.d_ff,
            ln_eps_bits: t.ln_eps.to_bits(),
            seq_len: m.config.seq_len,
            categories: m.labels.category_ids().iter().map(|c| c.0).collect(),
        }
    });
    let header = Header {
        config: ckpt.config.to_text(),
        dim: ckpt.reencoder.dim(),
        beta_bits: ckpt.reencoder.beta().to_bits(),
        bank_categories: ckpt.bank.category_ids().iter().map(|c| c.0).collect(),
        ttc,
        tensors,
        scl_steps: ckpt.scl_steps,
        ttc_steps: ckpt.ttc_steps,
        rng_streams: ckpt.rng_streams.clone(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");

    let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn malformed(detail: impl Into<String>) -> FormatError {
    FormatError::Checkpoint(detail.into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedCheckpoint.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < 16 {
        return Err(FormatError::TruncatedCheckpoint.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = 16u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or(FormatError::TruncatedCheckpoint)? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| malformed(format!("header: {e}")))?;
    let floats: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let expected = header_end + 8 * floats + 4;
    if bytes.len() < expected {
        return Err(FormatError::TruncatedCheckpoint.into());
    }
    if bytes.len() > expected {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - expected)).into());
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }

    let mut cursor = header_end;
    let mut reencoder = ParamStore::new();
    let mut ttc = ParamStore::new();
    let mut bank = None;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let values: Vec<f64> = bytes[cursor..cursor + 8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        cursor += 8 * n;
        let m = Matrix::from_vec(t.rows, t.cols, values)?;
        if let Some(name) = t.name.strip_prefix(REENCODER) {
            reencoder.insert(name, m)?;
        } else if let Some(name) = t.name.strip_prefix(TTC) {
            ttc.insert(name, m)?;
        } else if t.name == BANK {
            bank = Some(m);
        } else {
            return Err(malformed(format!("unknown tensor {}", t.name)).into());
        }
    }

    let config = ExperimentConfig::parse(&header.config)?;
    let reencoder = ReEncoderModel::from_params(reencoder, f64::from_bits(header.beta_bits))?;
    if reencoder.dim() != header.dim {
        return Err(malformed("re-encoder width differs from header").into());
    }
    let bank = PrototypeBank::from_parts(
        header.bank_categories.iter().copied().map(CategoryId).collect(),
        bank.ok_or_else(|| malformed("missing bank"))?,
    )?;
    let ttc = match header.ttc {
        None if ttc.is_empty() => None,
        None => return Err(malformed("classifier tensors without classifier header").into()),
        Some(info) => {
            let mut transformer = TransformerConfig::new(header.dim, info.heads, info.layers, info.d_ff);
            transformer.ln_eps = f64::from_bits(info.ln_eps_bits);
            let cfg = TtcConfig {
                transformer,
                seq_len: info.seq_len,
            };
            let labels = LabelSpace::new(info.categories.into_iter().map(CategoryId).collect())?;
            Some(TokenClassifierModel::from_params(cfg, labels, ttc)?)
        }
    };
    Ok(Checkpoint {
        config,
        reencoder,
        bank,
        ttc,
        scl_steps: header.scl_steps,
        ttc_steps: header.ttc_steps,
        rng_streams: header.rng_streams,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ckpt)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(io_err(path))?)
}
