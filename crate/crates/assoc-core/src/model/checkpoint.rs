//! Checkpoint file format: model parameters, optimizer moments, and training
//! counters, with a CRC32 footer. Loading a checkpoint resumes training to
//! bit-identical subsequent steps given the same batch stream.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, FormatErrorKind, Result};

use super::optim::AdamW;
use super::{AssociationModel, Block, ModelShape};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PAMM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full resumable training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub shape: ModelShape,
    pub model_flat: Vec<f32>,
    pub opt: AdamW,
    /// Next epoch to run (epochs below this are complete).
    pub next_epoch: u32,
    pub global_step: u64,
    /// Base seed; together with `next_epoch` this is the full sampler state,
    /// since batch order is derived statelessly from (seed, epoch).
    pub seed: u64,
}

impl Checkpoint {
    pub fn model(&self) -> AssociationModel<f32> {
        let mut model = empty_model(self.shape);
        model.load_flat(&self.model_flat);
        model
    }
}

fn empty_model(shape: ModelShape) -> AssociationModel<f32> {
    let blocks = (0..shape.n_blocks)
        .map(|b| {
            let (fan_in, fan_out) = shape.block_dims(b);
            Block {
                norm_gain: Array1::zeros(fan_in),
                norm_bias: Array1::zeros(fan_in),
                weight: Array2::zeros((fan_in, fan_out)),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    AssociationModel {
        shape,
        blocks,
        alpha_raw: 0.0,
    }
}

struct TensorEntry<'a> {
    name: &'a str,
    data: Vec<f32>,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(bytes: &[u8], cursor: &mut usize) -> Option<(String, Vec<f32>)> {
    let name_len = u16::from_le_bytes(bytes.get(*cursor..*cursor + 2)?.try_into().ok()?) as usize;
    *cursor += 2;
    let name = String::from_utf8(bytes.get(*cursor..*cursor + name_len)?.to_vec()).ok()?;
    *cursor += name_len;
    let len = u64::from_le_bytes(bytes.get(*cursor..*cursor + 8)?.try_into().ok()?) as usize;
    *cursor += 8;
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        let off = *cursor + i * 4;
        data.push(f32::from_le_bytes(bytes.get(off..off + 4)?.try_into().ok()?));
    }
    *cursor += len * 4;
    Some((name, data))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&ckpt.config_hash);
    payload.extend_from_slice(&(ckpt.shape.dim as u32).to_le_bytes());
    payload.extend_from_slice(&(ckpt.shape.n_blocks as u32).to_le_bytes());
    payload.extend_from_slice(&(ckpt.shape.hidden_multiplier as u32).to_le_bytes());
    payload.extend_from_slice(&ckpt.next_epoch.to_le_bytes());
    payload.extend_from_slice(&ckpt.global_step.to_le_bytes());
    payload.extend_from_slice(&ckpt.seed.to_le_bytes());
    payload.extend_from_slice(&ckpt.opt.t.to_le_bytes());
    payload.extend_from_slice(&ckpt.opt.weight_decay.to_le_bytes());

    let tensors = [
        TensorEntry {
            name: "params",
            data: ckpt.model_flat.clone(),
        },
        TensorEntry {
            name: "opt.m",
            data: ckpt.opt.m.clone(),
        },
        TensorEntry {
            name: "opt.v",
            data: ckpt.opt.v.clone(),
        },
    ];
    payload.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        push_tensor(&mut payload, t.name, &t.data);
    }

    let crc = crc32fast::hash(&payload);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    file.write_all(&crc.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::format(path, FormatErrorKind::Header, "file too short"));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, FormatErrorKind::Magic, "not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            FormatErrorKind::Version,
            format!("version {version}"),
        ));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored_crc != actual {
        return Err(Error::format(
            path,
            FormatErrorKind::Checksum,
            format!("stored {stored_crc:#010x}, computed {actual:#010x}"),
        ));
    }

    let header_err = || Error::format(path, FormatErrorKind::Header, "truncated fields");
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = payload.get(cursor..cursor + n).ok_or_else(header_err)?;
        cursor += n;
        Ok(s)
    };
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(take(32)?);
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let n_blocks = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let hidden_multiplier = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let next_epoch = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let global_step = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let opt_t = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let weight_decay = f32::from_le_bytes(take(4)?.try_into().unwrap());
    let n_tensors = u32::from_le_bytes(take(4)?.try_into().unwrap());

    let mut params = None;
    let mut opt_m = None;
    let mut opt_v = None;
    for _ in 0..n_tensors {
        let (name, data) = read_tensor(payload, &mut cursor).ok_or_else(header_err)?;
        match name.as_str() {
            "params" => params = Some(data),
            "opt.m" => opt_m = Some(data),
            "opt.v" => opt_v = Some(data),
            _ => {}
        }
    }
    let model_flat = params.ok_or_else(header_err)?;
    let m = opt_m.ok_or_else(header_err)?;
    let v = opt_v.ok_or_else(header_err)?;

    let shape = ModelShape {
        dim,
        n_blocks,
        hidden_multiplier,
    };
    let expected = empty_model(shape).n_params();
    if model_flat.len() != expected || m.len() != expected || v.len() != expected {
        return Err(Error::format(
            path,
            FormatErrorKind::Header,
            format!(
                "tensor sizes {}/{}/{} do not match shape ({expected} params)",
                model_flat.len(),
                m.len(),
                v.len()
            ),
        ));
    }

    let mut opt = AdamW::new(expected, weight_decay as f64);
    opt.m = m;
    opt.v = v;
    opt.t = opt_t;

    Ok(Checkpoint {
        config_hash,
        shape,
        model_flat,
        opt,
        next_epoch,
        global_step,
        seed,
    })
}
