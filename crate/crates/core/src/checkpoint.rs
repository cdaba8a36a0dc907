//! Model checkpoints: `NTCKPT01`, one JSON header line, then little-endian
//! f32 parameters in header order. When optimizer state is present the
//! Adam first and second moments follow in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::AdamState;
use crate::unet::{check_names, UNet, UNetConfig, UNetParams};
use crate::volume::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NTCKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub adam: Option<AdamState<f32>>,
    pub config_hash: Option<String>,
}

fn push_params(out: &mut Vec<u8>, params: &UNetParams<f32>) {
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(
    model: &UNet<f32>,
    adam: Option<&AdamState<f32>>,
    path: &Path,
    config_hash: Option<&str>,
) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        layers: model
            .params
            .iter()
            .map(|(n, t)| LayerEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        adam_step: adam.map(|a| a.t),
        config_hash: config_hash.map(str::to_owned),
    };
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    serde_json::to_writer(&mut bytes, &header)?;
    bytes.push(b'\n');
    push_params(&mut bytes, &model.params);
    if let Some(a) = adam {
        push_params(&mut bytes, &a.m);
        push_params(&mut bytes, &a.v);
    }
    write_atomic(path, &bytes)
}

fn read_params(layers: &[LayerEntry], payload: &mut &[u8]) -> Result<UNetParams<f32>> {
    let mut params = UNetParams::new();
    for l in layers {
        let n: usize = l.shape.iter().product();
        let (head, rest) = payload.split_at(n * 4);
        let data = head
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(l.name.clone(), Tensor::new(l.shape.clone(), data)?);
        *payload = rest;
    }
    Ok(params)
}

/// Read a checkpoint and rebuild the model it was saved from.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: "NTCKPT01".into(),
        });
    }
    let header_err = |detail: String| Error::Header {
        path: path.to_owned(),
        detail,
    };
    let nl = bytes[8..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err("no newline terminating the header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..8 + nl]).map_err(|e| header_err(e.to_string()))?;
    let floats: usize = header.layers.iter().map(|l| l.shape.iter().product::<usize>()).sum();
    let copies = if header.adam_step.is_some() { 3 } else { 1 };
    let expected = floats * copies * 4;
    let mut payload = &bytes[8 + nl + 1..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_owned(),
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PayloadMismatch {
            path: path.to_owned(),
            expected,
            actual: payload.len(),
        });
    }
    let params = read_params(&header.layers, &mut payload)?;
    let model = UNet::from_params(header.config.clone(), params)?;
    let adam = match header.adam_step {
        Some(t) => Some(AdamState {
            m: read_params(&header.layers, &mut payload)?,
            v: read_params(&header.layers, &mut payload)?,
            t,
        }),
        None => None,
    };
    Ok(Checkpoint {
        model,
        adam,
        config_hash: header.config_hash,
    })
}

/// Load a checkpoint into a model of the given configuration. Differing
/// layer names or shapes are rejected.
pub fn load_checkpoint_for(path: &Path, config: &UNetConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    check_names(config, &ck.model.params)?;
    for (name, shape) in config.tensor_shapes() {
        let got = ck.model.params.get(&name)?.shape();
        if got != shape.as_slice() {
            return Err(Error::shape(
                "load_checkpoint",
                format!("checkpoint tensor {name} has shape {got:?}, model expects {shape:?}"),
            ));
        }
    }
    if ck.model.config.num_classes != config.num_classes || ck.model.config.in_channels != config.in_channels {
        return Err(Error::Config("checkpoint channel configuration differs from the model".into()));
    }
    Ok(ck)
}
