//! Binary checkpoint: magic, version, JSON header, then little-endian f64 blocks.
//!
//! ```text
//! b"PITSEPCK" | u32 version | u32 header_len | header (UTF-8 JSON) | payload
//! ```
//!
//! The header lists every block with its shape and offset (in f64 values) into the payload.
//! Blocks are the feature mean and std, then each layer's weights (row-major) and bias.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Dense, FeatureNorm, Mlp, Model, ModelLayout};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PITSEPCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    layout: ModelLayout,
    stft: StftConfig,
    sample_rate: u32,
    seed: u64,
    epochs_completed: usize,
    learning_rate: f64,
    hidden: Vec<usize>,
    blocks: Vec<Block>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes a model to any writer.
pub fn write_checkpoint(model: &Model, mut out: impl Write) -> Result<()> {
    let mut blocks = Vec::new();
    let mut payload: Vec<f64> =
        Vec::with_capacity(model.net.parameter_count() + 2 * model.layout.bins);
    let mut push = |name: String, shape: Vec<usize>, data: &mut dyn Iterator<Item = f64>| {
        let offset = payload.len();
        payload.extend(data);
        blocks.push(Block {
            name,
            shape,
            offset,
            len: payload.len() - offset,
        });
    };
    push(
        "norm.mean".into(),
        vec![model.norm.bins()],
        &mut model.norm.mean.iter().copied(),
    );
    push(
        "norm.std".into(),
        vec![model.norm.bins()],
        &mut model.norm.std.iter().copied(),
    );
    for (i, layer) in model.net.layers().iter().enumerate() {
        push(
            format!("layer{i}.weights"),
            vec![layer.inputs(), layer.outputs()],
            &mut layer.weights.iter().copied(),
        );
        push(
            format!("layer{i}.bias"),
            vec![layer.outputs()],
            &mut layer.bias.iter().copied(),
        );
    }
    let header = Header {
        layout: model.layout,
        stft: model.stft,
        sample_rate: model.sample_rate,
        seed: model.seed,
        epochs_completed: model.epochs_completed,
        learning_rate: model.learning_rate,
        hidden: model.hidden(),
        blocks,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("checkpoint stream", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(json.len() as u32).to_le_bytes())
        .map_err(io)?;
    out.write_all(&json).map_err(io)?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes).map_err(io)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(corrupt("checkpoint is truncated"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(
        take(bytes, 4)?.try_into().expect("4 bytes"),
    ))
}

/// Parses a model from any reader, validating every block against the header.
pub fn read_checkpoint(mut input: impl Read) -> Result<Model> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("checkpoint stream", e))?;
    let mut bytes = buf.as_slice();
    if take(&mut bytes, 8)? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut bytes)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(&mut bytes)? as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len)?)
        .map_err(|e| corrupt(format!("bad checkpoint header: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(corrupt(
            "checkpoint payload is not a whole number of f64 values",
        ));
    }
    let payload: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint payload".into()));
    }

    let mut blocks = header.blocks.iter();
    let mut next = |name: &str, shape: &[usize]| -> Result<&[f64]> {
        let b = blocks
            .next()
            .ok_or_else(|| corrupt(format!("missing block {name}")))?;
        if b.name != name || b.shape != shape || b.len != shape.iter().product::<usize>() {
            return Err(corrupt(format!(
                "block {} {:?} does not match expected {name} {shape:?}",
                b.name, b.shape
            )));
        }
        payload
            .get(b.offset..b.offset + b.len)
            .ok_or_else(|| corrupt(format!("block {name} runs past the payload")))
    };

    let layout = header.layout;
    let bins = layout.bins;
    let mean = Array1::from(next("norm.mean", &[bins])?.to_vec());
    let std = Array1::from(next("norm.std", &[bins])?.to_vec());
    let dims = layout.dims(&header.hidden);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, d) in dims.windows(2).enumerate() {
        let w = next(&format!("layer{i}.weights"), &[d[0], d[1]])?;
        let weights = Array2::from_shape_vec((d[0], d[1]), w.to_vec()).expect("shape checked");
        let bias = Array1::from(next(&format!("layer{i}.bias"), &[d[1]])?.to_vec());
        layers.push(Dense { weights, bias });
    }
    if blocks.next().is_some() {
        return Err(corrupt("unexpected extra blocks"));
    }
    header.stft.validate()?;
    if header.stft.bins() != bins {
        return Err(corrupt("stft configuration disagrees with layout bins"));
    }
    Ok(Model {
        layout,
        norm: FeatureNorm { mean, std },
        net: Mlp::from_layers(layers)?,
        stft: header.stft,
        sample_rate: header.sample_rate,
        seed: header.seed,
        epochs_completed: header.epochs_completed,
        learning_rate: header.learning_rate,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice()).map_err(|e| e.context(format!("loading {}", path.display())))
}
