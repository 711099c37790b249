//! Network checkpoints: `u64` little-endian header length, a JSON header,
//! then every parameter as little-endian `f64` (per layer: weights row-major,
//! then bias).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::model::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Standard,
    Adversarial,
    Finetuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
    pub tag: Provenance,
    /// Frozen flag per layer.
    pub frozen: Vec<bool>,
    pub param_count: usize,
}

pub fn encode(net: &Network, seed: u64, tag: Provenance) -> Result<Vec<u8>> {
    let mut dims = vec![net.input_dim()];
    dims.extend(net.layers().iter().map(|l| l.out_dim()));
    let params = net.flat_params(1..=net.depth())?;
    let header = CheckpointHeader {
        dims,
        activations: net.layers().iter().map(|l| l.activation).collect(),
        seed,
        tag,
        frozen: net.layers().iter().map(|l| l.frozen).collect(),
        param_count: params.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * params.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Network, CheckpointHeader)> {
    let bad = |detail: &str| Error::Malformed {
        path: origin.to_path_buf(),
        detail: detail.to_string(),
    };
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("missing header length"))?.try_into().expect("8 bytes");
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflows"))?;
    let json = bytes.get(8..8usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let blob = &bytes[8 + len..];
    if blob.len() != 8 * header.param_count {
        return Err(bad(&format!(
            "expected {} parameters, found {} bytes",
            header.param_count,
            blob.len()
        )));
    }
    if header.activations.len() + 1 != header.dims.len() || header.frozen.len() != header.activations.len() {
        return Err(bad("dims, activations and frozen flags disagree"));
    }
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut net = Network::build(&header.dims, &header.activations, header.seed)?;
    if net.param_count(1..=net.depth()) != params.len() {
        return Err(bad("parameter count does not match dims"));
    }
    net.set_flat_params(1..=net.depth(), &params)?;
    for (j, &f) in header.frozen.iter().enumerate() {
        net.layer_mut(j + 1)?.frozen = f;
    }
    Ok((net, header))
}

pub fn save(path: &Path, net: &Network, seed: u64, tag: Provenance) -> Result<()> {
    let bytes = encode(net, seed, tag)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, path)
}
