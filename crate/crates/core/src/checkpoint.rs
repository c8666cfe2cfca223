//! Binary checkpoints.
//!
//! ```text
//! "EFGD" | u32 LE version | u32 LE header length | JSON header | f32 LE data
//! ```
//!
//! The data section holds every parameter, then every buffer, layer by layer
//! in declaration order. Momentum velocities are not stored; a loaded
//! network starts with zero velocity.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EFGD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub network: NetworkConfig,
    pub seed: u64,
    /// Completed epochs when the checkpoint was taken.
    pub epoch: usize,
    /// Input standardization the network was trained with.
    pub normalization: Option<Normalization>,
    /// Shapes of the stored tensors, in storage order.
    pub tensors: Vec<Vec<usize>>,
}

fn stored(net: &Network<f32>) -> impl Iterator<Item = &Tensor<f32>> {
    let params = net.layers.iter().flat_map(|l| l.params.iter().map(|p| &p.value));
    let buffers = net.layers.iter().flat_map(|l| l.buffers.iter());
    params.chain(buffers)
}

fn stored_mut(net: &mut Network<f32>) -> Vec<&mut Tensor<f32>> {
    let mut out = Vec::new();
    let mut bufs = Vec::new();
    for l in net.layers.iter_mut() {
        out.extend(l.params.iter_mut().map(|p| &mut p.value));
        bufs.extend(l.buffers.iter_mut());
    }
    out.extend(bufs);
    out
}

pub fn encode(net: &Network<f32>, epoch: usize, normalization: Option<&Normalization>) -> Result<Vec<u8>> {
    let header = Header {
        network: net.config.clone(),
        seed: net.seed,
        epoch,
        normalization: normalization.cloned(),
        tensors: stored(net).map(|t| t.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let values: usize = stored(net).map(Tensor::len).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in stored(net) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn le_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse { offset: at as u64, detail: "truncated checkpoint header".into() })
}

pub fn decode(bytes: &[u8]) -> Result<(Network<f32>, Header)> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("not a checkpoint: expected magic {:?}, found {:?}", MAGIC, &bytes[..bytes.len().min(4)]),
        });
    }
    let version = le_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Parse { offset: 4, detail: format!("unsupported checkpoint version {version}") });
    }
    let len = le_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Parse { offset: 12, detail: format!("header of {len} bytes runs past end of file") })?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Parse { offset: 12, detail: format!("bad header: {e}") })?;
    let mut net = Network::<f32>::build(&header.network, header.seed)?;
    let expected: Vec<Vec<usize>> = stored(&net).map(|t| t.shape().to_vec()).collect();
    if expected != header.tensors {
        return Err(Error::Parse { offset: 12, detail: "tensor shapes do not match the network".into() });
    }
    let mut at = 12 + len;
    for t in stored_mut(&mut net) {
        let n = t.len() * 4;
        let raw = bytes.get(at..at + n).ok_or_else(|| Error::Parse {
            offset: bytes.len() as u64,
            detail: format!("data ends early: need {n} bytes at offset {at}"),
        })?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        at += n;
    }
    if at != bytes.len() {
        return Err(Error::Parse { offset: at as u64, detail: format!("{} trailing bytes", bytes.len() - at) });
    }
    Ok((net, header))
}

pub fn save(path: &Path, net: &Network<f32>, epoch: usize, normalization: Option<&Normalization>) -> Result<()> {
    fs::write(path, encode(net, epoch, normalization)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network<f32>, Header)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
