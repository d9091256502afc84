//! Binary parameter checkpoints.
//!
//! Layout: the magic `OPTGYMCK`, a little-endian `u32` version, a `u64`
//! header length, a JSON header naming every tensor with its shape, then all
//! tensors as row-major little-endian `f64` in header order.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::nn::{Activation, Dense, DenseNet};
use super::policy::{ActionSpaceKind, PolicyHeads, PolicyParams};
use super::AgentError;
use crate::features::EnvLimits;

const MAGIC: &[u8; 8] = b"OPTGYMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetInfo {
    name: String,
    activations: Vec<Activation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    limits: EnvLimits,
    space: ActionSpaceKind,
    nets: Vec<NetInfo>,
    tensors: Vec<TensorInfo>,
}

pub fn to_bytes(params: &PolicyParams) -> Vec<u8> {
    let mut nets = Vec::new();
    let mut tensors = Vec::new();
    for (name, net) in params.named_nets() {
        nets.push(NetInfo {
            name: name.to_string(),
            activations: net.layers.iter().map(|l| l.activation).collect(),
        });
        for (i, l) in net.layers.iter().enumerate() {
            tensors.push(TensorInfo {
                name: format!("{name}.{i}.weight"),
                shape: l.weights.shape().to_vec(),
            });
            tensors.push(TensorInfo {
                name: format!("{name}.{i}.bias"),
                shape: vec![l.bias.len()],
            });
        }
    }
    let header = Header {
        version: VERSION,
        limits: params.limits,
        space: params.space(),
        nets,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    params.visit(&mut |s| {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

fn bad(msg: impl Into<String>) -> AgentError {
    AgentError::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolicyParams, AgentError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let mut data = bytes[20 + hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors = header.tensors.iter();

    let mut nets = Vec::new();
    for info in &header.nets {
        let mut layers = Vec::new();
        for (i, &act) in info.activations.iter().enumerate() {
            let w = tensors.next().ok_or_else(|| bad("missing tensor"))?;
            let b = tensors.next().ok_or_else(|| bad("missing tensor"))?;
            if w.name != format!("{}.{i}.weight", info.name) || w.shape.len() != 2 || b.shape.len() != 1 {
                return Err(bad(format!("unexpected tensor {}", w.name)));
            }
            let wv: Vec<f64> = data.by_ref().take(w.shape[0] * w.shape[1]).collect();
            let bv: Vec<f64> = data.by_ref().take(b.shape[0]).collect();
            if wv.len() != w.shape[0] * w.shape[1] || bv.len() != b.shape[0] || b.shape[0] != w.shape[0] {
                return Err(bad("truncated tensor data"));
            }
            layers.push(Dense {
                weights: Array2::from_shape_vec((w.shape[0], w.shape[1]), wv).map_err(|e| bad(e.to_string()))?,
                bias: Array1::from(bv),
                activation: act,
            });
        }
        nets.push((info.name.as_str(), DenseNet { layers }));
    }
    if data.next().is_some() {
        return Err(bad("trailing data"));
    }

    let mut take = |name: &str| -> Result<DenseNet, AgentError> {
        let at = nets
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| bad(format!("missing network {name}")))?;
        Ok(nets.remove(at).1)
    };
    let backbone = take("backbone")?;
    let heads = match header.space {
        ActionSpaceKind::Hierarchical => PolicyHeads::Hierarchical {
            transform_head: take("transform_head")?,
            tile_head: take("tile_head")?,
            interchange_head: take("interchange_head")?,
        },
        ActionSpaceKind::Simple => PolicyHeads::Simple {
            flat_head: take("flat_head")?,
        },
    };
    let value_net = take("value_net")?;
    Ok(PolicyParams {
        limits: header.limits,
        backbone,
        heads,
        value_net,
    })
}

pub fn save(params: &PolicyParams, path: &Path) -> Result<(), AgentError> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams, AgentError> {
    from_bytes(&std::fs::read(path)?)
}
