//! Versioned binary checkpoint.
//!
//! Layout: the magic bytes `DDTBCKPT`, a little-endian `u32` format
//! version, then sections of `[4-byte tag][u64 length][payload]`. Readers
//! skip tags they do not know. `META` holds the descriptor and all small
//! state as JSON; `TENS` holds named tensors as little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateController;
use crate::models::{ModelDescriptor, Network, SiteQuantizer};
use crate::nn::{BatchNormParams, Conv2dParams};
use crate::quant::WeightQuantizer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DDTBCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GateMeta {
    quantized: bool,
    gate_bits: u32,
    act_bounds: [Option<(f64, f64)>; 2],
    bound_momentum: f64,
    bn: BatchNormParams,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    descriptor: ModelDescriptor,
    act_quant: Vec<(usize, SiteQuantizer)>,
    weight_quant: Vec<(usize, WeightQuantizer)>,
    bns: Vec<(usize, BatchNormParams)>,
    prelus: Vec<(usize, f64)>,
    gates: Vec<(usize, GateMeta)>,
    /// Free-form annotations (epoch, metrics, ...).
    notes: BTreeMap<String, String>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend((v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Serialise a network with free-form `notes`.
pub fn encode(net: &Network, notes: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let meta = Meta {
        descriptor: net.desc.clone(),
        act_quant: net.act_quant.iter().map(|(&i, &q)| (i, q)).collect(),
        weight_quant: net.weight_quant.iter().map(|(&i, &q)| (i, q)).collect(),
        bns: net.bns.iter().map(|(&i, b)| (i, b.clone())).collect(),
        prelus: net.prelus.iter().map(|(&i, &s)| (i, s)).collect(),
        gates: net
            .gates
            .iter()
            .map(|(&i, g)| {
                (
                    i,
                    GateMeta {
                        quantized: g.quantized,
                        gate_bits: g.gate_bits,
                        act_bounds: g.act_bounds,
                        bound_momentum: g.bound_momentum,
                        bn: g.bn.clone(),
                    },
                )
            })
            .collect(),
        notes: notes.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::State(format!("checkpoint metadata: {e}")))?;

    let mut tens = Vec::new();
    let mut count = 0u32;
    let mut add = |name: String, t: &Tensor| {
        put_tensor(&mut tens, &name, t);
        count += 1;
    };
    for (i, c) in &net.convs {
        add(format!("conv.{i}.weight"), &c.weight);
        if let Some(b) = &c.bias {
            add(format!("conv.{i}.bias"), b);
        }
    }
    for (i, g) in &net.gates {
        add(format!("gate.{i}.conv1.weight"), &g.conv1.weight);
        add(format!("gate.{i}.conv2.weight"), &g.conv2.weight);
        if let Some(b) = &g.conv1.bias {
            add(format!("gate.{i}.conv1.bias"), b);
        }
        if let Some(b) = &g.conv2.bias {
            add(format!("gate.{i}.conv2.bias"), b);
        }
    }
    let mut tens_section = count.to_le_bytes().to_vec();
    tens_section.extend(tens);

    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    for (tag, payload) in [(b"META", json), (b"TENS", tens_section)] {
        out.extend(tag);
        out.extend((payload.len() as u64).to_le_bytes());
        out.extend(payload);
    }
    Ok(out)
}

/// Inverse of [`encode`]. Weights come back rounded to `f32`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Network, BTreeMap<String, String>)> {
    let corrupt = |d: &str| Error::io(path, format!("corrupt checkpoint: {d}"));
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32().ok_or_else(|| corrupt("missing version"))?;
    if version > VERSION {
        return Err(Error::io(path, format!("checkpoint version {version} is newer than supported {VERSION}")));
    }
    let mut meta: Option<Meta> = None;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while r.pos < bytes.len() {
        let tag = r.take(4).ok_or_else(|| corrupt("truncated section tag"))?;
        let len = r.u64().ok_or_else(|| corrupt("truncated section length"))? as usize;
        let payload = r.take(len).ok_or_else(|| corrupt("truncated section"))?;
        match tag {
            b"META" => meta = Some(serde_json::from_slice(payload).map_err(|e| corrupt(&e.to_string()))?),
            b"TENS" => {
                let mut t = Reader { buf: payload, pos: 0 };
                let n = t.u32().ok_or_else(|| corrupt("tensor count"))?;
                for _ in 0..n {
                    let nl = t.u32().ok_or_else(|| corrupt("tensor name"))? as usize;
                    let name = String::from_utf8(t.take(nl).ok_or_else(|| corrupt("tensor name"))?.to_vec())
                        .map_err(|_| corrupt("tensor name"))?;
                    let nd = t.u32().ok_or_else(|| corrupt("tensor rank"))? as usize;
                    let shape = (0..nd).map(|_| t.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(|| corrupt("tensor shape"))?;
                    let count: usize = shape.iter().product();
                    let raw = t.take(count * 4).ok_or_else(|| corrupt("tensor data"))?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
                    tensors.insert(name, Tensor::new(shape, data)?);
                }
            }
            _ => {}
        }
    }
    let meta = meta.ok_or_else(|| corrupt("missing META section"))?;
    let mut take = |name: String| tensors.remove(&name).ok_or_else(|| corrupt(&format!("missing tensor {name}")));

    let mut convs = BTreeMap::new();
    for (i, l) in meta.descriptor.layers.iter().enumerate() {
        if let crate::models::LayerKind::Conv { stride, kernel, bias, .. } = l.kind {
            let weight = take(format!("conv.{i}.weight"))?;
            let bias = if bias { Some(take(format!("conv.{i}.bias"))?) } else { None };
            convs.insert(i, Conv2dParams { weight, bias, stride, pad: kernel / 2 });
        }
    }
    let mut gates = BTreeMap::new();
    for (i, gm) in meta.gates {
        let conv1 = Conv2dParams { weight: take(format!("gate.{i}.conv1.weight"))?, bias: Some(take(format!("gate.{i}.conv1.bias"))?), stride: 2, pad: 1 };
        let conv2 = Conv2dParams { weight: take(format!("gate.{i}.conv2.weight"))?, bias: Some(take(format!("gate.{i}.conv2.bias"))?), stride: 1, pad: 0 };
        gates.insert(
            i,
            GateController {
                conv1,
                bn: gm.bn,
                conv2,
                quantized: gm.quantized,
                gate_bits: gm.gate_bits,
                act_bounds: gm.act_bounds,
                bound_momentum: gm.bound_momentum,
            },
        );
    }
    let net = Network {
        desc: meta.descriptor,
        convs,
        bns: meta.bns.into_iter().collect(),
        prelus: meta.prelus.into_iter().collect(),
        act_quant: meta.act_quant.into_iter().collect(),
        weight_quant: meta.weight_quant.into_iter().collect(),
        gates,
    };
    Ok((net, meta.notes))
}

pub fn save_checkpoint(net: &Network, notes: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net, notes)?).map_err(|e| Error::io(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e.to_string()))?;
    decode(&bytes, path)
}
