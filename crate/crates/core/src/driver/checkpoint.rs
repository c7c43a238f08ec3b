//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ACMP" | version u32 | tensor count u32
//! per tensor: name len u16 | name | rank u8 | dims u64 x rank | f64 x numel
//! mask count u32
//! per mask:   name len u16 | name | rank u8 | dims u64 x rank | u8 x numel
//! metadata len u32 | UTF-8 "key=value" lines
//! ```
//!
//! The architecture is stored in metadata under `net.*` keys.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::model::{ConvLayer, FcLayer, Layer, Network};
use crate::schemes::{LayerMask, MaskSet};
use crate::tensor::{ConvGeometry, Tensor};

pub const MAGIC: &[u8; 4] = b"ACMP";
pub const VERSION: u32 = 1;

/// A network, its masks and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub masks: MaskSet,
    /// User metadata; keys must not contain `=` or newlines, values no newlines.
    pub metadata: BTreeMap<String, String>,
}

fn net_metadata(net: &Network) -> Vec<(String, String)> {
    let mut out = vec![
        ("net.arch".to_string(), net.arch.clone()),
        (
            "net.input".to_string(),
            net.input_shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
        ),
        ("net.classes".to_string(), net.classes.to_string()),
    ];
    let kinds: Vec<String> = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::MaxPool { size } => format!("pool{size}"),
            other => other.kind().to_string(),
        })
        .collect();
    out.push(("net.layers".to_string(), kinds.join(",")));
    for (i, l) in net.layers.iter().enumerate() {
        if let Layer::Conv(c) = l {
            let g = &c.geom;
            out.push((
                format!("net.layer{i}.geom"),
                format!("{} {} {} {} {}", g.cin, g.kh, g.kw, g.stride, g.pad),
            ));
            if let Some(cols) = &g.columns {
                let list: Vec<String> = cols.iter().map(usize::to_string).collect();
                out.push((format!("net.layer{i}.columns"), list.join(",")));
            }
        }
    }
    out
}

fn write_header(out: &mut Vec<u8>, name: &str, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.network.validate()?;
    ckpt.masks.check(&ckpt.network)?;
    let mut tensors = Vec::new();
    for (i, l) in ckpt.network.layers.iter().enumerate() {
        if let Some((w, b)) = l.params() {
            tensors.push((format!("layer{i}.weight"), w));
            tensors.push((format!("layer{i}.bias"), b));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        write_header(&mut out, name, t.shape());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut masks = Vec::new();
    for (&li, m) in &ckpt.masks.layers {
        masks.push((format!("layer{li}.filters"), &m.filters));
        masks.push((format!("layer{li}.columns"), &m.columns));
    }
    out.extend_from_slice(&(masks.len() as u32).to_le_bytes());
    for (name, bits) in &masks {
        write_header(&mut out, name, &[bits.len()]);
        out.extend(bits.iter().map(|&b| b as u8));
    }
    let mut meta = String::new();
    for (k, v) in net_metadata(&ckpt.network).iter().chain(
        ckpt.metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<Vec<_>>()
            .iter(),
    ) {
        if k.is_empty() || k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Contract(format!("invalid metadata entry {k:?}")));
        }
        if k.starts_with("net.") && ckpt.metadata.contains_key(k) {
            return Err(Error::Contract(format!("metadata key {k:?} is reserved")));
        }
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    // Write-then-rename so a crash never leaves a truncated checkpoint behind.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(
                self.pos as u64,
                format!("truncated: need {n} bytes for {what}, {} left", self.bytes.len() - self.pos),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Reads an entry header; returns `(name, dims, numel, offset)`.
    fn entry(&mut self) -> Result<(String, Vec<usize>, usize, u64)> {
        let at = self.pos as u64;
        let len = self.u16("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at + 2,
                message: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64("dimension")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Format {
            offset: at,
            message: format!("{name}: dimensions overflow"),
        })?;
        Ok((name, dims, numel, at))
    }
}

/// Parses a checkpoint; fails without partial results on any defect.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return format_err(0, "bad magic, expected \"ACMP\"");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return format_err(4, format!("unsupported version {version}, expected {VERSION}"));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, dims, numel, at) = r.entry()?;
        let need = numel.checked_mul(8).ok_or(Error::Format {
            offset: at,
            message: format!("{name}: payload size overflows"),
        })?;
        let raw = r.take(need, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: at,
            message: format!("{name}: {e}"),
        })?;
        if tensors.insert(name.clone(), t).is_some() {
            return format_err(at, format!("duplicate tensor {name}"));
        }
    }
    let mask_count = r.u32("mask count")?;
    let mut masks = BTreeMap::new();
    for _ in 0..mask_count {
        let (name, _dims, numel, at) = r.entry()?;
        let raw = r.take(numel, &name)?;
        let mut bits = Vec::with_capacity(numel);
        for (i, &b) in raw.iter().enumerate() {
            match b {
                0 => bits.push(false),
                1 => bits.push(true),
                _ => return format_err((r.pos - numel + i) as u64, format!("{name}: mask byte {b} is not 0 or 1")),
            }
        }
        if masks.insert(name.clone(), bits).is_some() {
            return format_err(at, format!("duplicate mask {name}"));
        }
    }
    let meta_at = r.pos as u64;
    let len = r.u32("metadata length")? as usize;
    let text = std::str::from_utf8(r.take(len, "metadata")?).map_err(|_| Error::Format {
        offset: meta_at + 4,
        message: "metadata is not UTF-8".into(),
    })?;
    if r.pos != bytes.len() {
        return format_err(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let mut metadata = BTreeMap::new();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return format_err(meta_at, format!("metadata line {line:?} has no '='"));
        };
        metadata.insert(k.to_string(), v.to_string());
    }
    let meta_err = |m: String| Error::Format {
        offset: meta_at,
        message: m,
    };
    let network = rebuild_network(&mut metadata, &mut tensors).map_err(|e| match e {
        Error::Format { .. } => e,
        other => meta_err(other.to_string()),
    })?;
    if let Some(name) = tensors.keys().next() {
        return Err(meta_err(format!("tensor {name} does not belong to any layer")));
    }
    let mut mask_set = MaskSet::default();
    for li in network.weight_layers() {
        let f = masks.remove(&format!("layer{li}.filters"));
        let c = masks.remove(&format!("layer{li}.columns"));
        match (f, c) {
            (Some(filters), Some(columns)) => {
                mask_set.layers.insert(li, LayerMask { filters, columns });
            }
            _ => return Err(meta_err(format!("missing masks for layer {li}"))),
        }
    }
    if let Some(name) = masks.keys().next() {
        return Err(meta_err(format!("mask {name} does not belong to any layer")));
    }
    mask_set.check(&network).map_err(|e| meta_err(e.to_string()))?;
    Ok(Checkpoint {
        network,
        masks: mask_set,
        metadata,
    })
}

fn rebuild_network(
    meta: &mut BTreeMap<String, String>,
    tensors: &mut BTreeMap<String, Tensor>,
) -> Result<Network> {
    let mut get = |k: &str| meta.remove(k).ok_or_else(|| Error::Config(format!("missing {k}")));
    let arch = get("net.arch")?;
    let input: Vec<usize> = get("net.input")?
        .split('x')
        .map(|s| s.parse().map_err(|_| Error::Config("bad net.input".into())))
        .collect::<Result<_>>()?;
    let input_shape: [usize; 3] = input
        .try_into()
        .map_err(|_| Error::Config("net.input must have 3 extents".into()))?;
    let classes = get("net.classes")?
        .parse()
        .map_err(|_| Error::Config("bad net.classes".into()))?;
    let kinds = get("net.layers")?;
    let mut layers = Vec::new();
    for (i, kind) in kinds.split(',').enumerate() {
        let mut params = |i: usize| -> Result<(Tensor, Tensor)> {
            let w = tensors.remove(&format!("layer{i}.weight"));
            let b = tensors.remove(&format!("layer{i}.bias"));
            w.zip(b).ok_or_else(|| Error::Config(format!("missing tensors for layer {i}")))
        };
        let layer = match kind {
            "relu" => Layer::Relu,
            "flatten" => Layer::Flatten,
            "fc" => {
                let (weight, bias) = params(i)?;
                Layer::Fc(FcLayer { weight, bias })
            }
            "conv" => {
                let g: Vec<usize> = meta
                    .remove(&format!("net.layer{i}.geom"))
                    .ok_or_else(|| Error::Config(format!("missing geometry of layer {i}")))?
                    .split(' ')
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("bad geometry of layer {i}"))))
                    .collect::<Result<_>>()?;
                let [cin, kh, kw, stride, pad] = g[..] else {
                    return Err(Error::Config(format!("bad geometry of layer {i}")));
                };
                let columns = meta
                    .remove(&format!("net.layer{i}.columns"))
                    .map(|s| {
                        s.split(',')
                            .map(|c| c.parse().map_err(|_| Error::Config(format!("bad columns of layer {i}"))))
                            .collect::<Result<Vec<usize>>>()
                    })
                    .transpose()?;
                let (weight, bias) = params(i)?;
                Layer::Conv(ConvLayer {
                    geom: ConvGeometry {
                        cin,
                        kh,
                        kw,
                        stride,
                        pad,
                        columns,
                    },
                    weight,
                    bias,
                })
            }
            pool if pool.starts_with("pool") => Layer::MaxPool {
                size: pool[4..]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad pool size {pool:?}")))?,
            },
            other => return Err(Error::Config(format!("unknown layer kind {other:?}"))),
        };
        layers.push(layer);
    }
    if let Some(k) = meta.keys().find(|k| k.starts_with("net.")) {
        return Err(Error::Config(format!("unexpected architecture key {k}")));
    }
    let net = Network {
        arch,
        input_shape,
        classes,
        layers,
    };
    net.validate()?;
    Ok(net)
}
