//! Binary checkpoint: `NNET` header, named tensor records, CRC-32 trailer.
//!
//! Header: magic, then u32 LE version, precision (32 or 64), level count, mode tag.
//! Record: u32 name length, UTF-8 name, u32 rank, u32 dims, payload.
//! Payload by name prefix: `mask/` packs one bit per element LSB-first, zero-padded
//! to a byte; `meta/` is JSON; `consensus/` is f64; anything else uses the header precision.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::{Consensus, ConsensusRegistry, SegmentLayout};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::nesting::{BinaryMask, MaskHierarchy, NestingParams, StrategyRegistry};
use crate::nn::{Architecture, NestedNetwork};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 4] = b"NNET";
pub const VERSION: u32 = 1;
const MODES: [&str; 4] = ["weight-prune", "channel", "layer", "channel+layer"];
const UNKNOWN_MODE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub precision: Precision,
    pub levels: u32,
    pub mode_tag: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    arch: Architecture,
    mode: String,
    nesting: NestingParams,
    iteration: usize,
    consensus: Option<ConsensusMeta>,
    data: Option<DataMeta>,
}

/// What evaluation needs to rebuild the inputs and labels the network was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub dataset: String,
    /// Hierarchy in its text form, if coarse labels were attached.
    pub hierarchy: Option<String>,
    pub normalization: Option<ChannelStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ConsensusMeta {
    kind: String,
    layout: SegmentLayout,
}

/// Everything a checkpoint restores.
#[derive(Debug)]
pub struct Checkpoint<T: Scalar> {
    pub net: NestedNetwork<T>,
    pub optimizer: OptimizerState<T>,
    pub consensus: Option<Box<dyn Consensus>>,
    pub data: Option<DataMeta>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], payload: &[u8]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    out.extend_from_slice(payload);
}

fn floats<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::PRECISION.bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

/// Serializes the state to checkpoint bytes.
pub fn encode<T: Scalar>(
    net: &NestedNetwork<T>,
    optimizer: Option<&OptimizerState<T>>,
    consensus: Option<&dyn Consensus>,
    data: Option<&DataMeta>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, (T::PRECISION.bytes() * 8) as u32);
    put_u32(&mut out, net.levels() as u32);
    put_u32(
        &mut out,
        MODES
            .iter()
            .position(|m| *m == net.mode())
            .map_or(UNKNOWN_MODE, |i| i as u32),
    );
    let meta = Meta {
        arch: net.arch().clone(),
        mode: net.mode().to_string(),
        nesting: net.nesting_params().clone(),
        iteration: optimizer.map_or(0, |o| o.iteration),
        consensus: consensus.map(|c| ConsensusMeta {
            kind: c.kind().to_string(),
            layout: c.layout().clone(),
        }),
        data: data.cloned(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("meta encoding: {e}")))?;
    put_record(&mut out, "meta/run", &[json.len()], &json);
    let zeros;
    let velocity = match optimizer {
        Some(o) => &o.velocity,
        None => {
            zeros = OptimizerState::new(net).velocity;
            &zeros
        }
    };
    if velocity.len() != net.params().len() {
        return Err(Error::Checkpoint("optimizer state does not match the network".into()));
    }
    for (i, p) in net.params().iter().enumerate() {
        put_record(
            &mut out,
            &format!("param/{}", p.name),
            p.value.shape(),
            &floats(&p.value),
        );
        put_record(
            &mut out,
            &format!("velocity/{}", p.name),
            velocity[i].shape(),
            &floats(&velocity[i]),
        );
        if let Some(h) = net.mask_hierarchy(i) {
            for (k, m) in h.masks().iter().enumerate() {
                put_record(
                    &mut out,
                    &format!("mask/{}/L{}", p.name, k + 1),
                    m.shape(),
                    &pack_bits(m.bits()),
                );
            }
        }
    }
    for b in net.buffers() {
        put_record(
            &mut out,
            &format!("buffer/{}", b.name),
            b.value.shape(),
            &floats(&b.value),
        );
    }
    if let Some(c) = consensus {
        for (name, t) in c.params() {
            put_record(&mut out, &format!("consensus/{name}"), t.shape(), &floats(t));
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

/// Writes via a temporary file and rename so readers never see a partial checkpoint.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    net: &NestedNetwork<T>,
    optimizer: Option<&OptimizerState<T>>,
    consensus: Option<&dyn Consensus>,
    data: Option<&DataMeta>,
) -> Result<()> {
    let bytes = encode(net, optimizer, consensus, data)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

struct Record<'a> {
    dims: Vec<usize>,
    payload: &'a [u8],
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint (bad magic at byte offset 0)".into(),
        ));
    }
    let version = r.u32("version")?;
    let precision = match r.u32("precision")? {
        32 => Precision::F32,
        64 => Precision::F64,
        p => return Err(Error::Checkpoint(format!("unknown precision flag {p}"))),
    };
    Ok(Header {
        version,
        precision,
        levels: r.u32("level count")?,
        mode_tag: r.u32("mode tag")?,
    })
}

/// Reads only the header, for choosing the load precision.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
}

fn parse_records(bytes: &[u8], precision: Precision) -> Result<BTreeMap<String, Record<'_>>> {
    let mut r = Reader { bytes, pos: 20 };
    let mut out = BTreeMap::new();
    while r.pos < bytes.len() {
        let len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::Checkpoint(format!("record name at byte offset {} is not UTF-8", r.pos - len)))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let size = if name.starts_with("mask/") {
            count.div_ceil(8)
        } else if name.starts_with("meta/") {
            count
        } else if name.starts_with("consensus/") {
            count * 8
        } else {
            count * precision.bytes()
        };
        let payload = r.take(size, &name)?;
        if out.insert(name.clone(), Record { dims, payload }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    Ok(out)
}

fn decode_floats<U: Scalar>(name: &str, rec: &Record<'_>, want: &[usize]) -> Result<Tensor<U>> {
    if rec.dims != want {
        return Err(Error::Checkpoint(format!(
            "record {name} has shape {:?}, expected {want:?}",
            rec.dims
        )));
    }
    let w = U::PRECISION.bytes();
    Tensor::new(rec.dims.clone(), rec.payload.chunks_exact(w).map(U::read_le).collect())
}

/// Decodes checkpoint bytes; `T` must match the stored precision.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let header = parse_header(bytes)?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {VERSION})",
            header.version
        )));
    }
    if bytes.len() < 24 {
        return Err(Error::Checkpoint("truncated: no CRC trailer".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    if header.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {:?} values, loader asked for {:?}",
            header.precision,
            T::PRECISION
        )));
    }
    let records = parse_records(body, header.precision)?;
    let get = |name: &str| {
        records
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    };
    let meta: Meta =
        serde_json::from_slice(get("meta/run")?.payload).map_err(|e| Error::Checkpoint(format!("meta/run: {e}")))?;
    let strategy = StrategyRegistry::default().create(&meta.mode, meta.nesting.clone())?;
    let mut net = NestedNetwork::<T>::new(meta.arch, strategy.as_ref(), 0)?;
    if net.levels() != header.levels as usize {
        return Err(Error::Checkpoint(format!(
            "header says {} levels, metadata builds {}",
            header.levels,
            net.levels()
        )));
    }
    let mut optimizer = OptimizerState::new(&net);
    optimizer.iteration = meta.iteration;
    let mut values = Vec::new();
    let mut masks = Vec::new();
    for (i, p) in net.params().iter().enumerate() {
        let shape = p.value.shape().to_vec();
        let name = format!("param/{}", p.name);
        values.push(decode_floats(&name, get(&name)?, &shape)?);
        let name = format!("velocity/{}", p.name);
        optimizer.velocity[i] = decode_floats(&name, get(&name)?, &shape)?;
        if net.mask_hierarchy(i).is_none() {
            continue;
        }
        let mut levels = Vec::new();
        for k in 1..=net.levels() {
            let name = format!("mask/{}/L{k}", p.name);
            let rec = get(&name)?;
            if rec.dims != shape {
                return Err(Error::Checkpoint(format!(
                    "record {name} has shape {:?}, expected {shape:?}",
                    rec.dims
                )));
            }
            let bits = (0..p.value.len())
                .map(|j| rec.payload[j / 8] >> (j % 8) & 1 == 1)
                .collect();
            levels.push(BinaryMask::new(shape.clone(), bits)?);
        }
        masks.push((i, MaskHierarchy::new(levels)?));
    }
    for (p, v) in net.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    for (i, h) in masks {
        net.set_mask_hierarchy(i, h)?;
    }
    for b in net.buffers_mut() {
        let name = format!("buffer/{}", b.name);
        b.value = decode_floats(&name, get(&name)?, b.value.shape())?;
    }
    let consensus = match meta.consensus {
        None => None,
        Some(c) => {
            let mut head = ConsensusRegistry::default().create(&c.kind, c.layout)?;
            let wanted: Vec<(String, Vec<usize>)> = head
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect();
            for (n, shape) in wanted {
                let name = format!("consensus/{n}");
                head.set_param(&n, decode_floats(&name, get(&name)?, &shape)?)?;
            }
            Some(head)
        }
    };
    Ok(Checkpoint {
        net,
        optimizer,
        consensus,
        data: meta.data,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
