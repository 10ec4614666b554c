//! Self-contained model files.
//!
//! Layout: a magic line, one line of JSON header (format version, schema,
//! codecs, copula architecture and orderings, fit metadata, payload size and
//! SHA-256), then the binary payload. The payload is a sequence of named
//! blocks, each `u32` name length, UTF-8 name, `u64` value count and the
//! values as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::copula::{CopulaArchitecture, CopulaFlowStack, ACTIVATION};
use crate::data::{write_atomic, Schema};
use crate::discrete::{CategoryCodec, DiscreteMarginalFlow};
use crate::error::{Error, Result};
use crate::marginal::MarginalFlowModel;
use crate::spline::RawSplineParams;
use crate::trainer::{ColumnModel, FitMetadata, FittedModel};

pub const MAGIC: &str = "COPULAFLOW MODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    schema: Schema,
    codecs: Vec<Option<CategoryCodec>>,
    copula: Option<CopulaHeader>,
    metadata: FitMetadata,
    payload_bytes: u64,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CopulaHeader {
    architecture: CopulaArchitecture,
    activation: String,
    orderings: Vec<Vec<usize>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_block(out: &mut Vec<u8>, name: &str, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model to bytes.
pub fn to_bytes(model: &FittedModel) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for (i, m) in model.marginals().iter().enumerate() {
        let params = match m {
            ColumnModel::Continuous(c) => {
                let p = c.params();
                push_block(&mut payload, &format!("marginal{i}.bounds"), &[p.bounds.0, p.bounds.1]);
                p
            }
            ColumnModel::Discrete(d) => d.params(),
        };
        push_block(&mut payload, &format!("marginal{i}.raw"), &params.to_flat());
    }
    let copula = model.copula().map(|c| {
        let p = c.params();
        for b in p.layout() {
            push_block(&mut payload, &format!("copula.{}", b.name), &p.values()[b.range()]);
        }
        CopulaHeader {
            architecture: c.architecture().clone(),
            activation: ACTIVATION.to_string(),
            orderings: c.layers().iter().map(|l| l.ordering().to_vec()).collect(),
        }
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        schema: model.schema().clone(),
        codecs: model.codecs(),
        copula,
        metadata: model.metadata().clone(),
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + payload.len() + 2);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Blocks<'a> {
    rest: &'a [u8],
}

impl Blocks<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.rest.len() < n {
            return Err(Error::Integrity("payload ends inside a block".into()));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    /// Reads the next block, which must be called `name`.
    fn expect(&mut self, name: &str) -> Result<Vec<f64>> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        let found = std::str::from_utf8(self.take(len)?).map_err(|_| Error::Integrity("block name is not UTF-8".into()))?;
        if found != name {
            return Err(Error::Integrity(format!("expected block `{name}`, found `{found}`")));
        }
        let count = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Integrity("block too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn integrity(e: Error) -> Error {
    match e {
        Error::Integrity(_) | Error::Version { .. } => e,
        other => Error::Integrity(other.to_string()),
    }
}

/// Parses a model from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<FittedModel> {
    let magic_end = MAGIC.len();
    if bytes.len() <= magic_end || &bytes[..magic_end] != MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
        return Err(Error::Integrity("not a model file (bad magic line)".into()));
    }
    let body = &bytes[magic_end + 1..];
    let nl = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Integrity("header line is truncated".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&body[..nl]).map_err(|e| Error::Integrity(format!("header is not JSON: {e}")))?;
    // Check the version before anything else so newer files fail clearly.
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Integrity("header has no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
    let payload = &body[nl + 1..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    if header.codecs.len() != header.schema.len() {
        return Err(Error::Integrity("codec list does not match the schema".into()));
    }

    let mut blocks = Blocks { rest: payload };
    let mut marginals = Vec::with_capacity(header.schema.len());
    for (i, (spec, codec)) in header.schema.columns().iter().zip(&header.codecs).enumerate() {
        let m = match codec {
            None => {
                let b = blocks.expect(&format!("marginal{i}.bounds"))?;
                if b.len() != 2 {
                    return Err(Error::Integrity(format!("bounds block of column {i} has {} values", b.len())));
                }
                let raw = RawSplineParams::from_flat(&blocks.expect(&format!("marginal{i}.raw"))?, (b[0], b[1]))
                    .map_err(integrity)?;
                ColumnModel::Continuous(MarginalFlowModel::new(&spec.name, raw).map_err(integrity)?)
            }
            Some(codec) => {
                let n = codec.n_classes();
                let raw = RawSplineParams::from_flat(
                    &blocks.expect(&format!("marginal{i}.raw"))?,
                    (-1.0, n as f64 - 1.0),
                )
                .map_err(integrity)?;
                ColumnModel::Discrete(DiscreteMarginalFlow::new(&spec.name, codec.clone(), raw).map_err(integrity)?)
            }
        };
        marginals.push(m);
    }
    let copula = match header.copula {
        None => None,
        Some(h) => {
            if h.activation != ACTIVATION {
                return Err(Error::Integrity(format!("unsupported activation `{}`", h.activation)));
            }
            let mut stack = CopulaFlowStack::zeros(h.architecture).map_err(integrity)?;
            let mut values = Vec::with_capacity(stack.params().len());
            for b in stack.params().layout() {
                let v = blocks.expect(&format!("copula.{}", b.name))?;
                if v.len() != b.len {
                    return Err(Error::Integrity(format!("block `{}` has {} values, expected {}", b.name, v.len(), b.len)));
                }
                values.extend(v);
            }
            stack.set_params(values).map_err(integrity)?;
            let orderings: Vec<Vec<usize>> = stack.layers().iter().map(|l| l.ordering().to_vec()).collect();
            if orderings != h.orderings {
                return Err(Error::Integrity("layer orderings do not match the architecture".into()));
            }
            Some(stack)
        }
    };
    if !blocks.rest.is_empty() {
        return Err(Error::Integrity("trailing bytes after the last block".into()));
    }
    FittedModel::new(header.schema, marginals, copula, header.metadata).map_err(integrity)
}

/// Writes a model file atomically.
pub fn save_model(model: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
