use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IdpError, Result};
use crate::networks::{Model, NetworkSpec, ProfileRange};
use crate::tensor::Scalar;
use crate::training::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "IDP-CHECKPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

/// Everything but the tensor values. Readable without touching the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec: NetworkSpec,
    pub ranges: Vec<ProfileRange>,
    pub clamp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorRecord>,
    pub payload_bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> IdpError {
    IdpError::Format { file: path.display().to_string(), offset, message: message.into() }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Layout on disk: one line `IDP-CHECKPOINT <version> <header bytes>`, a JSON
/// header of that many bytes, a newline, then little-endian f32 tensor data.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, train: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    let mut records = Vec::new();
    for (name, shape, data) in model.tensors() {
        records.push(TensorRecord { name, shape, offset: payload.len() as u64 });
        for v in data {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        ranges: model.ranges.clone(),
        clamp: model.clamp,
        train: train.cloned(),
        tensors: records,
        payload_bytes: payload.len() as u64,
        sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| IdpError::State(format!("checkpoint header: {e}")))?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        writeln!(f, "{MAGIC} {CHECKPOINT_VERSION} {}", json.len())?;
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")?;
        f.write_all(&payload)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| IdpError::io(path, e))
}

fn split(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, 0, "missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| format_err(path, 0, "header line is not UTF-8"))?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != MAGIC {
        return Err(format_err(path, 0, format!("expected `{MAGIC} <version> <length>`")));
    }
    let version: u32 = parts[1].parse().map_err(|_| format_err(path, 0, "bad version field"))?;
    if version != CHECKPOINT_VERSION {
        return Err(IdpError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len: usize = parts[2].parse().map_err(|_| format_err(path, 0, "bad header length field"))?;
    let start = nl + 1;
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(path, start as u64, format!("header of {len} bytes runs past end of file ({} bytes)", bytes.len())))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[start..end]).map_err(|e| format_err(path, start as u64, format!("header: {e}")))?;
    if header.version != version {
        return Err(IdpError::Version { found: header.version, expected: CHECKPOINT_VERSION });
    }
    if bytes.get(end) != Some(&b'\n') {
        return Err(format_err(path, end as u64, "missing newline after header"));
    }
    Ok((header, end + 1))
}

/// Reads only the header.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IdpError::io(path, e))?;
    Ok(split(&bytes, path)?.0)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IdpError::io(path, e))?;
    let (header, start) = split(&bytes, path)?;
    let payload = &bytes[start..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(format_err(
            path,
            start as u64,
            format!("payload is {} bytes, header declares {}", payload.len(), header.payload_bytes),
        ));
    }
    if hex(&Sha256::digest(payload)) != header.sha256 {
        return Err(format_err(path, start as u64, "payload checksum mismatch"));
    }
    let mut model = Model::<f32>::new(header.spec.clone(), header.ranges.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.clamp = header.clamp;
    let expected: Vec<(String, Vec<usize>, usize)> =
        model.tensors().into_iter().map(|(n, s, d)| (n, s, d.len())).collect();
    if expected.len() != header.tensors.len() {
        return Err(format_err(
            path,
            start as u64,
            format!("{} tensors stored, the architecture has {}", header.tensors.len(), expected.len()),
        ));
    }
    for ((rec, (name, shape, len)), dst) in header.tensors.iter().zip(&expected).zip(model.tensors_mut()) {
        if &rec.name != name || &rec.shape != shape {
            return Err(format_err(path, start as u64, format!("tensor `{}` {:?} where `{name}` {shape:?} was expected", rec.name, rec.shape)));
        }
        let off = rec.offset as usize;
        let src = payload
            .get(off..off + 4 * len)
            .ok_or_else(|| format_err(path, (start + off) as u64, format!("tensor `{name}` runs past the payload")))?;
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok(Checkpoint { header, model })
}
