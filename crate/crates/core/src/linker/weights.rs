//! Binary weights file.
//!
//! Layout (little-endian): magic `LNK1`, version `u32`, tensor count `u32`,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank`
//! `u32` dims and the payload as `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::net::{Architecture, LinkerParams};
use super::{LinkerError, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LNK1";
pub const WEIGHTS_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> LinkerError {
    LinkerError::Format(msg.into())
}

/// Writes every tensor; values are narrowed to `f32`.
pub fn save_params<W: Write>(params: &LinkerParams, mut w: W) -> Result<()> {
    let tensors = params.tensors();
    w.write_all(&WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct RawTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format!("truncated stream while reading {what}")),
        _ => LinkerError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<RawTensor> {
    let mut len = [0u8; 2];
    read_exact(r, &mut len, "tensor name length")?;
    let mut name = vec![0u8; usize::from(u16::from_le_bytes(len))];
    read_exact(r, &mut name, "tensor name")?;
    let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
    let mut rank = [0u8; 1];
    read_exact(r, &mut rank, "tensor rank")?;
    let mut dims = Vec::with_capacity(usize::from(rank[0]));
    for _ in 0..rank[0] {
        dims.push(read_u32(r, "tensor dims")? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(format!("{name}: dims overflow")))?;
    // guard against absurd allocations from corrupted headers
    if count > 1 << 28 {
        return Err(format_err(format!("{name}: {count} values is implausibly large")));
    }
    let mut payload = vec![0u8; count * 4];
    read_exact(r, &mut payload, &name)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(RawTensor { name, dims, data })
}

/// Infers layer sizes from the stored tensor shapes.
fn infer_architecture(raw: &[RawTensor]) -> Result<Architecture> {
    let find = |name: &str| {
        raw.iter()
            .find(|t| t.name == name)
            .ok_or_else(|| format_err(format!("missing tensor {name}")))
    };
    let mut widths = [0; 3];
    for (i, w) in widths.iter_mut().enumerate() {
        let t = find(&format!("temporal.{i}.weight"))?;
        *w = *t
            .dims
            .first()
            .ok_or_else(|| format_err("temporal weight without dims"))?;
    }
    let fc1 = find("mlp.fc1.weight")?;
    let hidden = *fc1
        .dims
        .first()
        .ok_or_else(|| format_err("mlp.fc1.weight without dims"))?;
    Ok(Architecture { widths, hidden })
}

/// Reads a weights stream, checking every tensor against the architecture
/// implied by its conv widths and hidden size.
pub fn load_params<R: Read>(mut r: R) -> Result<LinkerParams> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected LNK1")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != WEIGHTS_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut raw = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        raw.push(read_tensor(&mut r)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(format_err("trailing bytes after the last tensor"));
    }
    let mut params = LinkerParams::zeros(infer_architecture(&raw)?);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec()))
        .collect();
    if raw.len() != expected.len() {
        return Err(format_err(format!(
            "shape mismatch: {} tensors, expected {}",
            raw.len(),
            expected.len()
        )));
    }
    for ((buf, (name, dims)), t) in params.buffers_mut().into_iter().zip(&expected).zip(raw) {
        if &t.name != name || &t.dims != dims {
            return Err(format_err(format!(
                "shape mismatch: got {} {:?}, expected {name} {dims:?}",
                t.name, t.dims
            )));
        }
        *buf = t.data;
    }
    Ok(params)
}

pub fn write_params_file(params: &LinkerParams, path: impl AsRef<Path>) -> Result<()> {
    save_params(params, BufWriter::new(File::create(path)?))
}

pub fn read_params_file(path: impl AsRef<Path>) -> Result<LinkerParams> {
    load_params(BufReader::new(File::open(path)?))
}
