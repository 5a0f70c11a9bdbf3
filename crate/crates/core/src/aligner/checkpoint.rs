//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LUMA"            4 bytes
//! version           u32 (= 1)
//! dim               u32
//! grid              u32
//! blocks            u32
//! ffn_mult          u32
//! heads             u32
//! positional        u32 (0 or 1)
//! parameter count   u64
//! parameters        f32 each, in declaration order (see `param_layout`)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AlignerConfig, AlignerModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LUMA";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &AlignerModel, mut out: W) -> Result<()> {
    let cfg = model.config();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [cfg.dim, cfg.grid, cfg.blocks, cfg.ffn_mult, cfg.heads, cfg.positional as usize] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("config value {v} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(model.num_params() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 * model.num_params());
    for &p in model.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<AlignerModel> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = read_u32(&mut input)? as usize;
    }
    if fields[5] > 1 {
        return Err(Error::Format(format!("bad positional flag {}", fields[5])));
    }
    let config = AlignerConfig {
        dim: fields[0],
        grid: fields[1],
        blocks: fields[2],
        ffn_mult: fields[3],
        heads: fields[4],
        positional: fields[5] == 1,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    let mut b = [0u8; 8];
    input.read_exact(&mut b).map_err(truncated)?;
    let count = u64::from_le_bytes(b);
    let mut model = AlignerModel::zeros(config)?;
    if count != model.num_params() as u64 {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, config needs {}",
            model.num_params()
        )));
    }
    let mut raw = vec![0u8; 4 * model.num_params()];
    input.read_exact(&mut raw).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    for (p, chunk) in model.params_mut().iter_mut().zip(raw.chunks_exact(4)) {
        *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("non-finite parameter in checkpoint".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &AlignerModel, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<AlignerModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
