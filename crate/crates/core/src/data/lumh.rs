//! Binary grid files.
//!
//! ```text
//! "LUMH"      4 bytes
//! version     u32 LE (= 1)
//! rows        u32 LE
//! cols        u32 LE
//! channels    u32 LE
//! payload     rows * cols * channels f32 LE, row-major, channel-minor
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::aligner::ImageEmbeddings;
use crate::error::{Error, Result};
use crate::grid::Heatmap;

const MAGIC: &[u8; 4] = b"LUMH";
const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;

/// `channels` grids of `rows x cols`, stored interleaved per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GridStack {
    pub fn from_heatmaps(maps: &[Heatmap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("heatmaps", "need at least one channel"))?;
        let (rows, cols) = first.shape();
        let channels: Vec<&[f64]> = maps.iter().map(|m| m.data()).collect();
        Self::from_channels(rows, cols, &channels)
    }

    /// Interleaves row-major channel grids.
    pub fn from_channels(rows: usize, cols: usize, channels: &[&[f64]]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("grids", "need at least one channel"));
        }
        let n = channels.len();
        let mut data = vec![0.0; rows * cols * n];
        for (ch, grid) in channels.iter().enumerate() {
            if grid.len() != rows * cols {
                return Err(Error::ShapeMismatch {
                    what: "grid channel",
                    expected: (rows, cols),
                    found: (grid.len() / cols.max(1), cols),
                });
            }
            for (i, &v) in grid.iter().enumerate() {
                data[i * n + ch] = v;
            }
        }
        Ok(Self {
            rows,
            cols,
            channels: n,
            data,
        })
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.channels).copied().collect()
    }

    pub fn to_heatmaps(&self) -> Result<Vec<Heatmap>> {
        (0..self.channels)
            .map(|ch| Heatmap::new(self.rows, self.cols, self.channel(ch)))
            .collect()
    }
}

pub fn write_grids<W: Write>(mut out: W, grids: &GridStack) -> Result<()> {
    let n = grids.rows * grids.cols * grids.channels;
    if grids.data.len() != n {
        return Err(Error::ShapeMismatch {
            what: "grid stack",
            expected: (grids.rows * grids.cols, grids.channels),
            found: (grids.data.len(), 1),
        });
    }
    if grids.data.iter().any(|v| !v.is_finite() || !(*v as f32).is_finite()) {
        return Err(Error::NonFinite("grid file payload"));
    }
    let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * n);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION as usize, grids.rows, grids.cols, grids.channels] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &grids.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Reads a whole grid file; truncated or padded input is an error.
pub fn read_grids<R: Read>(mut input: R) -> Result<GridStack> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format("truncated grid header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad grid magic {:?}", &bytes[..4])));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if field(0) != VERSION as usize {
        return Err(Error::Format(format!("unsupported grid version {}", field(0))));
    }
    let (rows, cols, channels) = (field(1), field(2), field(3));
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "grid payload has {} bytes, header implies {}",
            payload.len(),
            4 * n
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grid file payload"));
    }
    Ok(GridStack {
        rows,
        cols,
        channels,
        data,
    })
}

pub fn write_heatmap(path: &Path, maps: &[Heatmap]) -> Result<()> {
    write_grids(BufWriter::new(File::create(path)?), &GridStack::from_heatmaps(maps)?)
}

pub fn read_heatmap(path: &Path) -> Result<Vec<Heatmap>> {
    read_grids(BufReader::new(File::open(path)?))?.to_heatmaps()
}

pub fn write_embeddings(path: &Path, emb: &ImageEmbeddings) -> Result<()> {
    let stack = GridStack {
        rows: emb.rows,
        cols: emb.cols,
        channels: emb.dim,
        data: emb.data.clone(),
    };
    write_grids(BufWriter::new(File::create(path)?), &stack)
}

pub fn read_embeddings(path: &Path) -> Result<ImageEmbeddings> {
    let s = read_grids(BufReader::new(File::open(path)?))?;
    ImageEmbeddings::new(s.rows, s.cols, s.channels, s.data)
}
