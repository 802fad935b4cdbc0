//! FPC binary featured point clouds.
//!
//! Layout, little-endian: `b"FPC1"`, `u32` vertex count N, `u32` feature
//! dimension D, N×3 `f32` vertices, N `u16` per-vertex feature counts, then
//! every feature vector as D `f32` in vertex order.

use std::fs;
use std::io;
use std::path::Path;

use canon9d_core::surface::{normalize_feature_block, FeaturedSurface, SurfaceError};
use nalgebra::Vector3;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FPC1";
const HEADER_LEN: usize = 12;
/// Deviation from unit norm above which a load logs a warning.
const NORM_WARN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FpcError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("file truncated: need {needed} bytes, have {actual}")]
    TruncatedFile { needed: usize, actual: usize },
    #[error("feature block holds {actual} bytes, counts × dimension imply {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vertex {vertex} has {count} features, more than a u16 count allows")]
    CountOverflow { vertex: usize, count: usize },
    #[error("zero or non-finite feature vector")]
    ZeroFeature,
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

pub fn encode(surface: &FeaturedSurface) -> Result<Vec<u8>, FpcError> {
    let n = surface.len();
    let d = surface.feature_dim();
    let block = surface.feature_block();
    let mut out = Vec::with_capacity(HEADER_LEN + n * 14 + block.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in surface.vertices() {
        for c in v.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for (vertex, count) in surface.feature_counts().enumerate() {
        let c = u16::try_from(count).map_err(|_| FpcError::CountOverflow { vertex, count })?;
        out.extend_from_slice(&c.to_le_bytes());
    }
    for f in block {
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize) -> Result<&'a [u8], FpcError> {
    let end = *at + len;
    if end > bytes.len() {
        return Err(FpcError::TruncatedFile {
            needed: end,
            actual: bytes.len(),
        });
    }
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn f32_at(chunk: &[u8]) -> f32 {
    f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]])
}

/// Parses an FPC image. Feature vectors off unit norm by more than the
/// surface tolerance are renormalized.
pub fn decode(bytes: &[u8]) -> Result<FeaturedSurface, FpcError> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4)?;
    if magic != MAGIC {
        return Err(FpcError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let n = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap()) as usize;
    let vertices: Vec<Vector3<f64>> = take(bytes, &mut at, n * 12)?
        .chunks_exact(12)
        .map(|c| {
            Vector3::new(
                f32_at(&c[0..4]) as f64,
                f32_at(&c[4..8]) as f64,
                f32_at(&c[8..12]) as f64,
            )
        })
        .collect();
    let counts: Vec<usize> = take(bytes, &mut at, n * 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    let total: usize = counts.iter().sum();
    let expected = total * d * 4;
    let rest = &bytes[at..];
    if rest.len() < expected {
        return Err(FpcError::TruncatedFile {
            needed: at + expected,
            actual: bytes.len(),
        });
    }
    if rest.len() > expected {
        return Err(FpcError::DimensionMismatch {
            expected,
            actual: rest.len(),
        });
    }
    let mut features: Vec<f32> = rest.chunks_exact(4).map(f32_at).collect();
    if d > 0 {
        let worst = normalize_feature_block(&mut features, d).ok_or(FpcError::ZeroFeature)?;
        if worst > NORM_WARN {
            log::warn!("renormalized features deviating from unit norm by up to {worst:.2e}");
        }
    }
    Ok(FeaturedSurface::new(vertices, d, &counts, features)?)
}

pub fn write_fpc(surface: &FeaturedSurface, path: &Path) -> Result<(), FpcError> {
    fs::write(path, encode(surface)?)?;
    Ok(())
}

pub fn read_fpc(path: &Path) -> Result<FeaturedSurface, FpcError> {
    decode(&fs::read(path)?)
}
