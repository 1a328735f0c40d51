//! The `.vvol` on-disk format: a JSON header `<name>.json` next to a raw
//! little-endian payload `<name>.raw` (x fastest, z slowest).
//!
//! ```json
//! { "dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz], "dtype": "f32" }
//! ```
//!
//! A path may be given as `name`, `name.vvol`, `name.json` or `name.raw`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Geometry, Grid3, Mask3, ProbMap3, Volume3, Voxel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
}

/// What a `.vvol` pair decodes to.
#[derive(Clone, Debug, PartialEq)]
pub enum Loaded {
    Volume(Volume3),
    Mask(Mask3),
}

/// `(header path, payload path)` for any accepted spelling of a `.vvol` name.
pub fn pair_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("vvol" | "json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

/// Reads the header and raw payload bytes, checking the size contract.
pub fn read_raw(path: impl AsRef<Path>) -> Result<(Header, Vec<u8>)> {
    let (json_path, raw_path) = pair_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    let geom = Geometry::new(header.dims, header.spacing_mm)?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let width = header.dtype.width();
    if bytes.len() % width != 0 || bytes.len() / width != geom.len() {
        return Err(Error::SizeMismatch {
            expected: geom.len(),
            actual: bytes.len() / width,
        });
    }
    Ok((header, bytes))
}

pub fn write_raw(path: impl AsRef<Path>, header: &Header, payload: &[u8]) -> Result<()> {
    let (json_path, raw_path) = pair_paths(path);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(header)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

fn header_for<T: Voxel>(g: &Grid3<T>, dtype: Dtype) -> Header {
    Header {
        dims: g.dims(),
        spacing_mm: g.spacing(),
        dtype,
    }
}

pub fn encode_f32(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Loads either an intensity volume (`f32`) or a binary mask (`u8`).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Loaded> {
    let (header, bytes) = read_raw(path)?;
    let geom = Geometry::new(header.dims, header.spacing_mm)?;
    match header.dtype {
        Dtype::F32 => Ok(Loaded::Volume(Grid3::new(geom, decode_f32(&bytes))?)),
        Dtype::U8 => Ok(Loaded::Mask(Grid3::new(geom, bytes)?)),
    }
}

pub fn load_intensity(path: impl AsRef<Path>) -> Result<Volume3> {
    match load_volume(path.as_ref())? {
        Loaded::Volume(v) => Ok(v),
        Loaded::Mask(m) => Ok(Grid3::from_parts(
            *m.geometry(),
            m.data().iter().map(|&v| v as f32).collect(),
        )),
    }
}

/// Loads a mask; an `f32` payload is accepted when it is a probability map,
/// and is thresholded at 0.5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask3> {
    match load_volume(path.as_ref())? {
        Loaded::Mask(m) => Ok(m),
        Loaded::Volume(v) => Ok(prob_from_volume(v)?.threshold(0.5)),
    }
}

pub fn load_prob(path: impl AsRef<Path>) -> Result<ProbMap3> {
    match load_volume(path.as_ref())? {
        Loaded::Mask(m) => Ok(ProbMap3::from(&m)),
        Loaded::Volume(v) => prob_from_volume(v),
    }
}

fn prob_from_volume(v: Volume3) -> Result<ProbMap3> {
    let geom = *v.geometry();
    Grid3::new(geom, v.into_data().into_iter().map(f64::from).collect())
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume3) -> Result<()> {
    write_raw(
        path,
        &header_for(v, Dtype::F32),
        &encode_f32(v.data().iter().copied()),
    )
}

pub fn save_mask(path: impl AsRef<Path>, m: &Mask3) -> Result<()> {
    write_raw(path, &header_for(m, Dtype::U8), m.data())
}

/// Stores a probability map as `f32`.
pub fn save_prob(path: impl AsRef<Path>, p: &ProbMap3) -> Result<()> {
    write_raw(
        path,
        &header_for(p, Dtype::F32),
        &encode_f32(p.data().iter().map(|&x| x as f32)),
    )
}
