//! File formats: 2-D `.npy` arrays, the named-tensor weight container, and
//! grayscale PNG export.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::Parameterized;

/// A single-channel image plane in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::validation(format!(
                "plane data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Plane { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Plane { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Writes a 2-D little-endian `f32` array in NumPy format.
pub fn write_npy(path: &Path, plane: &Plane) -> Result<()> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}",
        plane.height, plane.width
    );
    // Pad so that the data starts on a 64-byte boundary.
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + plane.data.len() * 4);
    bytes.extend_from_slice(NPY_MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in &plane.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    if let Some(inner) = rest.strip_prefix('(') {
        return Some(&inner[..inner.find(')')?]);
    }
    if let Some(inner) = rest.strip_prefix('\'') {
        return Some(&inner[..inner.find('\'')?]);
    }
    Some(rest[..rest.find(',').unwrap_or(rest.len())].trim())
}

/// Reads a 2-D `.npy` array of `<f4` or `<f8` values in C order.
pub fn read_npy(path: &Path) -> Result<Plane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format(path, d);
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("missing NumPy magic"));
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => {
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(bad(&format!("unsupported npy version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(offset..offset + header_len).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if header_value(header, "fortran_order") != Some("False") {
        return Err(bad("only C-ordered arrays are supported"));
    }
    let dims: Vec<usize> = header_value(header, "shape")
        .ok_or_else(|| bad("missing shape"))?
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(bad(&format!("expected a 2-D array, got shape {dims:?}")));
    }
    let count = dims[0] * dims[1];
    let body = &bytes[offset + header_len..];
    let data: Vec<f32> = match header_value(header, "descr") {
        Some("<f4") if body.len() >= count * 4 => {
            body[..count * 4].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        }
        Some("<f8") if body.len() >= count * 8 => body[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
        Some(d) => return Err(bad(&format!("unsupported dtype '{d}' or truncated data"))),
        None => return Err(bad("missing descr")),
    };
    Plane::new(dims[0], dims[1], data)
}

/// Reads an 8- or 16-bit grayscale PNG as raw intensities.
pub fn read_png(path: &Path) -> Result<Plane> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(f32::from).collect(),
        other => other.into_luma16().into_raw().into_iter().map(f32::from).collect(),
    };
    Plane::new(h, w, data)
}

/// Reads a slice file by extension (`.npy` or `.png`).
pub fn read_slice(path: &Path) -> Result<Plane> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("npy") => read_npy(path),
        Some("png") => read_png(path),
        _ => Err(Error::format(path, "unsupported slice extension (expected .npy or .png)")),
    }
}

/// Writes a plane as an 8-bit PNG after min-max stretching to `[0, 255]`.
pub fn write_png_stretched(path: &Path, plane: &Plane) -> Result<()> {
    let (lo, hi) = plane.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = plane.data.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(plane.width as u32, plane.height as u32, bytes)
        .ok_or_else(|| Error::validation("plane dimensions do not match data"))?;
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes an 8-bit PNG mapping `[-1, 1]` linearly onto `[0, 255]`.
pub fn write_png_signed_unit(path: &Path, plane: &Plane) -> Result<()> {
    let bytes: Vec<u8> = plane.data.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(plane.width as u32, plane.height as u32, bytes)
        .ok_or_else(|| Error::validation("plane dimensions do not match data"))?;
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

const CONTAINER_MAGIC: &[u8; 8] = b"BRNMTNSR";
/// Version tag of the named-tensor container.
pub const CONTAINER_VERSION: u32 = 1;

/// One entry of a named-tensor container.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes named tensors:
/// `magic | u32 version | u32 count | { u32 name_len | name | u32 ndim | u64 dims.. | f32 data.. }`,
/// all little-endian.
pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(CONTAINER_MAGIC)?;
    put(&CONTAINER_VERSION.to_le_bytes())?;
    put(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        put(&(t.name.len() as u32).to_le_bytes())?;
        put(t.name.as_bytes())?;
        put(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            put(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| Error::format(path, "truncated tensor container"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CONTAINER_MAGIC {
        return Err(Error::format(path, "not a tensor container"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CONTAINER_VERSION {
        return Err(Error::format(path, format!("unsupported container version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| Error::format(path, "bad tensor name"))?;
        let ndim = u32_at(take(4)?) as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize))
            .collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let data = take(len * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

/// Snapshot of a network's parameters, optionally with a name prefix.
pub fn collect_params<P: Parameterized>(net: &P, prefix: &str) -> Vec<NamedTensor> {
    net.params()
        .into_iter()
        .map(|p| NamedTensor { name: format!("{prefix}{}", p.name), shape: p.shape, data: p.data.to_vec() })
        .collect()
}

/// Copies matching tensors into `net`. Every parameter must be present with
/// the right length.
pub fn load_params<P: Parameterized>(net: &mut P, tensors: &[NamedTensor], prefix: &str) -> Result<()> {
    for p in net.params_mut() {
        let key = format!("{prefix}{}", p.name);
        let t = tensors
            .iter()
            .find(|t| t.name == key)
            .ok_or_else(|| Error::validation(format!("missing parameter '{key}'")))?;
        if t.data.len() != p.data.len() {
            return Err(Error::validation(format!(
                "parameter '{key}' has {} values, expected {} (architecture mismatch)",
                t.data.len(),
                p.data.len()
            )));
        }
        p.data.copy_from_slice(&t.data);
    }
    Ok(())
}

pub fn save_network<P: Parameterized>(path: &Path, net: &P) -> Result<()> {
    write_tensors(path, &collect_params(net, ""))
}

pub fn load_network<P: Parameterized>(path: &Path, net: &mut P) -> Result<()> {
    load_params(net, &read_tensors(path)?, "")
}
