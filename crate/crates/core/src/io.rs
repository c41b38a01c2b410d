//! File formats: annotation CSV, binary density dumps, PGM images, and the
//! hex encoding used for bit-faithful JSON reals.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DMAP_MAGIC: &[u8; 8] = b"DMAPf32\n";
/// Magic plus the two dimensions.
pub const DMAP_HEADER_LEN: usize = 16;

/// Reals formatted with 9 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub mod hex {
    use crate::error::{Error, Result};

    pub fn encode(v: f64) -> String {
        format!("{:016x}", v.to_bits())
    }

    pub fn decode(s: &str) -> Result<f64> {
        if s.len() != 16 {
            return Err(Error::Format(format!("hex real {s:?} must have 16 digits")));
        }
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|e| Error::Format(format!("hex real {s:?}: {e}")))
    }

    pub fn encode_all(v: &[f64]) -> Vec<String> {
        v.iter().map(|&x| encode(x)).collect()
    }

    pub fn decode_all(v: &[String]) -> Result<Vec<f64>> {
        v.iter().map(|s| decode(s)).collect()
    }

    pub fn encode_pair(v: [f64; 2]) -> [String; 2] {
        [encode(v[0]), encode(v[1])]
    }

    pub fn decode_pair(v: &[String; 2]) -> Result<[f64; 2]> {
        Ok([decode(&v[0])?, decode(&v[1])?])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationRow {
    image_id: String,
    x: f64,
    y: f64,
}

/// Writes `image_id,x,y` rows; groups with no points produce no rows.
pub fn write_annotations(path: &Path, groups: &BTreeMap<String, Vec<[f64; 2]>>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "image_id,x,y")?;
    for (id, points) in groups {
        if id.contains([',', '"', '\n']) {
            return Err(Error::Format(format!("image id {id:?} needs quoting")));
        }
        for p in points {
            writeln!(out, "{id},{},{}", fmt_float(p[0]), fmt_float(p[1]))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<[f64; 2]>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "x", "y"] {
        return Err(Error::Format(format!("annotation header {headers:?}")));
    }
    let mut groups: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: AnnotationRow = row?;
        groups.entry(row.image_id).or_default().push([row.x, row.y]);
    }
    Ok(groups)
}

/// Serializes an H×W map as magic, little-endian u32 H and W, then f32
/// values row-major.
pub fn dmap_bytes(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "{height}×{width} map needs {} values, got {}",
            height * width,
            values.len()
        )));
    }
    let h = u32::try_from(height).map_err(|_| Error::Format("height exceeds u32".into()))?;
    let w = u32::try_from(width).map_err(|_| Error::Format("width exceeds u32".into()))?;
    let mut bytes = Vec::with_capacity(DMAP_HEADER_LEN + 4 * values.len());
    bytes.extend_from_slice(DMAP_MAGIC);
    bytes.extend_from_slice(&h.to_le_bytes());
    bytes.extend_from_slice(&w.to_le_bytes());
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(bytes)
}

pub fn parse_dmap(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < DMAP_HEADER_LEN || &bytes[..8] != DMAP_MAGIC {
        return Err(Error::Format("missing DMAPf32 header".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[DMAP_HEADER_LEN..];
    if body.len() != 4 * h * w {
        return Err(Error::Format(format!(
            "{h}×{w} map needs {} payload bytes, found {}",
            4 * h * w,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((h, w, values))
}

pub fn write_dmap(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, dmap_bytes(height, width, values)?)?;
    Ok(())
}

pub fn read_dmap(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_dmap(&bytes)
}

/// Binary PGM of `values` linearly rescaled so min → 0 and max → 255; a
/// constant map renders black.
pub fn pgm_bytes(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::Shape("PGM values do not match dimensions".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let level = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
        bytes.push(level.clamp(0.0, 255.0) as u8);
    }
    Ok(bytes)
}

pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, pgm_bytes(height, width, values)?)?;
    Ok(())
}

/// Parses a binary PGM written by [`pgm_bytes`].
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("expected 8-bit P5 PGM".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("PGM size {s:?}: {e}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(Error::Format("PGM payload length mismatch".into()));
    }
    Ok((h, w, body.to_vec()))
}
