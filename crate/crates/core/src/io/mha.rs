//! Uncompressed single-file MetaImage (`.mha`) reading and writing.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::volume::{IntensityKind, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MhaError {
    #[error("missing required header key {0}")]
    MissingKey(&'static str),
    #[error("header key {key} has invalid value {value:?}")]
    BadValue { key: &'static str, value: String },
    #[error("unsupported dimensionality NDims = {0}; only 3D images are supported")]
    UnsupportedDims(usize),
    #[error("unsupported element type {0}; expected MET_SHORT or MET_FLOAT")]
    UnsupportedElementType(String),
    #[error("compressed payloads are not supported")]
    Compressed,
    #[error("only ElementDataFile = LOCAL is supported, found {0}")]
    ExternalData(String),
    #[error("big-endian payloads are not supported")]
    BigEndian,
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("header is not terminated by an ElementDataFile line")]
    UnterminatedHeader,
    #[error("value {0} is not representable as MET_SHORT")]
    NotRepresentable(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    /// Signed 16-bit integer.
    Short,
    /// 32-bit IEEE float.
    Float,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }
}

fn parse_triple<T: std::str::FromStr>(
    key: &'static str,
    value: &str,
) -> std::result::Result<[T; 3], MhaError> {
    let bad = || MhaError::BadValue {
        key,
        value: value.to_string(),
    };
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>().map_err(|_| bad()))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| bad())
}

/// Parses an in-memory `.mha` file.
pub fn decode_mha(bytes: &[u8]) -> std::result::Result<(Volume, ElementType), MhaError> {
    let mut pos = 0;
    let mut ndims = None;
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut element = None;
    let mut payload_start = None;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |i| pos + i);
        let line = String::from_utf8_lossy(&bytes[pos..end]);
        pos = (end + 1).min(bytes.len());
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                let n: usize = value.parse().map_err(|_| MhaError::BadValue {
                    key: "NDims",
                    value: value.into(),
                })?;
                if n != 3 {
                    return Err(MhaError::UnsupportedDims(n));
                }
                ndims = Some(n);
            }
            "DimSize" => dims = Some(parse_triple("DimSize", value)?),
            "ElementSpacing" => spacing = parse_triple("ElementSpacing", value)?,
            "Offset" | "Origin" | "Position" => origin = parse_triple("Offset", value)?,
            "ElementType" => {
                element = Some(match value {
                    "MET_SHORT" => ElementType::Short,
                    "MET_FLOAT" => ElementType::Float,
                    other => return Err(MhaError::UnsupportedElementType(other.into())),
                })
            }
            "CompressedData" if value.eq_ignore_ascii_case("true") => {
                return Err(MhaError::Compressed)
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB"
                if value.eq_ignore_ascii_case("true") =>
            {
                return Err(MhaError::BigEndian)
            }
            "ObjectType" if value != "Image" => {
                return Err(MhaError::BadValue {
                    key: "ObjectType",
                    value: value.into(),
                })
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(MhaError::ExternalData(value.into()));
                }
                payload_start = Some(pos);
                break;
            }
            _ => {}
        }
    }
    let start = payload_start.ok_or(MhaError::UnterminatedHeader)?;
    ndims.ok_or(MhaError::MissingKey("NDims"))?;
    let dims = dims.ok_or(MhaError::MissingKey("DimSize"))?;
    let element = element.ok_or(MhaError::MissingKey("ElementType"))?;
    if dims.contains(&0) {
        return Err(MhaError::BadValue {
            key: "DimSize",
            value: format!("{dims:?}"),
        });
    }
    if spacing.iter().any(|&s: &f64| !(s > 0.0)) {
        return Err(MhaError::BadValue {
            key: "ElementSpacing",
            value: format!("{spacing:?}"),
        });
    }
    let count: usize = dims.iter().product();
    let expected = count * element.size();
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(MhaError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let payload = &payload[..expected];
    let data: Vec<f64> = match element {
        ElementType::Short => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    let volume = Volume {
        dims,
        spacing,
        origin,
        kind: IntensityKind::Raw,
        data,
    };
    Ok((volume, element))
}

/// Serializes `volume`; MET_SHORT rounds to the nearest integer and
/// MET_FLOAT stores single precision.
pub fn encode_mha(volume: &Volume, element: ElementType) -> std::result::Result<Vec<u8>, MhaError> {
    let fmt3 = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         Offset = {}\nElementSpacing = {}\nDimSize = {} {} {}\nElementType = {}\nElementDataFile = LOCAL\n",
        fmt3(volume.origin),
        fmt3(volume.spacing),
        volume.dims[0],
        volume.dims[1],
        volume.dims[2],
        element.tag()
    );
    let mut out = header.into_bytes();
    out.reserve(volume.len() * element.size());
    for &v in &volume.data {
        match element {
            ElementType::Short => {
                let r = v.round();
                if !(r >= i16::MIN as f64 && r <= i16::MAX as f64) {
                    return Err(MhaError::NotRepresentable(v));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            ElementType::Float => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

/// Reads a volume; its intensity kind is [`IntensityKind::Raw`] until the
/// caller says otherwise.
pub fn read_mha(path: impl AsRef<Path>) -> Result<Volume> {
    read_mha_typed(path).map(|(v, _)| v)
}

pub fn read_mha_typed(path: impl AsRef<Path>) -> Result<(Volume, ElementType)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mha(&bytes).map_err(|source| Error::Mha {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mha(volume: &Volume, path: impl AsRef<Path>, element: ElementType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_mha(volume, element).map_err(|source| Error::Mha {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
