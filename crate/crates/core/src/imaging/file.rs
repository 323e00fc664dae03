//! `RSPF0001` array container.
//!
//! Layout: 8-byte magic, `u32` LE header length, UTF-8 JSON header
//! `{kind, shape, unit, meta}`, then the row-major `f32` LE payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Image, Sinogram, Unit};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RSPF0001";

#[derive(Debug, Clone, PartialEq)]
pub enum AnyArray {
    Image(Image),
    Sinogram(Sinogram),
}

impl AnyArray {
    pub fn into_image(self) -> Result<Image> {
        match self {
            AnyArray::Image(img) => Ok(img),
            AnyArray::Sinogram(_) => Err(Error::Header("expected an image, found a sinogram".into())),
        }
    }

    pub fn into_sinogram(self) -> Result<Sinogram> {
        match self {
            AnyArray::Sinogram(s) => Ok(s),
            AnyArray::Image(_) => Err(Error::Header("expected a sinogram, found an image".into())),
        }
    }
}

impl From<Image> for AnyArray {
    fn from(img: Image) -> Self {
        AnyArray::Image(img)
    }
}

impl From<Sinogram> for AnyArray {
    fn from(s: Sinogram) -> Self {
        AnyArray::Sinogram(s)
    }
}

/// What to do with NaN/Inf samples found while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NanPolicy {
    #[default]
    Reject,
    /// Replace non-finite samples with zero.
    Sanitize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Image,
    Sinogram,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: Kind,
    shape: Vec<usize>,
    unit: Unit,
    #[serde(default)]
    meta: Meta,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixel_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view_angles: Option<Vec<f64>>,
}

pub(crate) fn encode(obj: &AnyArray) -> Vec<u8> {
    let (header, values) = match obj {
        AnyArray::Image(img) => (
            Header {
                kind: Kind::Image,
                shape: vec![img.height(), img.width()],
                unit: img.unit(),
                meta: Meta { pixel_size: Some(img.pixel_size()), view_angles: None },
            },
            img.values(),
        ),
        AnyArray::Sinogram(s) => (
            Header {
                kind: Kind::Sinogram,
                shape: vec![s.n_views(), s.n_detectors()],
                unit: s.unit(),
                meta: Meta { pixel_size: None, view_angles: Some(s.view_angles().to_vec()) },
            },
            s.values(),
        ),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode(bytes: &[u8], policy: NanPolicy) -> Result<AnyArray> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!("{} bytes, magic needs 8", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic { found: bytes[..8].to_vec() });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end]).map_err(|e| Error::Header(e.to_string()))?;

    let payload = &bytes[header_end..];
    if !payload.len().is_multiple_of(4) {
        return Err(Error::Truncated(format!("payload of {} bytes is not a whole number of f32", payload.len())));
    }
    if header.shape.len() != 2 {
        return Err(Error::Header(format!("expected a 2D shape, got {:?}", header.shape)));
    }
    let expected = header.shape.iter().product::<usize>();
    let found = payload.len() / 4;
    if expected != found {
        return Err(Error::ShapeMismatch(format!(
            "header shape {:?} needs {expected} elements, payload holds {found}",
            header.shape
        )));
    }
    let mut values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if policy == NanPolicy::Sanitize {
        values.iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = 0.0);
    }

    let (rows, cols) = (header.shape[0], header.shape[1]);
    match header.kind {
        Kind::Image => {
            let pixel_size =
                header.meta.pixel_size.ok_or_else(|| Error::Header("image header lacks meta.pixel_size".into()))?;
            Ok(AnyArray::Image(Image::new(cols, rows, pixel_size, values)?.with_unit(header.unit)))
        }
        Kind::Sinogram => {
            let angles = header
                .meta
                .view_angles
                .ok_or_else(|| Error::Header("sinogram header lacks meta.view_angles".into()))?;
            if angles.len() != rows {
                return Err(Error::ShapeMismatch(format!("{} view angles for {rows} views", angles.len())));
            }
            Ok(AnyArray::Sinogram(Sinogram::new(cols, angles, values)?.with_unit(header.unit)))
        }
    }
}

pub fn save_array(obj: impl Into<AnyArray>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(&obj.into())).map_err(|e| Error::io(path, e))
}

pub fn load_array(path: impl AsRef<Path>) -> Result<AnyArray> {
    load_array_with(path, NanPolicy::Reject)
}

pub fn load_array_with(path: impl AsRef<Path>, policy: NanPolicy) -> Result<AnyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, policy)
}
