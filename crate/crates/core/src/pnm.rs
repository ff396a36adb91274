//! Binary PGM (P5) and PPM (P6) rasters, 8 bits per sample.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::grid::ChangeMask;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad header: {0}")]
    Header(String),
    #[error("expected magic {want}, found {found}")]
    Magic { want: &'static str, found: String },
    #[error("only maxval <= 255 is supported, got {0}")]
    Maxval(u32),
    #[error("truncated pixel data: {got} of {want} bytes")]
    Truncated { got: usize, want: usize },
}

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-planar floats in [0, 1], shape `[3, h, w]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.h * self.w;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = f64::from(self.data[p * 3 + c]) / 255.0;
            }
        }
        out
    }
}

pub fn encode_pgm(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Mask as PGM: 0 unchanged, 255 changed.
pub fn encode_mask(mask: &ChangeMask) -> Vec<u8> {
    let px: Vec<u8> = mask.values().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    encode_pgm(mask.h(), mask.w(), &px)
}

/// Returns `(h, w, pixels)` of a P5 file.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PnmError> {
    let (h, w, body) = decode_header(bytes, "P5")?;
    Ok((h, w, take(body, h * w)?))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PnmError> {
    let (h, w, body) = decode_header(bytes, "P6")?;
    Ok(RgbImage {
        h,
        w,
        data: take(body, h * w * 3)?,
    })
}

/// Any nonzero sample maps to changed.
pub fn decode_mask(bytes: &[u8]) -> Result<ChangeMask, PnmError> {
    let (h, w, px) = decode_pgm(bytes)?;
    Ok(ChangeMask::from_bytes(h, w, &px).expect("length checked by decode_pgm"))
}

pub fn read_mask(path: &Path) -> Result<ChangeMask, PnmError> {
    decode_mask(&read(path)?)
}

pub fn write_mask(path: &Path, mask: &ChangeMask) -> Result<(), PnmError> {
    write(path, &encode_mask(mask))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, PnmError> {
    decode_ppm(&read(path)?)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), PnmError> {
    write(path, &encode_ppm(img))
}

fn read(path: &Path) -> Result<Vec<u8>, PnmError> {
    fs::read(path).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PnmError> {
    fs::write(path, bytes).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn take(body: &[u8], want: usize) -> Result<Vec<u8>, PnmError> {
    if body.len() < want {
        return Err(PnmError::Truncated { got: body.len(), want });
    }
    Ok(body[..want].to_vec())
}

fn decode_header<'a>(bytes: &'a [u8], magic: &'static str) -> Result<(usize, usize, &'a [u8]), PnmError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header("unexpected end of header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(PnmError::Magic {
            want: magic,
            found: fields[0].clone(),
        });
    }
    let num = |s: &str| {
        s.parse::<u32>()
            .map_err(|_| PnmError::Header(format!("not a number: {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(PnmError::Maxval(maxval));
    }
    // exactly one whitespace byte separates header from raster
    if pos >= bytes.len() {
        return Err(PnmError::Truncated { got: 0, want: 1 });
    }
    Ok((h as usize, w as usize, &bytes[pos + 1..]))
}
