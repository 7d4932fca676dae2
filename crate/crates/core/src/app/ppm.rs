//! Binary PPM (P6, maxval 255) reading and writing.

use std::path::Path;

use thiserror::Error;

use crate::geometry::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpmError {
    #[error("not a PPM file: bad magic {0:?}")]
    BadMagic(String),
    #[error("unsupported image format {0}: only binary PPM (P6) is accepted")]
    UnsupportedFormat(String),
    #[error("malformed PPM header: {0}")]
    BadHeader(String),
    #[error("unsupported PPM maxval {0}: only 255 is accepted")]
    BadMaxval(u64),
    #[error("truncated PPM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("PPM payload has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("image io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, PpmError>;

pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PpmError::BadMagic(head));
    }
    match bytes[1] {
        b'6' => {}
        b'1'..=b'5' | b'7' => {
            return Err(PpmError::UnsupportedFormat(format!("P{}", bytes[1] as char)));
        }
        _ => return Err(PpmError::BadMagic(String::from_utf8_lossy(&bytes[..2]).into_owned())),
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        skip_space_and_comments(bytes, &mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::BadHeader(format!("missing {name}")));
        }
        fields[i] = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| PpmError::BadHeader(format!("{name} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(PpmError::BadMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(PpmError::BadHeader("zero-sized image".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PpmError::BadHeader("expected whitespace after maxval".into()));
    }
    pos += 1;
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| PpmError::BadHeader("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(PpmError::TrailingBytes(payload.len() - expected));
    }
    let mut planar = vec![0.0; expected];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    Ok(Image::from_planar(h, w, planar))
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

/// Quantize to 8 bits (values clamped to [0, 1]) and encode.
pub fn encode(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(img.get(c, y, x)));
            }
        }
    }
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| PpmError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| PpmError::Io(format!("{}: {e}", path.display())))
}
