//! 8-bit RGB images and binary PPM (P6) / PGM (P5) reading and writing.
//!
//! These are the only raster formats the pipeline touches. Masks are persisted
//! as PGM with 255 = true, 0 = false.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Packed 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` bytes, RGB interleaved.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Write a binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut buf = Vec::with_capacity(image.data.len() + 32);
    write!(buf, "P6\n{} {}\n255\n", image.width, image.height)
        .expect("in-memory write cannot fail");
    buf.extend_from_slice(&image.data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a binary PPM (P6).
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, payload_at) = parse_pnm_header(&bytes, b"P6", path)?;
    if maxval != 255 {
        return Err(Error::format(
            Some(path.to_path_buf()),
            0,
            format!("unsupported PPM maxval {maxval}, expected 255"),
        ));
    }
    let expected = w * h * 3;
    let payload = &bytes[payload_at..];
    if payload.len() < expected {
        return Err(Error::format(
            Some(path.to_path_buf()),
            payload_at as u64,
            format!("PPM payload truncated: need {expected} bytes, have {}", payload.len()),
        ));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: payload[..expected].to_vec(),
    })
}

/// Write boolean bits as a binary PGM (P5), 255 = true.
pub fn write_pgm_mask(path: &Path, height: usize, width: usize, bits: &[bool]) -> Result<()> {
    assert_eq!(bits.len(), height * width, "mask dims disagree with bit count");
    let mut buf = Vec::with_capacity(bits.len() + 32);
    write!(buf, "P5\n{width} {height}\n255\n").expect("in-memory write cannot fail");
    buf.extend(bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a binary PGM (P5) as booleans; any nonzero sample is true.
pub fn read_pgm_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, payload_at) = parse_pnm_header(&bytes, b"P5", path)?;
    if maxval != 255 {
        return Err(Error::format(
            Some(path.to_path_buf()),
            0,
            format!("unsupported PGM maxval {maxval}, expected 255"),
        ));
    }
    let expected = w * h;
    let payload = &bytes[payload_at..];
    if payload.len() < expected {
        return Err(Error::format(
            Some(path.to_path_buf()),
            payload_at as u64,
            format!("PGM payload truncated: need {expected} bytes, have {}", payload.len()),
        ));
    }
    Ok((h, w, payload[..expected].iter().map(|&b| b != 0).collect()))
}

/// Parse a PNM header (`P5`/`P6`), returning (width, height, maxval, payload offset).
fn parse_pnm_header(bytes: &[u8], magic: &[u8], path: &Path) -> Result<(usize, usize, u32, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            Some(path.to_path_buf()),
            0,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and `#` comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(
                Some(path.to_path_buf()),
                start as u64,
                "expected decimal field in PNM header",
            ));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf-8");
        *field = text.parse::<usize>().map_err(|_| {
            Error::format(Some(path.to_path_buf()), start as u64, "header field overflow")
        })?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(
            Some(path.to_path_buf()),
            pos as u64,
            "missing whitespace after PNM maxval",
        ));
    }
    pos += 1; // exactly one whitespace byte separates header from payload
    Ok((fields[0], fields[1], fields[2] as u32, pos))
}
