//! Binary (P5) PGM reading and writing.
//!
//! Samples are one byte when `maxval < 256` and two big-endian bytes
//! otherwise. The writer emits `maxval = 2^bit_depth - 1`.

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let maxval = img.max_value();
    let header = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval);
    let wide = maxval > 255;
    let mut out = Vec::with_capacity(header.len() + img.pixels().len() * if wide { 2 } else { 1 });
    out.extend_from_slice(header.as_bytes());
    if wide {
        for &p in img.pixels() {
            out.extend_from_slice(&p.to_be_bytes());
        }
    } else {
        out.extend(img.pixels().iter().map(|&p| p as u8));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_number(&mut self, what: &str) -> Result<u32> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format {
                path: self.path.to_path_buf(),
                offset: start as u64,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if bytes.get(..2) != Some(b"P5") {
        return Err(cur.error("missing P5 magic"));
    }
    cur.pos = 2;
    let width = cur.header_number("width")? as usize;
    let height = cur.header_number("height")? as usize;
    let maxval = cur.header_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.error("zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.error(format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.error("expected a single whitespace byte after maxval"));
    }
    cur.pos += 1;

    let bit_depth = 32 - maxval.leading_zeros();
    let wide = maxval > 255;
    let needed = width * height * if wide { 2 } else { 1 };
    let raster = &bytes[cur.pos..];
    if raster.len() < needed {
        cur.pos = bytes.len();
        return Err(cur.error(format!("raster truncated: need {needed} bytes, have {}", raster.len())));
    }
    let pixels: Vec<u16> = if wide {
        raster[..needed].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster[..needed].iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = pixels.iter().position(|&p| p as u32 > maxval) {
        cur.pos += i * if wide { 2 } else { 1 };
        return Err(cur.error(format!("sample {} exceeds maxval {maxval}", pixels[i])));
    }
    GrayImage::new(width, height, bit_depth as u8, pixels)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}
