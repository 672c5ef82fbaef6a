//! Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only.
//!
//! Frames are P6 color images; masks are P5 with 255 = salient. Parse
//! errors carry the byte offset of the problem.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let off = (y * self.width + x) * 3;
        self.data[off..off + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let off = (y * self.width + x) * 3;
        [self.data[off], self.data[off + 1], self.data[off + 2]]
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.extend_from_slice(&self.data);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let (magic, w, h, off) = parse_pnm_header(&buf, "PPM")?;
        if magic != b"P6" {
            return Err(Error::Parse {
                what: "PPM",
                offset: 0,
                detail: format!("expected P6, got {}", String::from_utf8_lossy(magic)),
            });
        }
        let need = w * h * 3;
        if buf.len() < off + need {
            return Err(Error::Parse {
                what: "PPM",
                offset: buf.len(),
                detail: format!("truncated: pixel data needs {} bytes from offset {off}", need),
            });
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data: buf[off..off + need].to_vec(),
        })
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.extend_from_slice(&self.data);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let (magic, w, h, off) = parse_pnm_header(&buf, "PGM")?;
        if magic != b"P5" {
            return Err(Error::Parse {
                what: "PGM",
                offset: 0,
                detail: format!("expected P5, got {}", String::from_utf8_lossy(magic)),
            });
        }
        let need = w * h;
        if buf.len() < off + need {
            return Err(Error::Parse {
                what: "PGM",
                offset: buf.len(),
                detail: format!("truncated: pixel data needs {} bytes from offset {off}", need),
            });
        }
        Ok(GrayImage {
            width: w,
            height: h,
            data: buf[off..off + need].to_vec(),
        })
    }
}

/// Parse a PNM header; returns (magic, width, height, data offset).
/// Accepts `#` comments and any whitespace, requires maxval 255.
fn parse_pnm_header<'a>(buf: &'a [u8], what: &'static str) -> Result<(&'a [u8], usize, usize, usize)> {
    if buf.len() < 2 {
        return Err(Error::Parse {
            what,
            offset: buf.len(),
            detail: "file shorter than magic".into(),
        });
    }
    let magic = &buf[0..2];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                what,
                offset: pos,
                detail: "expected an integer header field".into(),
            });
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .expect("digits are utf8")
            .parse()
            .map_err(|e| Error::Parse {
                what,
                offset: start,
                detail: format!("bad integer: {e}"),
            })?;
    }
    if fields[2] != 255 {
        return Err(Error::Parse {
            what,
            offset: pos,
            detail: format!("only maxval 255 supported, got {}", fields[2]),
        });
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::Parse {
            what,
            offset: pos,
            detail: "missing single whitespace after maxval".into(),
        });
    }
    Ok((magic, fields[0], fields[1], pos + 1))
}
