//! Netpbm RGB images: binary P6 for writing, P6 or plain P3 for reading.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, ZipError};

/// Interleaved 8-bit RGB, row-major, `height x width x 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(ZipError::Data(format!(
                "image buffer holds {} bytes, expected {}x{}x3",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_ppm(img))?;
    f.flush()?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> ZipError {
        ZipError::Parse {
            what: "ppm",
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ZipError::Parse {
                what: "ppm",
                offset: start,
                msg: "number out of range".into(),
            })
    }
}

pub fn decode_ppm(buf: &[u8]) -> Result<RgbImage> {
    let mut c = Cursor { buf, pos: 0 };
    let plain = match buf.get(..2) {
        Some(b"P6") => false,
        Some(b"P3") => true,
        _ => return Err(c.err("missing P6/P3 magic")),
    };
    c.pos = 2;
    let width = c.number()?;
    let height = c.number()?;
    let maxval = c.number()?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image extent"));
    }
    if maxval != 255 {
        return Err(c.err(format!("maxval {maxval} unsupported, expected 255")));
    }
    let count = width * height * 3;
    if plain {
        let mut pixels = Vec::with_capacity(count);
        for _ in 0..count {
            let v = c.number()?;
            if v > 255 {
                return Err(c.err(format!("sample {v} exceeds maxval")));
            }
            pixels.push(v as u8);
        }
        return RgbImage::new(width, height, pixels);
    }
    // exactly one whitespace byte separates the header from the raster
    if c.pos >= buf.len() || !buf[c.pos].is_ascii_whitespace() {
        return Err(c.err("expected whitespace after maxval"));
    }
    c.pos += 1;
    let raster = &buf[c.pos..];
    if raster.len() < count {
        c.pos = buf.len();
        return Err(c.err(format!("raster truncated: {} of {count} bytes", raster.len())));
    }
    RgbImage::new(width, height, raster[..count].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_round_trip() {
        let img = RgbImage::new(1, 1, vec![255, 0, 0]).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn minimal_p6() {
        let mut buf = b"P6\n2 2\n255\n".to_vec();
        buf.extend(0..12u8);
        let img = decode_ppm(&buf).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.get(1, 1), [9, 10, 11]);
    }

    #[test]
    fn plain_p3_with_comment() {
        let img = decode_ppm(b"P3\n# tiny\n2 1\n255\n1 2 3  4 5 6\n").unwrap();
        assert_eq!(img.pixels, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn corrupt_header_reports_offset() {
        match decode_ppm(b"P6\n2 x\n255\n") {
            Err(ZipError::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(ZipError::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0"), Err(ZipError::Parse { .. })));
    }
}
