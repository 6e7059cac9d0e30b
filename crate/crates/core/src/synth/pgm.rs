//! Netpbm grayscale (PGM) reading and writing.
//!
//! Images are written as binary 16-bit P5 and masks as binary 8-bit P5.
//! The reader accepts both P5 and ASCII P2 with `#` comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Header<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Parse(format!("line {}: {msg}", self.line))
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            match b {
                b'\n' => {
                    self.line += 1;
                    self.pos += 1;
                }
                b'#' => {
                    while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}, found end of file")));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token(what)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| self.err(format!("expected {what}, found {:?}", String::from_utf8_lossy(tok))))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut h = Header {
        bytes,
        pos: 0,
        line: 1,
    };
    let magic = h.token("magic number")?;
    let ascii = match magic {
        b"P2" => true,
        b"P5" => false,
        other => {
            return Err(h.err(format!(
                "unsupported magic {:?}, expected P2 or P5",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.err(format!("empty image {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(h.err(format!("maxval {maxval} outside 1..=65535")));
    }
    let n = width * height;
    let mut pixels = Vec::with_capacity(n);
    if ascii {
        for _ in 0..n {
            let v = h.number("pixel value")?;
            if v > maxval {
                return Err(h.err(format!("pixel value {v} exceeds maxval {maxval}")));
            }
            pixels.push(v as u16);
        }
    } else {
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(h.pos) {
            Some(b) if b.is_ascii_whitespace() => h.pos += 1,
            _ => return Err(h.err("missing whitespace after maxval")),
        }
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let raster = &bytes[h.pos..];
        if raster.len() < need {
            return Err(h.err(format!(
                "raster truncated: expected {need} bytes, found {}",
                raster.len()
            )));
        }
        if wide {
            pixels.extend(raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])));
        } else {
            pixels.extend(raster[..n].iter().map(|&b| u16::from(b)));
        }
        if let Some(v) = pixels.iter().find(|&&v| usize::from(v) > maxval) {
            return Err(h.err(format!("pixel value {v} exceeds maxval {maxval}")));
        }
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn encode_pgm(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval > 255 {
        for v in &pgm.pixels {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(pgm.pixels.iter().map(|&v| v as u8));
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(pgm)).map_err(|e| Error::io(path, e))
}

/// Quantizes a single-plane image in `[0, 1]` to 16 bits.
pub fn image_to_pgm(image: &Tensor) -> Result<Pgm> {
    let (c, height, width) = image.chw()?;
    if c != 1 {
        return Err(Error::shape(format!("expected one channel, got {c}")));
    }
    let pixels = image
        .data()
        .iter()
        .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    Ok(Pgm {
        width,
        height,
        maxval: 65535,
        pixels,
    })
}

/// Linear map of `0..=maxval` onto `[0, 1]`, as a 1×H×W tensor.
pub fn pgm_to_image(pgm: &Pgm) -> Tensor {
    let scale = f64::from(pgm.maxval);
    let data = pgm.pixels.iter().map(|&v| (f64::from(v) / scale) as f32).collect();
    Tensor::from_vec(&[1, pgm.height, pgm.width], data).expect("dimensions from header")
}

pub fn mask_to_pgm(mask: &ClassMap) -> Pgm {
    Pgm {
        width: mask.width(),
        height: mask.height(),
        maxval: 255,
        pixels: mask.labels().iter().map(|&l| u16::from(l)).collect(),
    }
}

/// Pixel values are taken as class indices.
pub fn pgm_to_mask(pgm: &Pgm) -> Result<ClassMap> {
    let labels = pgm
        .pixels
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::Data(format!("mask value {v} is not a class index"))))
        .collect::<Result<_>>()?;
    ClassMap::new(pgm.height, pgm.width, labels)
}

/// Maps values linearly from `[lo, hi]` to 8 bits, for viewing float maps.
pub fn map_to_pgm8(map: &Tensor, lo: f32, hi: f32) -> Result<Pgm> {
    let (c, height, width) = map.chw()?;
    if c != 1 {
        return Err(Error::shape(format!("expected one channel, got {c}")));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = map
        .data()
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    Ok(Pgm {
        width,
        height,
        maxval: 255,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_comments() {
        let text = b"P2\n# made by hand\n3 2\n# max\n10\n0 5 10\n 1 2 # tail\n3\n";
        let p = parse_pgm(text).unwrap();
        assert_eq!((p.width, p.height, p.maxval), (3, 2, 10));
        assert_eq!(p.pixels, vec![0, 5, 10, 1, 2, 3]);
    }

    #[test]
    fn binary_16_bit_round_trip() {
        let p = Pgm {
            width: 2,
            height: 2,
            maxval: 65535,
            pixels: vec![0, 1, 65534, 65535],
        };
        assert_eq!(parse_pgm(&encode_pgm(&p)).unwrap(), p);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_pgm(b"P2\n3 x\n255\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_pgm(b"P7\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = parse_pgm(b"P2\n# c\n\n2 1\n255\n1\n").unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01\x02").is_err());
        assert!(parse_pgm(b"P2\n1 1\n9\n10\n").is_err());
    }

    #[test]
    fn image_quantization_bound() {
        let image = Tensor::from_vec(&[1, 1, 4], vec![0.0, 0.123_456, 0.5, 1.0]).unwrap();
        let back = pgm_to_image(&image_to_pgm(&image).unwrap());
        assert!(back.max_abs_diff(&image) <= 1.0 / 65535.0);
    }
}
