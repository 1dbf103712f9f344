//! Binary PGM (P5, maxval 255).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_pgm(img))?;
    Ok(())
}

/// Min-max scale a float map to 0..=255. A constant map becomes all zeros.
pub fn to_gray(values: &[f64], width: usize, height: usize) -> GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    GrayImage { width, height, pixels }
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("header ended early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(malformed("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| malformed("bad header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(malformed("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + n].to_vec(),
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    decode_pgm(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_of_4x4() {
        let img = GrayImage {
            width: 4,
            height: 4,
            pixels: (0..16).collect(),
        };
        let b = encode_pgm(&img);
        assert!(b.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(b.len(), 11 + 16);
    }

    #[test]
    fn round_trip_and_constant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 17, 255, 128, 9, 200],
        };
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);

        let flat = to_gray(&[0.3; 6], 3, 2);
        assert!(flat.pixels.iter().all(|&v| v == flat.pixels[0]));
    }

    #[test]
    fn scaling_spans_full_range() {
        let g = to_gray(&[1.0, 2.0, 3.0], 3, 1);
        assert_eq!(g.pixels, vec![0, 128, 255]);
    }

    #[test]
    fn malformed_headers() {
        let p = Path::new("x.pgm");
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n\x00", p),
            Err(Error::Malformed { .. })
        ));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00", p), Err(Error::Truncated(_))));
        assert!(decode_pgm(b"P5\n2", p).is_err());
        assert!(decode_pgm(b"P5 # comment\n1 1 255\n\x07", p).is_ok());
    }
}
