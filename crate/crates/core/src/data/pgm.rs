//! Minimal binary PGM (`P5`) codec for 8- and 16-bit grayscale images.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn encode(img: &Pgm) -> Vec<u8> {
    let header = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval);
    let wide = img.maxval > 255;
    let mut out = Vec::with_capacity(header.len() + img.samples.len() * if wide { 2 } else { 1 });
    out.extend_from_slice(header.as_bytes());
    if wide {
        for &s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|&s| s as u8));
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::format(path, "empty file"))?;
    if magic != b"P5" {
        return Err(Error::format(path, "not a binary PGM (expected magic P5)"));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos)
            .ok_or_else(|| Error::format(path, format!("truncated header: missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(path, format!("invalid {name} in header")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing raster separator"));
    }
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            path,
            format!("raster truncated: {} of {} bytes", raster.len(), need),
        ));
    }
    let samples: Vec<u16> = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(&bad) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(Error::format(path, format!("sample {bad} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn read(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::format(path, format!("cannot read: {e}")))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Pgm) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (2, 1, 255));
        assert_eq!(img.samples, vec![0, 255]);
    }

    #[test]
    fn sixteen_bit_samples_are_big_endian() {
        let img = Pgm {
            width: 2,
            height: 1,
            maxval: 65535,
            samples: vec![0x0102, 0xfffe],
        };
        let bytes = encode(&img);
        assert_eq!(&bytes[bytes.len() - 4..], &[0x01, 0x02, 0xff, 0xfe]);
        assert_eq!(decode(&bytes, Path::new("x.pgm")).unwrap(), img);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(decode(b"P2\n1 1\n255\n\x00", Path::new("a")).is_err());
        assert!(decode(b"P5\n4 4\n255\n\x00\x00", Path::new("a")).is_err());
    }
}
