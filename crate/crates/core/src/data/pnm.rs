//! Binary Netpbm images: PGM (P5) and PPM (P6).
//! https://netpbm.sourceforge.net/doc/pgm.html

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded P5/P6 image with interleaved samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pnm {
    /// 8-bit grayscale image.
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Pnm {
            width,
            height,
            channels: 1,
            maxval: 255,
            samples: pixels.into_iter().map(u16::from).collect(),
        }
    }

    /// Planar `[C, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        let m = self.maxval as f64;
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            let (ch, px) = (i / hw, i % hw);
            self.samples[px * c + ch] as f64 / m
        })
    }

    /// Quantizes a `[1|3, H, W]` tensor in `[0, 1]` to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
            return Err(Error::shape("pnm", format!("{s:?} is not [1|3, H, W]")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut samples = vec![0u16; c * h * w];
        for ch in 0..c {
            for px in 0..h * w {
                let v = t.data()[ch * h * w + px].clamp(0.0, 1.0);
                samples[px * c + ch] = (v * 255.0).round() as u16;
            }
        }
        Ok(Pnm {
            width: w,
            height: h,
            channels: c,
            maxval: 255,
            samples,
        })
    }
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| format!("malformed header: bad {what}"))
}

/// Decodes a P5 or P6 byte stream.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Pnm, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("malformed header: expected P5 or P6 magic".into()),
    };
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("malformed header: empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("malformed header: maxval {maxval} outside 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("malformed header: missing separator before pixel data".into());
    }
    pos += 1;

    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or("malformed header: image too large")?;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!(
            "truncated payload: need {need} bytes, found {}",
            raster.len()
        ));
    }
    let samples: Vec<u16> = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster[..n].iter().map(|&b| b as u16).collect()
    };
    if let Some(v) = samples.iter().find(|&&v| v as usize > maxval) {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pnm(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for &s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|&s| s as u8));
    }
    out
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|d| Error::format(path, d))
}

pub fn write_pnm(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}
