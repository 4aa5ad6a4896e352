//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// An 8-bit raster stored channel-interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("raster", format!("{channels} channels; need 1 or 3")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(
                "raster",
                format!("{} bytes for {width}x{height}x{channels}", pixels.len()),
            ));
        }
        Ok(Raster {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// `(1, channels, height, width)` with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let c = self.channels;
        Tensor::from_fn(Shape::new(1, c, self.height, self.width), |_, ch, y, x| {
            self.pixels[(y * self.width + x) * c + ch] as f64 / 255.0
        })
    }

    /// Quantises a `(1, c, h, w)` tensor in [0, 1], clamping outside values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(Error::invalid("raster", format!("batch of {} images", s.n)));
        }
        let mut pixels = Vec::with_capacity(s.c * s.h * s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    pixels.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        Raster::new(s.w, s.h, s.c, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = bytes.get(..2).ok_or_else(|| bad("missing magic number"))?;
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(bad("not a binary PGM/PPM (P5/P6)")),
        };
        pos += 2;
        for field in fields.iter_mut() {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(bad("malformed header"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("header value out of range"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("malformed header"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval}; only 255 is supported")));
        }
        if width == 0 || height == 0 {
            return Err(bad("zero-sized image"));
        }
        let need = width * height * channels;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(bad(&format!("truncated payload: {} of {need} bytes", payload.len())));
        }
        Raster::new(width, height, channels, payload[..need].to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Raster::decode(&fs::read(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Reads a P5/P6 image as `(1, c, h, w)` in [0, 1] minus the per-channel `means`.
pub fn load_image(path: &Path, means: &[f64]) -> Result<Tensor> {
    let raster = Raster::read(path)?;
    if means.len() != raster.channels {
        return Err(Error::format(
            path,
            format!("{} channels but {} configured means", raster.channels, means.len()),
        ));
    }
    let mut t = raster.to_tensor();
    let plane = raster.width * raster.height;
    for (c, m) in means.iter().enumerate() {
        t.data_mut()[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v -= m);
    }
    Ok(t)
}
