//! Float images and portable anymap (PGM/PPM) I/O.
//!
//! Pixels are row-major, channel-interleaved f64 in [0,1]. Disk format is
//! 8-bit PGM (1 channel) or PPM (3 channels), plain or raw; quantized pixels
//! round-trip exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {height}x{width} is too small; both sides must be >= {min}")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("channel count {0} unsupported (must be 1 or 3)")]
    BadChannels(usize),
    #[error("pixel buffer has {got} values, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("non-finite pixel value at index {0}")]
    NonFinite(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid pnm: {reason}")]
    Parse { path: String, reason: String },
}

pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageF {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(ImageError::TooSmall { height, width, min: MIN_SIDE });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannels(channels));
        }
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(ImageError::BadLength { got: pixels.len(), expected });
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(ImageF { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// One channel as a planar buffer.
    pub fn channel_plane(&self, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.get(y, x, c));
            }
        }
        out
    }

    /// Clamp all pixels to [0,1] in place.
    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn map_pixels(mut self, f: impl Fn(f64) -> f64) -> Self {
        for p in &mut self.pixels {
            *p = f(*p);
        }
        self
    }

    /// Quantize to 8 bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        let pixels: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(height, width, channels, pixels)
    }
}

/// Write as PGM (1 channel) or PPM (3 channels); `raw` selects P5/P6 over P2/P3.
pub fn write_pnm(img: &ImageF, path: &Path, raw: bool) -> Result<(), ImageError> {
    let io_err = |source| ImageError::Io { path: path.display().to_string(), source };
    let magic = match (img.channels, raw) {
        (1, false) => "P2",
        (1, true) => "P5",
        (3, false) => "P3",
        (3, true) => "P6",
        (c, _) => return Err(ImageError::BadChannels(c)),
    };
    let bytes = img.to_bytes();
    let mut out = Vec::with_capacity(bytes.len() + 64);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height).expect("in-memory write");
    if raw {
        out.extend_from_slice(&bytes);
    } else {
        for row in bytes.chunks(img.width * img.channels) {
            let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).expect("in-memory write");
        }
    }
    fs::write(path, out).map_err(io_err)
}

/// Read a PGM/PPM file (P2, P3, P5 or P6, maxval 255).
pub fn read_pnm(path: &Path) -> Result<ImageF, ImageError> {
    let io_err = |source| ImageError::Io { path: path.display().to_string(), source };
    let parse_err = |reason: String| ImageError::Parse { path: path.display().to_string(), reason };
    let raw = fs::read(path).map_err(io_err)?;

    // Header tokens may be separated by whitespace and '#' comments.
    let mut pos = 0usize;
    let next_token = |raw: &[u8], pos: &mut usize| -> Option<String> {
        while *pos < raw.len() {
            let b = raw[*pos];
            if b == b'#' {
                while *pos < raw.len() && raw[*pos] != b'\n' {
                    *pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                *pos += 1;
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            None
        } else {
            Some(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
        }
    };

    let magic = next_token(&raw, &mut pos).ok_or_else(|| parse_err("missing magic".into()))?;
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => return Err(parse_err(format!("unsupported magic {other}"))),
    };
    let mut dim = |what: &str| -> Result<usize, ImageError> {
        next_token(&raw, &mut pos)
            .ok_or_else(|| parse_err(format!("missing {what}")))?
            .parse()
            .map_err(|_| parse_err(format!("bad {what}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(parse_err(format!("maxval {maxval} unsupported")));
    }
    let count = width * height * channels;
    let bytes: Vec<u8> = if binary {
        // Exactly one whitespace byte separates the header from pixel data.
        pos += 1;
        if raw.len() < pos + count {
            return Err(parse_err("truncated pixel data".into()));
        }
        raw[pos..pos + count].to_vec()
    } else {
        let mut vals = Vec::with_capacity(count);
        while vals.len() < count {
            let tok = next_token(&raw, &mut pos).ok_or_else(|| parse_err("truncated pixel data".into()))?;
            let v: u16 = tok.parse().map_err(|_| parse_err(format!("bad pixel {tok}")))?;
            if v > 255 {
                return Err(parse_err(format!("pixel {v} exceeds maxval")));
            }
            vals.push(v as u8);
        }
        vals
    };
    ImageF::from_bytes(height, width, channels, &bytes)
}
