//! 2-d Fourier transforms and low-frequency amplitude transfer.
//!
//! A source image is moved toward a target domain by swapping the amplitude
//! of its centered low-frequency spectrum square with the target image's,
//! while keeping the source phase everywhere.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};
use thiserror::Error;

use crate::image::{ImageError, ImageF};

#[derive(Debug, Error)]
pub enum FourierError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("source {src:?} and target {tgt:?} dimensions differ")]
    DimensionMismatch { src: (usize, usize, usize), tgt: (usize, usize, usize) },
    #[error("beta {0} outside [0, 0.5]")]
    BadBeta(f64),
}

/// Per-channel complex spectrum in DC-centered layout (planar, channel-major).
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<Complex<f64>>,
}

impl Spectrum {
    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> Complex<f64> {
        self.data[(c * self.height + r) * self.width + col]
    }

    /// Row/column of the DC bin in the centered layout.
    pub fn dc_index(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn dc_amplitude(&self, c: usize) -> f64 {
        let (r, col) = self.dc_index();
        self.at(c, r, col).norm()
    }
}

fn rotate_plane(plane: &[Complex<f64>], h: usize, w: usize, kr: usize, kc: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for r in 0..h {
        let rr = (r + kr) % h;
        for c in 0..w {
            out[rr * w + (c + kc) % w] = plane[r * w + c];
        }
    }
    out
}

fn fft_plane(mut plane: Vec<Complex<f64>>, h: usize, w: usize, direction: FftDirection) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(w, direction);
    for row in plane.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    // Transpose, transform the columns, transpose back.
    let mut t = vec![Complex::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            t[c * h + r] = plane[r * w + c];
        }
    }
    let col_fft = planner.plan_fft(h, direction);
    for col in t.chunks_exact_mut(h) {
        col_fft.process(col);
    }
    for r in 0..h {
        for c in 0..w {
            plane[r * w + c] = t[c * h + r];
        }
    }
    plane
}

/// Forward 2-d DFT per channel, DC-centered output. Any size >= 8 works.
pub fn fft2d(img: &ImageF) -> Result<Spectrum, FourierError> {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(img.channels() * h * w);
    for c in 0..img.channels() {
        let plane: Vec<Complex<f64>> = img
            .channel_plane(c)
            .into_iter()
            .map(|v| Complex::new(v, 0.0))
            .collect();
        let freq = fft_plane(plane, h, w, FftDirection::Forward);
        data.extend(rotate_plane(&freq, h, w, h / 2, w / 2));
    }
    Ok(Spectrum { height: h, width: w, channels: img.channels(), data })
}

/// Inverse of [`fft2d`]; reproduces the image within 1e-10.
pub fn ifft2d(spec: &Spectrum) -> Result<ImageF, FourierError> {
    let (h, w) = (spec.height, spec.width);
    let norm = 1.0 / (h * w) as f64;
    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(spec.channels);
    for c in 0..spec.channels {
        let centered = &spec.data[c * h * w..(c + 1) * h * w];
        let plane = rotate_plane(centered, h, w, h - h / 2, w - w / 2);
        let out = fft_plane(plane, h, w, FftDirection::Inverse);
        planes.push(out.into_iter().map(|z| z.re * norm).collect());
    }
    let mut pixels = Vec::with_capacity(spec.channels * h * w);
    for i in 0..h * w {
        for plane in &planes {
            pixels.push(plane[i]);
        }
    }
    Ok(ImageF::new(h, w, spec.channels, pixels)?)
}

/// Half-side of the centered swap square: `floor(beta * min(h, w))`.
pub fn window_half_side(h: usize, w: usize, beta: f64) -> usize {
    (beta * h.min(w) as f64).floor() as usize
}

/// Whether centered bin (r, c) lies inside the swap window. The window is
/// empty at half-side 0, so beta = 0 leaves the image untouched.
pub fn in_window(r: usize, c: usize, h: usize, w: usize, half_side: usize) -> bool {
    let (ch, cw) = (h / 2, w / 2);
    let dr = r.abs_diff(ch);
    let dc = c.abs_diff(cw);
    dr < half_side && dc < half_side
}

/// Swapped spectrum: source phase everywhere; target amplitude inside the
/// centered low-frequency window, source amplitude outside.
pub fn fda_transfer_spectrum(src: &ImageF, tgt: &ImageF, beta: f64) -> Result<Spectrum, FourierError> {
    if !(0.0..=0.5).contains(&beta) {
        return Err(FourierError::BadBeta(beta));
    }
    let sdim = (src.height(), src.width(), src.channels());
    let tdim = (tgt.height(), tgt.width(), tgt.channels());
    if sdim != tdim {
        return Err(FourierError::DimensionMismatch { src: sdim, tgt: tdim });
    }
    let mut spec = fft2d(src)?;
    let tspec = fft2d(tgt)?;
    let (h, w) = (spec.height, spec.width);
    let b = window_half_side(h, w, beta);
    if b == 0 {
        return Ok(spec);
    }
    for c in 0..spec.channels {
        for r in 0..h {
            for col in 0..w {
                if in_window(r, col, h, w, b) {
                    let idx = (c * h + r) * w + col;
                    let phase = spec.data[idx].arg();
                    let amp = tspec.data[idx].norm();
                    spec.data[idx] = Complex::from_polar(amp, phase);
                }
            }
        }
    }
    Ok(spec)
}

/// Full transfer: swap spectrum, invert, clamp to [0,1].
pub fn fda_transfer(src: &ImageF, tgt: &ImageF, beta: f64) -> Result<ImageF, FourierError> {
    let spec = fda_transfer_spectrum(src, tgt, beta)?;
    let mut img = ifft2d(&spec)?;
    img.clamp_unit();
    Ok(img)
}
