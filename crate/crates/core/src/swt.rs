//! Two-dimensional stationary (undecimated) wavelet transform, computed with
//! the à trous scheme.
//!
//! Level `j` (1-based) filters with the base taps spaced `2^(j-1)` apart and
//! never downsamples, so every subband keeps the input's size. Filters are
//! causal with periodic wrap:
//!
//! ```text
//! w[i] = sum_k f[k] * x[(i - k * 2^(j-1)) mod n]
//! ```
//!
//! Rows are filtered first, then columns. `LH` is low-pass along rows and
//! high-pass along columns (horizontal edges), `HL` the reverse (vertical
//! edges), `HH` high-pass in both directions.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::GrayImage;

/// Rows shorter than this are filtered on the calling thread.
const PARALLEL_MIN_LEN: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wavelet {
    Haar,
}

impl Wavelet {
    /// Analysis low-pass and high-pass taps.
    pub fn analysis(self) -> (&'static [f64], &'static [f64]) {
        match self {
            Wavelet::Haar => (&[0.5, 0.5], &[0.5, -0.5]),
        }
    }

    /// Synthesis low-pass and high-pass taps, applied anti-causally and
    /// averaged over the two redundant estimates.
    pub fn synthesis(self) -> (&'static [f64], &'static [f64]) {
        match self {
            Wavelet::Haar => (&[1.0, 1.0], &[1.0, -1.0]),
        }
    }
}

impl std::str::FromStr for Wavelet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Ok(Wavelet::Haar),
            other => Err(Error::Config(format!("unknown wavelet '{other}'"))),
        }
    }
}

impl fmt::Display for Wavelet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Wavelet::Haar => f.write_str("haar"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    /// Horizontal detail (responds to horizontal edges).
    LH,
    /// Vertical detail (responds to vertical edges).
    HL,
    /// Diagonal detail.
    HH,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::LH, Orientation::HL, Orientation::HH];
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::LH => "LH",
            Orientation::HL => "HL",
            Orientation::HH => "HH",
        })
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LH" => Ok(Orientation::LH),
            "HL" => Ok(Orientation::HL),
            "HH" => Ok(Orientation::HH),
            other => Err(Error::Config(format!("unknown orientation '{other}'"))),
        }
    }
}

/// A real-valued raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} samples for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn column(&self, x: usize) -> Vec<f64> {
        (0..self.height).map(|y| self.get(x, y)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rolls the plane so that `(x, y)` moves to `((x + dx) mod W, (y + dy) mod H)`.
    pub fn circular_shift(&self, dx: usize, dy: usize) -> Plane {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                data[((y + dy) % h) * w + (x + dx) % w] = self.data[y * w + x];
            }
        }
        Plane {
            width: w,
            height: h,
            data,
        }
    }

    /// Extends every side by `margin` samples with half-sample symmetric
    /// reflection (`x[-1] = x[0]`), repeating the reflection for margins
    /// larger than the plane.
    pub fn pad_symmetric(&self, margin: usize) -> Plane {
        let reflect = |i: isize, n: usize| -> usize {
            let period = 2 * n as isize;
            let m = i.rem_euclid(period) as usize;
            if m < n {
                m
            } else {
                period as usize - 1 - m
            }
        };
        let w = self.width + 2 * margin;
        let h = self.height + 2 * margin;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let sy = reflect(y as isize - margin as isize, self.height);
            for x in 0..w {
                let sx = reflect(x as isize - margin as isize, self.width);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Plane {
            width: w,
            height: h,
            data,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Plane {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Plane {
            width,
            height,
            data,
        }
    }

    /// Clamps into `[0, 1]` and wraps as an image.
    pub fn to_gray_image(&self) -> GrayImage {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        GrayImage::new(self.width, self.height, data).expect("plane dimensions are valid")
    }
}

impl From<&GrayImage> for Plane {
    fn from(img: &GrayImage) -> Self {
        Plane {
            width: img.width(),
            height: img.height(),
            data: img.data().to_vec(),
        }
    }
}

/// Detail planes of one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

impl Subbands {
    pub fn get(&self, orientation: Orientation) -> &Plane {
        match orientation {
            Orientation::LH => &self.lh,
            Orientation::HL => &self.hl,
            Orientation::HH => &self.hh,
        }
    }

    pub fn get_mut(&mut self, orientation: Orientation) -> &mut Plane {
        match orientation {
            Orientation::LH => &mut self.lh,
            Orientation::HL => &mut self.hl,
            Orientation::HH => &mut self.hh,
        }
    }
}

/// Detail planes for scales `1..=J` plus the scale-`J` approximation, all at
/// full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SwtPyramid {
    pub wavelet: Wavelet,
    /// `details[j - 1]` holds scale `j`; scale 1 is the finest.
    pub details: Vec<Subbands>,
    pub approximation: Plane,
}

impl SwtPyramid {
    pub fn scales(&self) -> usize {
        self.details.len()
    }

    pub fn width(&self) -> usize {
        self.approximation.width
    }

    pub fn height(&self) -> usize {
        self.approximation.height
    }

    /// Detail plane at 1-based `scale`.
    pub fn detail(&self, scale: usize, orientation: Orientation) -> &Plane {
        self.details[scale - 1].get(orientation)
    }

    pub fn circular_shift(&self, dx: usize, dy: usize) -> SwtPyramid {
        SwtPyramid {
            wavelet: self.wavelet,
            details: self
                .details
                .iter()
                .map(|s| Subbands {
                    lh: s.lh.circular_shift(dx, dy),
                    hl: s.hl.circular_shift(dx, dy),
                    hh: s.hh.circular_shift(dx, dy),
                })
                .collect(),
            approximation: self.approximation.circular_shift(dx, dy),
        }
    }

    /// Restricts every plane to the given window.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> SwtPyramid {
        SwtPyramid {
            wavelet: self.wavelet,
            details: self
                .details
                .iter()
                .map(|s| Subbands {
                    lh: s.lh.crop(x0, y0, width, height),
                    hl: s.hl.crop(x0, y0, width, height),
                    hh: s.hh.crop(x0, y0, width, height),
                })
                .collect(),
            approximation: self.approximation.crop(x0, y0, width, height),
        }
    }
}

fn analyze_line(x: &[f64], taps: &[f64], step: usize, out: &mut [f64]) {
    let n = x.len();
    let offset = step % n;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut idx = i;
        for &t in taps {
            acc += t * x[idx];
            idx = (idx + n - offset) % n;
        }
        *o = acc;
    }
}

/// Inverts one analysis level along a line:
/// `x[i] = (sum_k lo_syn[k] lo[i + k s] + hi_syn[k] hi[i + k s]) / 2`.
fn synthesize_line(lo: &[f64], hi: &[f64], wavelet: Wavelet, step: usize, out: &mut [f64]) {
    let (lo_syn, hi_syn) = wavelet.synthesis();
    let n = lo.len();
    let offset = step % n;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut idx = i;
        for (&a, &b) in lo_syn.iter().zip(hi_syn) {
            acc += a * lo[idx] + b * hi[idx];
            idx = (idx + offset) % n;
        }
        *o = acc / lo_syn.len() as f64;
    }
}

fn filter_rows(p: &Plane, taps: &[f64], step: usize) -> Plane {
    let mut out = Plane::zeros(p.width, p.height);
    let w = p.width;
    let work = |(y, row): (usize, &mut [f64])| analyze_line(p.row(y), taps, step, row);
    if p.data.len() >= PARALLEL_MIN_LEN {
        out.data.par_chunks_mut(w).enumerate().for_each(work);
    } else {
        out.data.chunks_mut(w).enumerate().for_each(work);
    }
    out
}

fn transpose(p: &Plane) -> Plane {
    let mut data = vec![0.0; p.data.len()];
    for y in 0..p.height {
        for x in 0..p.width {
            data[x * p.height + y] = p.data[y * p.width + x];
        }
    }
    Plane {
        width: p.height,
        height: p.width,
        data,
    }
}

fn filter_columns(p: &Plane, taps: &[f64], step: usize) -> Plane {
    transpose(&filter_rows(&transpose(p), taps, step))
}

fn synthesize_rows(lo: &Plane, hi: &Plane, wavelet: Wavelet, step: usize) -> Plane {
    let mut out = Plane::zeros(lo.width, lo.height);
    let w = lo.width;
    let work =
        |(y, row): (usize, &mut [f64])| synthesize_line(lo.row(y), hi.row(y), wavelet, step, row);
    if lo.data.len() >= PARALLEL_MIN_LEN {
        out.data.par_chunks_mut(w).enumerate().for_each(work);
    } else {
        out.data.chunks_mut(w).enumerate().for_each(work);
    }
    out
}

fn synthesize_columns(lo: &Plane, hi: &Plane, wavelet: Wavelet, step: usize) -> Plane {
    transpose(&synthesize_rows(
        &transpose(lo),
        &transpose(hi),
        wavelet,
        step,
    ))
}

/// Forward transform of an arbitrary real plane.
pub fn swt_forward_plane(plane: &Plane, scales: usize, wavelet: Wavelet) -> Result<SwtPyramid> {
    if scales == 0 {
        return Err(Error::Config("scale count must be at least 1".into()));
    }
    let need = 1usize
        .checked_shl(scales as u32)
        .filter(|&n| n != 0)
        .ok_or_else(|| Error::Config(format!("{scales} scales is too many")))?;
    if plane.width < need || plane.height < need {
        return Err(Error::Dimension(format!(
            "{}x{} image is smaller than the {need}-sample support of scale {scales}",
            plane.width, plane.height
        )));
    }
    let (lo, hi) = wavelet.analysis();
    let mut approx = plane.clone();
    let mut details = Vec::with_capacity(scales);
    for j in 0..scales {
        let step = 1 << j;
        let row_lo = filter_rows(&approx, lo, step);
        let row_hi = filter_rows(&approx, hi, step);
        let lh = filter_columns(&row_lo, hi, step);
        let hl = filter_columns(&row_hi, lo, step);
        let hh = filter_columns(&row_hi, hi, step);
        approx = filter_columns(&row_lo, lo, step);
        details.push(Subbands { lh, hl, hh });
    }
    Ok(SwtPyramid {
        wavelet,
        details,
        approximation: approx,
    })
}

/// Forward transform with `scales` levels. Requires both image sides to be at
/// least `2^scales`.
pub fn swt_forward(img: &GrayImage, scales: usize, wavelet: Wavelet) -> Result<SwtPyramid> {
    swt_forward_plane(&Plane::from(img), scales, wavelet)
}

/// Inverse transform. Reconstructs the source plane of an unmodified pyramid
/// to rounding error.
pub fn swt_inverse(pyr: &SwtPyramid) -> Result<Plane> {
    if pyr.details.is_empty() {
        return Err(Error::Dimension("pyramid has no detail scales".into()));
    }
    let (w, h) = (pyr.width(), pyr.height());
    for (j, s) in pyr.details.iter().enumerate() {
        for o in Orientation::ALL {
            let p = s.get(o);
            if (p.width, p.height) != (w, h) {
                return Err(Error::Dimension(format!(
                    "scale {} {o} plane is {}x{}, approximation is {w}x{h}",
                    j + 1,
                    p.width,
                    p.height
                )));
            }
        }
    }
    let mut approx = pyr.approximation.clone();
    for (j, s) in pyr.details.iter().enumerate().rev() {
        let step = 1 << j;
        let row_lo = synthesize_columns(&approx, &s.lh, pyr.wavelet, step);
        let row_hi = synthesize_columns(&s.hl, &s.hh, pyr.wavelet, step);
        approx = synthesize_rows(&row_lo, &row_hi, pyr.wavelet, step);
    }
    Ok(approx)
}
