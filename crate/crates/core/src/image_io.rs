//! Grayscale rasters, Netpbm (PGM/PBM) input and output, and synthetic test
//! images.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// A grayscale image with intensities normalized to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParams(format!(
                "intensity {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
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

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Rolls the image so that pixel `(x, y)` moves to
    /// `((x + dx) mod W, (y + dy) mod H)`.
    pub fn circular_shift(&self, dx: usize, dy: usize) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                data[((y + dy) % h) * w + (x + dx) % w] = self.data[y * w + x];
            }
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// Adds i.i.d. zero-mean Gaussian noise and clamps to `[0, 1]`.
///
/// Deviates are drawn in row-major pixel order from [`SplitMix64`] seeded
/// with `seed`.
pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    assert!(sigma >= 0.0, "noise sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = SplitMix64::new(seed);
    let data = img
        .data
        .iter()
        .map(|&v| (v + sigma * rng.next_normal()).clamp(0.0, 1.0))
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Vertical step edge: columns `< edge_column` hold `low`, the rest `high`.
pub fn make_step_image(
    width: usize,
    height: usize,
    edge_column: usize,
    low: f64,
    high: f64,
) -> Result<GrayImage> {
    if edge_column == 0 || edge_column >= width {
        return Err(Error::InvalidParams(format!(
            "edge column {edge_column} must lie in 1..{width}"
        )));
    }
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "need 0 <= low < high <= 1, got low={low} high={high}"
        )));
    }
    let data = (0..height)
        .flat_map(|_| (0..width).map(move |x| if x < edge_column { low } else { high }))
        .collect();
    GrayImage::new(width, height, data)
}

/// Linear ramp from `low` to `high` spread over `ramp_width` columns ending at
/// `edge_column` (the first column at `high`). `ramp_width = 1` is a step.
pub fn make_ramp_image(
    width: usize,
    height: usize,
    edge_column: usize,
    ramp_width: usize,
    low: f64,
    high: f64,
) -> Result<GrayImage> {
    if ramp_width == 0 || ramp_width > edge_column {
        return Err(Error::InvalidParams(format!(
            "ramp width {ramp_width} must lie in 1..={edge_column}"
        )));
    }
    let step = make_step_image(width, height, edge_column, low, high)?;
    let start = edge_column - ramp_width;
    let row: Vec<f64> = (0..width)
        .map(|x| {
            if x <= start {
                low
            } else if x >= edge_column {
                high
            } else {
                low + (high - low) * (x - start) as f64 / ramp_width as f64
            }
        })
        .collect();
    let data = (0..height).flat_map(|_| row.iter().copied()).collect();
    GrayImage::new(step.width, step.height, data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn header_uint(&mut self, what: &str) -> Result<u64> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if start >= self.bytes.len() {
                Error::netpbm(start, format!("truncated header, expected {what}"))
            } else {
                Error::netpbm(start, format!("malformed header, expected {what}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::netpbm(start, format!("{what} out of range")))
    }

    /// Raster data starts after exactly one whitespace byte.
    fn end_of_header(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            Some(_) => Err(Error::netpbm(
                self.pos,
                "malformed header, expected whitespace",
            )),
            None => Err(Error::netpbm(self.pos, "truncated payload")),
        }
    }
}

fn read_magic(bytes: &[u8]) -> Result<[u8; 2]> {
    if bytes.len() < 2 {
        return Err(Error::netpbm(0, "truncated header, missing magic"));
    }
    if bytes[0] != b'P' {
        return Err(Error::netpbm(0, "unsupported magic"));
    }
    Ok([bytes[0], bytes[1]])
}

fn read_dimensions(cur: &mut Cursor<'_>) -> Result<(usize, usize)> {
    let w_at = cur.pos;
    let width = cur.header_uint("width")? as usize;
    let h_at = cur.pos;
    let height = cur.header_uint("height")? as usize;
    if width == 0 {
        return Err(Error::netpbm(w_at, "width must be positive"));
    }
    if height == 0 {
        return Err(Error::netpbm(h_at, "height must be positive"));
    }
    Ok((width, height))
}

/// Decodes a binary (`P5`) or ASCII (`P2`) graymap, normalizing intensities by
/// maxval.
pub fn read_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let magic = read_magic(bytes)?;
    let ascii = match &magic {
        b"P2" => true,
        b"P5" => false,
        _ => return Err(Error::netpbm(0, "unsupported magic")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let (width, height) = read_dimensions(&mut cur)?;
    let max_at = cur.pos;
    let maxval = cur.header_uint("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::netpbm(
            max_at,
            format!("maxval {maxval} not in 1..=65535"),
        ));
    }
    let n = width * height;
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(n);
    if ascii {
        for _ in 0..n {
            cur.skip_whitespace_and_comments();
            let at = cur.pos;
            let v = cur.header_uint("pixel value").map_err(|e| match e {
                Error::Netpbm { offset, .. } if offset >= bytes.len() => {
                    Error::netpbm(offset, "truncated payload")
                }
                other => other,
            })?;
            if v > maxval {
                return Err(Error::netpbm(
                    at,
                    format!("pixel value {v} exceeds maxval {maxval}"),
                ));
            }
            data.push(v as f64 / scale);
        }
    } else {
        cur.end_of_header()?;
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let start = cur.pos;
        let needed = n * bytes_per;
        if bytes.len() - start < needed {
            return Err(Error::netpbm(
                bytes.len(),
                format!("truncated payload, expected {needed} raster bytes"),
            ));
        }
        for i in 0..n {
            let at = start + i * bytes_per;
            let v = if bytes_per == 2 {
                u16::from_be_bytes([bytes[at], bytes[at + 1]]) as u64
            } else {
                bytes[at] as u64
            };
            if v > maxval {
                return Err(Error::netpbm(
                    at,
                    format!("pixel value {v} exceeds maxval {maxval}"),
                ));
            }
            data.push(v as f64 / scale);
        }
    }
    GrayImage::new(width, height, data)
}

/// Encodes as binary `P5`, rounding each intensity to the nearest level.
pub fn write_pgm(img: &GrayImage, maxval: u16) -> Vec<u8> {
    assert!(maxval >= 1, "maxval must be in 1..=65535");
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    let m = maxval as f64;
    for &v in &img.data {
        let level = (v * m).round() as u16;
        if maxval > 255 {
            out.extend_from_slice(&level.to_be_bytes());
        } else {
            out.push(level as u8);
        }
    }
    out
}

/// A binary raster as stored in PBM files (`true` = black = edge).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

/// Encodes a bitmap as packed binary `P4`.
pub fn write_pbm(map: &Bitmap) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", map.width, map.height).into_bytes();
    for row in map.bits.chunks(map.width) {
        for chunk in row.chunks(8) {
            let mut byte = 0u8;
            for (k, &b) in chunk.iter().enumerate() {
                if b {
                    byte |= 0x80 >> k;
                }
            }
            out.push(byte);
        }
    }
    out
}

/// Encodes a bitmap as a `P5` graymap with values `{0, 255}`.
pub fn write_bitmap_pgm(map: &Bitmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Reads a bitmap from `P1`/`P4`, or from `P2`/`P5` where any nonzero
/// sample counts as set.
pub fn read_bitmap(bytes: &[u8]) -> Result<Bitmap> {
    let magic = read_magic(bytes)?;
    match &magic {
        b"P2" | b"P5" => {
            let img = read_pgm(bytes)?;
            Ok(Bitmap {
                width: img.width,
                height: img.height,
                bits: img.data.iter().map(|&v| v > 0.0).collect(),
            })
        }
        b"P1" => {
            let mut cur = Cursor { bytes, pos: 2 };
            let (width, height) = read_dimensions(&mut cur)?;
            let mut bits = Vec::with_capacity(width * height);
            for _ in 0..width * height {
                cur.skip_whitespace_and_comments();
                match bytes.get(cur.pos) {
                    Some(b'0') => bits.push(false),
                    Some(b'1') => bits.push(true),
                    Some(_) => return Err(Error::netpbm(cur.pos, "expected bit 0 or 1")),
                    None => return Err(Error::netpbm(cur.pos, "truncated payload")),
                }
                cur.pos += 1;
            }
            Ok(Bitmap {
                width,
                height,
                bits,
            })
        }
        b"P4" => {
            let mut cur = Cursor { bytes, pos: 2 };
            let (width, height) = read_dimensions(&mut cur)?;
            cur.end_of_header()?;
            let stride = width.div_ceil(8);
            let start = cur.pos;
            if bytes.len() - start < stride * height {
                return Err(Error::netpbm(bytes.len(), "truncated payload"));
            }
            let mut bits = Vec::with_capacity(width * height);
            for y in 0..height {
                let row = &bytes[start + y * stride..start + (y + 1) * stride];
                bits.extend((0..width).map(|x| row[x / 8] & (0x80 >> (x % 8)) != 0));
            }
            Ok(Bitmap {
                width,
                height,
                bits,
            })
        }
        _ => Err(Error::netpbm(0, "unsupported magic")),
    }
}
