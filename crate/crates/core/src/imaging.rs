//! RGB float images plus PNG and plain-text grid IO.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, p) in self.pixels.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            let q = p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x, y, image::Rgb(q));
        }
        buf.save(path)
            .map_err(|e| Error::Other(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Other(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| p.0.map(|c| f64::from(c) / 255.0))
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            pixels,
        })
    }

    /// Lossless text form: header `W H 3`, then one row of `W*3` floats per line.
    pub fn to_text_grid(&self) -> String {
        let mut out = format!("{} {} 3\n", self.width, self.height);
        for y in 0..self.height {
            let mut first = true;
            for x in 0..self.width {
                for c in self.get(x, y) {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    write!(out, "{c:?}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text_grid(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| Error::invalid("empty grid file"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::invalid("bad grid header")))
            .collect::<Result<_>>()?;
        if header.len() != 3 || header[2] != 3 {
            return Err(Error::invalid("grid header must be `W H 3`"));
        }
        let (w, h) = (header[0], header[1]);
        let mut img = Self::new(w, h);
        for y in 0..h {
            let vals: Vec<f64> = lines
                .next()
                .ok_or_else(|| Error::invalid("truncated grid"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::invalid("bad grid value")))
                .collect::<Result<_>>()?;
            if vals.len() != w * 3 {
                return Err(Error::shape(w * 3, vals.len()));
            }
            for x in 0..w {
                img.set(x, y, [vals[3 * x], vals[3 * x + 1], vals[3 * x + 2]]);
            }
        }
        Ok(img)
    }
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    /// Pixels that differ from `background` in any channel by more than `tol`.
    pub fn from_foreground(img: &RgbImage, background: [f64; 3], tol: f64) -> Self {
        let values = img
            .pixels
            .iter()
            .map(|p| (0..3).any(|c| (p[c] - background[c]).abs() > tol))
            .collect();
        Self {
            width: img.width,
            height: img.height,
            values,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = RgbImage::load_png(path)?;
        Ok(Self {
            width: img.width,
            height: img.height,
            values: img.pixels.iter().map(|p| p[0] > 0.5).collect(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = RgbImage {
            width: self.width,
            height: self.height,
            pixels: self
                .values
                .iter()
                .map(|&m| if m { [1.0; 3] } else { [0.0; 3] })
                .collect(),
        };
        img.save_png(path)
    }
}
