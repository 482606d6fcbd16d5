//! Probability and binary masks, dice loss and the pixel-RMS norm.

use crate::error::{Error, Result};

/// Smoothing term of the dice loss; keeps the loss defined on empty masks.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Per-pixel probabilities in `[0, 1]`, row-major, stored as `f32` so that the
/// in-memory values match the raw on-disk format exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::DataLength {
                expected: height * width,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ValueOutOfRange { index, value });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        check_dims(height, width)?;
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds a mask from `f(row, col)`; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(y, x)));
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Stores `value` clamped into `[0, 1]`.
    pub fn set(&mut self, y: usize, x: usize, value: f32) {
        self.data[y * self.width + x] = clamp_unit(value);
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Pixels strictly above `threshold`.
    pub fn binarize(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn ensure_same_dims(&self, other: &ProbMask) -> Result<()> {
        same_dims(self.dims(), other.dims())
    }
}

impl From<&BinaryMask> for ProbMask {
    fn from(m: &BinaryMask) -> Self {
        ProbMask {
            height: m.height,
            width: m.width,
            data: m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-pixel membership, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![false; height * width],
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// `(row, col)` of every set pixel in row-major order.
    pub fn set_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Tight pixel bounds `(row_min, col_min, row_max_exclusive, col_max_exclusive)`.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.set_pixels();
        let (y0, x0) = it.next()?;
        let (mut r0, mut c0, mut r1, mut c1) = (y0, x0, y0, x0);
        for (y, x) in it {
            r0 = r0.min(y);
            c0 = c0.min(x);
            r1 = r1.max(y);
            c1 = c1.max(x);
        }
        Some((r0, c0, r1 + 1, c1 + 1))
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::EmptyMask { height, width });
    }
    Ok(())
}

fn same_dims(left: (usize, usize), right: (usize, usize)) -> Result<()> {
    if left != right {
        return Err(Error::DimensionMismatch { left, right });
    }
    Ok(())
}

fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Smoothed dice loss `1 - (2 sum(p q) + e) / (sum(p^2) + sum(q^2) + e)`.
pub fn dice_loss(pred: &ProbMask, target: &ProbMask) -> Result<f64> {
    pred.ensure_same_dims(target)?;
    let (mut inter, mut pp, mut qq) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &q) in pred.values().iter().zip(target.values()) {
        let (p, q) = (p as f64, q as f64);
        inter += p * q;
        pp += p * p;
        qq += q * q;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (pp + qq + DICE_SMOOTH))
}

/// Frobenius norm normalized by `sqrt(H * W)`.
pub fn rms_norm(mask: &ProbMask) -> f64 {
    let ss: f64 = mask.values().iter().map(|&v| (v as f64) * (v as f64)).sum();
    (ss / mask.len() as f64).sqrt()
}

/// Pixel-RMS distance between two masks of equal size.
pub fn rms_distance(a: &ProbMask, b: &ProbMask) -> Result<f64> {
    Ok(mean_squared_error(a, b)?.sqrt())
}

pub fn mean_squared_error(a: &ProbMask, b: &ProbMask) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let ss: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(ss / a.len() as f64)
}
