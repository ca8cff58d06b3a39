use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};

/// Binary `h × w` grid stored row-major as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

/// Half-open integer pixel box `(x0, y0, x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [i64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn as_f64(&self) -> [f64; 4] {
        [self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64]
    }
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![0; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![1; h * w],
        }
    }

    /// Any nonzero byte counts as set.
    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), h * w);
        Self {
            h,
            w,
            bits: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(h, w);
        for r in 0..h {
            for c in 0..w {
                m.bits[r * w + c] = u8::from(f(r, c));
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.w + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.w + col] = u8::from(value);
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Mask {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask shapes differ");
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a | b)
    }

    /// `self ∧ ¬other`.
    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn not(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Tight half-open box of the set pixels.
    pub fn bbox(&self) -> Result<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) {
                    any = true;
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                }
            }
        }
        if !any {
            return Err(PlugError::EmptyMask);
        }
        Ok(BBox::new(x0 as i64, y0 as i64, x1 as i64, y1 as i64))
    }

    /// 0/255 grayscale bytes.
    pub fn to_gray(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b * 255).collect()
    }
}

/// Tight half-open box `(x0, y0, x1, y1)` of the set pixels of `mask`.
pub fn visible_bbox(mask: &Mask) -> Result<BBox> {
    mask.bbox()
}
