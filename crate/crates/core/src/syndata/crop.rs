use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};
use crate::syndata::{BBox, Mask};

/// Affine map between a source-image window and an `out_size²` crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    /// Clipped window `(x0, y0, x1, y1)` in source pixel coordinates.
    pub window: [f64; 4],
    pub out_size: usize,
    pub src_height: usize,
    pub src_width: usize,
}

impl CropTransform {
    fn sx(&self) -> f64 {
        (self.window[2] - self.window[0]) / self.out_size as f64
    }

    fn sy(&self) -> f64 {
        (self.window[3] - self.window[1]) / self.out_size as f64
    }

    /// Crop coordinates → source coordinates.
    pub fn to_source(&self, u: f64, v: f64) -> (f64, f64) {
        (self.window[0] + u * self.sx(), self.window[1] + v * self.sy())
    }

    /// Source coordinates → crop coordinates.
    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.window[0]) / self.sx(), (y - self.window[1]) / self.sy())
    }

    /// Bilinear resampling of a channel-major `channels × H × W` image.
    pub fn crop_image(&self, image: &[f32], channels: usize) -> Vec<f32> {
        let (h, w, s) = (self.src_height, self.src_width, self.out_size);
        assert_eq!(image.len(), channels * h * w);
        let mut out = vec![0.0f32; channels * s * s];
        let axis = |n: usize, coord: f64| {
            let f = (coord - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (f - i0 as f64) as f32)
        };
        for v in 0..s {
            for u in 0..s {
                let (x, y) = self.to_source(u as f64 + 0.5, v as f64 + 0.5);
                let (x0, x1, tx) = axis(w, x);
                let (y0, y1, ty) = axis(h, y);
                for c in 0..channels {
                    let src = &image[c * h * w..(c + 1) * h * w];
                    let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                    let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                    out[c * s * s + v * s + u] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        out
    }

    /// Nearest-neighbor resampling of a source mask into crop space.
    pub fn crop_mask(&self, mask: &Mask) -> Mask {
        let (h, w, s) = (self.src_height, self.src_width, self.out_size);
        assert_eq!((mask.height(), mask.width()), (h, w));
        Mask::from_fn(s, s, |v, u| {
            let (x, y) = self.to_source(u as f64 + 0.5, v as f64 + 0.5);
            let c = (x.floor().max(0.0) as usize).min(w - 1);
            let r = (y.floor().max(0.0) as usize).min(h - 1);
            mask.get(r, c)
        })
    }

    /// Nearest-neighbor mapping of a crop-space mask back to the source
    /// frame; pixels outside the window are unset.
    pub fn uncrop_mask(&self, mask: &Mask) -> Mask {
        let (h, w, s) = (self.src_height, self.src_width, self.out_size);
        assert_eq!((mask.height(), mask.width()), (s, s));
        Mask::from_fn(h, w, |r, c| {
            let (u, v) = self.to_crop(c as f64 + 0.5, r as f64 + 0.5);
            if u < 0.0 || v < 0.0 || u >= s as f64 || v >= s as f64 {
                return false;
            }
            mask.get(v.floor() as usize, u.floor() as usize)
        })
    }

    /// A source box in crop coordinates, clipped to `[0, out_size]`.
    pub fn box_to_crop(&self, b: BBox) -> [f64; 4] {
        let s = self.out_size as f64;
        let (u0, v0) = self.to_crop(b.x0 as f64, b.y0 as f64);
        let (u1, v1) = self.to_crop(b.x1 as f64, b.y1 as f64);
        [u0.clamp(0.0, s), v0.clamp(0.0, s), u1.clamp(0.0, s), v1.clamp(0.0, s)]
    }
}

/// Crop window for `bbox` magnified 2× about its center and clipped to the
/// image.
pub fn double_window(bbox: BBox, height: usize, width: usize) -> Result<[f64; 4]> {
    if bbox.is_empty() || bbox.x0 < 0 || bbox.y0 < 0 || bbox.x1 > width as i64 || bbox.y1 > height as i64 {
        return Err(PlugError::InvalidArgument(format!(
            "bbox {:?} is empty or outside the {height}x{width} image",
            bbox.to_array()
        )));
    }
    let [x0, y0, x1, y1] = bbox.as_f64();
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let (bw, bh) = (x1 - x0, y1 - y0);
    Ok([
        (cx - bw).max(0.0),
        (cy - bh).max(0.0),
        (cx + bw).min(width as f64),
        (cy + bh).min(height as f64),
    ])
}

/// Crops a channel-major image around the doubled `bbox` and resamples it
/// to `out_size × out_size`.
pub fn crop_double(
    image: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    bbox: BBox,
    out_size: usize,
) -> Result<(Vec<f32>, CropTransform)> {
    if out_size == 0 {
        return Err(PlugError::InvalidArgument("crop size must be positive".into()));
    }
    let t = CropTransform {
        window: double_window(bbox, height, width)?,
        out_size,
        src_height: height,
        src_width: width,
    };
    Ok((t.crop_image(image, channels), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centered_box_doubles() {
        let w = double_window(BBox::new(16, 16, 32, 32), 64, 64).unwrap();
        assert_eq!(w, [8.0, 8.0, 40.0, 40.0]);
    }

    #[test]
    fn corner_box_is_clipped() {
        let w = double_window(BBox::new(0, 0, 16, 16), 64, 64).unwrap();
        assert_eq!(w, [0.0, 0.0, 24.0, 24.0]);
    }

    #[test]
    fn full_image_box_keeps_full_window() {
        let w = double_window(BBox::new(0, 0, 64, 64), 64, 64).unwrap();
        assert_eq!(w, [0.0, 0.0, 64.0, 64.0]);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(double_window(BBox::new(5, 5, 5, 9), 64, 64).is_err());
        assert!(double_window(BBox::new(-1, 0, 5, 9), 64, 64).is_err());
        assert!(double_window(BBox::new(0, 0, 65, 9), 64, 64).is_err());
    }

    #[test]
    fn full_window_crop_of_same_size_is_identity() {
        let img: Vec<f32> = (0..3 * 16 * 16).map(|v| (v % 251) as f32 / 251.0).collect();
        let (out, _) = crop_double(&img, 3, 16, 16, BBox::new(0, 0, 16, 16), 16).unwrap();
        for (a, b) in out.iter().zip(&img) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_crop_preserves_binarity() {
        let m = Mask::from_fn(64, 64, |r, c| (r / 3 + c / 5) % 2 == 0);
        let (_, t) = crop_double(&vec![0.0; 3 * 64 * 64], 3, 64, 64, BBox::new(10, 12, 30, 41), 64).unwrap();
        let c = t.crop_mask(&m);
        assert!(c.bits().iter().all(|&b| b <= 1));
    }

    proptest! {
        #[test]
        fn window_round_trips_through_transform(
            x0 in 0i64..60, y0 in 0i64..60, w in 1i64..64, h in 1i64..64, size in 8usize..96
        ) {
            let b = BBox::new(x0, y0, (x0 + w).min(64), (y0 + h).min(64));
            let win = double_window(b, 64, 64).unwrap();
            let t = CropTransform { window: win, out_size: size, src_height: 64, src_width: 64 };
            let (a0, b0) = t.to_source(0.0, 0.0);
            let (a1, b1) = t.to_source(size as f64, size as f64);
            prop_assert!((a0 - win[0]).abs() < 1e-9 && (b0 - win[1]).abs() < 1e-9);
            prop_assert!((a1 - win[2]).abs() < 1e-9 && (b1 - win[3]).abs() < 1e-9);
            let (u, v) = t.to_crop(win[2], win[3]);
            prop_assert!((u - size as f64).abs() < 1e-9 && (v - size as f64).abs() < 1e-9);
        }
    }
}
