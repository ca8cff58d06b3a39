//! Single-image prediction and the PNG renderings written by `predict`.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{PlugError, Result};
use crate::metrics::{binarize_logits, EvalOptions};
use crate::model::PlugModel;
use crate::nn::sigmoid;
use crate::scalar::Scalar;
use crate::syndata::{crop_double, BBox, CropTransform};

/// Crop-space outputs as 8-bit grayscale planes.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub size: usize,
    pub transform: CropTransform,
    /// Binarized refined amodal mask, 0 or 255.
    pub amodal: Vec<u8>,
    /// Binarized inmodal mask, 0 or 255.
    pub visible: Vec<u8>,
    pub uncertainty_v: Vec<u8>,
    pub uncertainty_a: Vec<u8>,
    /// input | coarse inmodal | coarse amodal | uncertainty | refined.
    pub panel: RgbImage,
}

fn to_u8(bits: &[u8]) -> Vec<u8> {
    bits.iter().map(|&b| b * 255).collect()
}

fn prob_gray<T: Scalar>(logits: &[T]) -> Vec<u8> {
    logits
        .iter()
        .map(|&x| (sigmoid(x).as_f64() * 255.0).round() as u8)
        .collect()
}

/// Crops `image` (channel-major RGB in `[0, 1]`) around `bbox`, runs the
/// model with the box as prompt and renders the outputs.
pub fn predict<T: Scalar>(
    model: &PlugModel<T>,
    image: &[f32],
    height: usize,
    width: usize,
    bbox: BBox,
    opts: &EvalOptions,
) -> Result<Rendered> {
    let s = model.image_size();
    let (crop, t) = crop_double(image, 3, height, width, bbox, s)?;
    let input: Vec<T> = crop.iter().map(|&v| T::lit(f64::from(v))).collect();
    let pred = model.forward(&input, t.box_to_crop(bbox), opts.eps)?;
    let inmodal = pred.inmodal.as_ref().unwrap_or(&pred.amodal);
    let refined = binarize_logits(&pred.refined, s, s, opts.threshold, opts.threshold_space);
    let visible = binarize_logits(inmodal, s, s, opts.threshold, opts.threshold_space);

    let amodal = to_u8(refined.bits());
    let planes = [prob_gray(inmodal), prob_gray(&pred.amodal), pred.uncertainty_a.to_gray(), amodal.clone()];
    let mut panel = RgbImage::new(5 * s as u32, s as u32);
    for y in 0..s {
        for x in 0..s {
            let px = |c: usize| (crop[c * s * s + y * s + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            panel.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            for (k, plane) in planes.iter().enumerate() {
                let g = plane[y * s + x];
                panel.put_pixel(((k + 1) * s + x) as u32, y as u32, image::Rgb([g, g, g]));
            }
        }
    }
    Ok(Rendered {
        size: s,
        transform: t,
        amodal,
        visible: to_u8(visible.bits()),
        uncertainty_v: pred.uncertainty_v.to_gray(),
        uncertainty_a: pred.uncertainty_a.to_gray(),
        panel,
    })
}

impl Rendered {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PlugError::io(dir, e))?;
        let s = self.size as u32;
        let gray = |name: &str, data: &[u8]| {
            let path = dir.join(name);
            GrayImage::from_raw(s, s, data.to_vec())
                .expect("plane sized for crop")
                .save(&path)
                .map_err(|e| PlugError::dataset(&path, e.to_string()))
        };
        gray("amodal.png", &self.amodal)?;
        gray("visible.png", &self.visible)?;
        gray("uncertainty_v.png", &self.uncertainty_v)?;
        gray("uncertainty_a.png", &self.uncertainty_a)?;
        let path = dir.join("panel.png");
        self.panel
            .save(&path)
            .map_err(|e| PlugError::dataset(&path, e.to_string()))
    }
}

/// Reads an 8-bit RGB PNG as channel-major floats in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| PlugError::dataset(path, e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + y as usize * w + x as usize] = f32::from(p[c]) / 255.0;
        }
    }
    Ok((out, h, w))
}
