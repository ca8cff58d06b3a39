//! Crop-space training and evaluation samples built from generated scenes.

use rayon::prelude::*;

use crate::error::{PlugError, Result};
use crate::syndata::{crop_double, CropTransform, Mask, Scene};

/// One target object in its double-magnified crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub size: usize,
    /// Channel-major `3 × size × size` in `[0, 1]`.
    pub image: Vec<f32>,
    pub visible: Mask,
    pub amodal: Mask,
    /// Visible box in crop coordinates (the prompt).
    pub visible_box: [f64; 4],
    /// Amodal box in crop coordinates, clipped to the crop.
    pub amodal_box: [f64; 4],
    pub transform: CropTransform,
    pub occlusion_ratio: f64,
}

impl Sample {
    pub fn from_scene(scene: &Scene, size: usize) -> Result<Self> {
        let target = scene.target();
        if target.visible.is_empty() {
            return Err(PlugError::EmptyMask);
        }
        let (image, t) = crop_double(
            &scene.image_chw(),
            3,
            scene.height,
            scene.width,
            target.visible_bbox,
            size,
        )?;
        Ok(Self {
            size,
            image,
            visible: t.crop_mask(&target.visible),
            amodal: t.crop_mask(&target.amodal),
            visible_box: t.box_to_crop(target.visible_bbox),
            amodal_box: t.box_to_crop(target.amodal_bbox),
            transform: t,
            occlusion_ratio: target.occlusion_ratio,
        })
    }

    pub fn visible_f(&self) -> Vec<f32> {
        self.visible.bits().iter().map(|&b| f32::from(b)).collect()
    }

    pub fn amodal_f(&self) -> Vec<f32> {
        self.amodal.bits().iter().map(|&b| f32::from(b)).collect()
    }
}

pub fn samples_from_scenes(scenes: &[Scene], size: usize) -> Result<Vec<Sample>> {
    scenes.par_iter().map(|s| Sample::from_scene(s, size)).collect()
}
