use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};
use crate::syndata::scene::{occlusion_ratio, sample_seed, GeneratorConfig, ObjectAnnotation, Scene, Split};
use crate::syndata::{BBox, Mask};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: usize,
    pub visible_bbox: [i64; 4],
    pub amodal_bbox: [i64; 4],
    pub occlusion_ratio: f64,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub scene: String,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub split: Split,
    pub seed: u64,
    pub canvas: [usize; 2],
    pub generator: GeneratorConfig,
    pub samples: Vec<SampleEntry>,
}

pub fn scene_file(idx: usize) -> String {
    format!("scene_{idx:06}.png")
}

pub fn mask_file(idx: usize, obj: usize, kind: &str) -> String {
    format!("scene_{idx:06}_obj{obj}_{kind}.png")
}

fn save_png_gray(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized for image");
    img.save(path)
        .map_err(|e| PlugError::dataset(path, e.to_string()))
}

/// Writes `scenes` under `dir` and returns the manifest (also written).
pub fn write_dataset(
    dir: &Path,
    split: Split,
    seed: u64,
    generator: &GeneratorConfig,
    scenes: &[Scene],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| PlugError::io(dir, e))?;
    let mut samples = Vec::with_capacity(scenes.len());
    for (idx, scene) in scenes.iter().enumerate() {
        let (h, w) = (scene.height, scene.width);
        let path = dir.join(scene_file(idx));
        RgbImage::from_raw(w as u32, h as u32, scene.image.clone())
            .expect("buffer sized for image")
            .save(&path)
            .map_err(|e| PlugError::dataset(&path, e.to_string()))?;
        let mut objects = Vec::with_capacity(scene.objects.len());
        for obj in &scene.objects {
            save_png_gray(&dir.join(mask_file(idx, obj.id, "amodal")), w, h, obj.amodal.to_gray())?;
            save_png_gray(&dir.join(mask_file(idx, obj.id, "visible")), w, h, obj.visible.to_gray())?;
            objects.push(ObjectEntry {
                id: obj.id,
                visible_bbox: obj.visible_bbox.to_array(),
                amodal_bbox: obj.amodal_bbox.to_array(),
                occlusion_ratio: obj.occlusion_ratio,
                depth: obj.depth,
            });
        }
        samples.push(SampleEntry {
            scene: scene_file(idx),
            objects,
        });
    }
    let manifest = Manifest {
        version: "1".into(),
        split,
        seed,
        canvas: [generator.canvas, generator.canvas],
        generator: generator.clone(),
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| PlugError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| PlugError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| PlugError::dataset(&path, e.to_string()))?;
    if m.version != "1" {
        return Err(PlugError::dataset(&path, format!("unsupported version {:?}", m.version)));
    }
    Ok(m)
}

fn load_mask(path: &PathBuf, h: usize, w: usize) -> Result<Mask> {
    if !path.exists() {
        return Err(PlugError::dataset(path, "missing file"));
    }
    let img = image::open(path)
        .map_err(|e| PlugError::dataset(path, e.to_string()))?
        .into_luma8();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(PlugError::dataset(
            path,
            format!("expected {h}x{w}, found {}x{}", img.height(), img.width()),
        ));
    }
    if img.as_raw().iter().any(|&v| v != 0 && v != 255) {
        return Err(PlugError::dataset(path, "mask is not binary 0/255"));
    }
    Ok(Mask::from_bytes(h, w, img.as_raw()))
}

/// Reads and validates a dataset directory. Stored boxes and occlusion
/// ratios must agree exactly with the masks on disk.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = read_manifest(dir)?;
    let [h, w] = manifest.canvas;
    let mut scenes = Vec::with_capacity(manifest.samples.len());
    for (idx, sample) in manifest.samples.iter().enumerate() {
        let path = dir.join(&sample.scene);
        if !path.exists() {
            return Err(PlugError::dataset(&path, "missing file"));
        }
        let img = image::open(&path)
            .map_err(|e| PlugError::dataset(&path, e.to_string()))?
            .into_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(PlugError::dataset(&path, "image size does not match canvas"));
        }
        let mut objects = Vec::with_capacity(sample.objects.len());
        for entry in &sample.objects {
            let apath = dir.join(mask_file(idx, entry.id, "amodal"));
            let vpath = dir.join(mask_file(idx, entry.id, "visible"));
            let amodal = load_mask(&apath, h, w)?;
            let visible = load_mask(&vpath, h, w)?;
            if !visible.and_not(&amodal).is_empty() {
                return Err(PlugError::dataset(&vpath, "visible mask is not contained in amodal mask"));
            }
            let vb = visible.bbox().map_err(|_| PlugError::dataset(&vpath, "visible mask is empty"))?;
            let ab = amodal.bbox().map_err(|_| PlugError::dataset(&apath, "amodal mask is empty"))?;
            let ratio = occlusion_ratio(&amodal, &visible);
            if vb.to_array() != entry.visible_bbox || ab.to_array() != entry.amodal_bbox || ratio != entry.occlusion_ratio {
                return Err(PlugError::dataset(&vpath, "masks disagree with manifest annotations"));
            }
            objects.push(ObjectAnnotation {
                id: entry.id,
                depth: entry.depth,
                amodal,
                visible,
                visible_bbox: vb,
                amodal_bbox: BBox::from_array(entry.amodal_bbox),
                occlusion_ratio: ratio,
            });
        }
        if objects.is_empty() {
            return Err(PlugError::dataset(&path, "scene has no objects"));
        }
        scenes.push(Scene {
            height: h,
            width: w,
            image: img.into_raw(),
            objects,
            seed: sample_seed(manifest.seed, idx as u64),
        });
    }
    Ok((manifest, scenes))
}
