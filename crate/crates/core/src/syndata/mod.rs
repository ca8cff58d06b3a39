//! Procedural occluded-shape scenes with exact amodal and visible ground
//! truth, crop utilities, and the on-disk dataset format.

mod crop;
mod io;
mod mask;
mod scene;
mod shape;

pub use crop::{crop_double, double_window, CropTransform};
pub use io::{mask_file, read_dataset, read_manifest, scene_file, write_dataset, Manifest, ObjectEntry, SampleEntry, MANIFEST_FILE};
pub use mask::{visible_bbox, BBox, Mask};
pub use scene::{
    compose_occlusion, gen_scene, generate_split, occlusion_ratio, sample_seed, GeneratorConfig, ObjectAnnotation, Scene,
    Split,
};
pub use shape::{random_shape, rasterize_shape, Shape, ShapeKind};
