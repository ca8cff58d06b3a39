use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};
use crate::syndata::shape::{random_shape, rasterize_shape, Shape};
use crate::syndata::{BBox, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = PlugError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PlugError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive occlusion-ratio window for the target object (id 0).
    pub occlusion_window: [f64; 2],
    /// Require every object, not only the target, to be unoccluded.
    pub all_unoccluded: bool,
    pub max_attempts: usize,
    pub noise_amplitude: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            min_objects: 2,
            max_objects: 4,
            occlusion_window: [0.1, 0.7],
            all_unoccluded: false,
            max_attempts: 1000,
            noise_amplitude: 0.05,
        }
    }
}

impl GeneratorConfig {
    /// Default configuration for a split; the pretrain split forces every
    /// occlusion ratio to zero.
    pub fn for_split(split: Split) -> Self {
        let mut cfg = Self::default();
        if split == Split::Pretrain {
            cfg.occlusion_window = [0.0, 0.0];
            cfg.all_unoccluded = true;
        }
        cfg
    }

    /// Same geometry settings with the occlusion rule of `split`.
    pub fn with_split(&self, split: Split) -> Self {
        let rules = Self::for_split(split);
        Self {
            occlusion_window: rules.occlusion_window,
            all_unoccluded: rules.all_unoccluded,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlugError::Config(m.to_string()));
        if self.canvas < 8 {
            return bad("canvas must be at least 8");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        let [lo, hi] = self.occlusion_window;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("occlusion window must be an ordered sub-interval of [0, 1]");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub id: usize,
    pub depth: u32,
    pub amodal: Mask,
    pub visible: Mask,
    /// Empty (all zeros) when the visible mask is empty.
    pub visible_bbox: BBox,
    pub amodal_bbox: BBox,
    pub occlusion_ratio: f64,
}

impl ObjectAnnotation {
    /// `M_a ∧ ¬M_v`.
    pub fn occluded(&self) -> Mask {
        self.amodal.and_not(&self.visible)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Interleaved 8-bit RGB, row-major.
    pub image: Vec<u8>,
    /// Object 0 is the target object.
    pub objects: Vec<ObjectAnnotation>,
    pub seed: u64,
}

impl Scene {
    pub fn target(&self) -> &ObjectAnnotation {
        &self.objects[0]
    }

    /// Channel-major `3 × H × W` floats in `[0, 1]`.
    pub fn image_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = f32::from(self.image[p * 3 + c]) / 255.0;
            }
        }
        out
    }
}

pub fn occlusion_ratio(amodal: &Mask, visible: &Mask) -> f64 {
    let total = amodal.count();
    if total == 0 {
        return 0.0;
    }
    amodal.and_not(visible).count() as f64 / total as f64
}

/// Derives each shape's visible mask by removing every strictly-in-front
/// shape's amodal mask. Result order follows `shapes`.
pub fn compose_occlusion(shapes: &[Shape], h: usize, w: usize) -> Result<Vec<ObjectAnnotation>> {
    let mut depths: Vec<u32> = shapes.iter().map(|s| s.depth).collect();
    depths.sort_unstable();
    if depths.windows(2).any(|p| p[0] == p[1]) {
        return Err(PlugError::InvalidArgument("shape depths must be unique".into()));
    }
    let amodal = shapes
        .iter()
        .map(|s| rasterize_shape(s, h, w))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let mut covered = Mask::new(h, w);
        for (j, other) in shapes.iter().enumerate() {
            if other.depth < shape.depth {
                covered = covered.or(&amodal[j]);
            }
        }
        let visible = amodal[i].and_not(&covered);
        let empty = BBox::new(0, 0, 0, 0);
        out.push(ObjectAnnotation {
            id: i,
            depth: shape.depth,
            visible_bbox: visible.bbox().unwrap_or(empty),
            amodal_bbox: amodal[i].bbox().unwrap_or(empty),
            occlusion_ratio: occlusion_ratio(&amodal[i], &visible),
            amodal: amodal[i].clone(),
            visible,
        });
    }
    Ok(out)
}

/// Per-sample seed derived from the global seed and the sample index.
pub fn sample_seed(global_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(index);
    rng.next_u64()
}

fn far_enough(a: &[f64; 3], b: &[f64; 3], min: f64) -> bool {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) >= min
}

fn pick_fill<R: Rng + ?Sized>(rng: &mut R, taken: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for _ in 0..64 {
        c = [rng.gen(), rng.gen(), rng.gen()];
        if taken.iter().all(|t| far_enough(&c, t, 0.3)) {
            break;
        }
    }
    c
}

/// Smooth low-frequency noise in `[-1, 1]`: a random lattice with one node
/// every 8 pixels, bilinearly interpolated.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    let cell = 8.0;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let fy = r as f64 / cell;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for c in 0..w {
            let fx = c as f64 / cell;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let l = |y: usize, x: usize| lattice[y * gw + x];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out[r * w + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn render(shapes: &[Shape], amodal: &[&Mask], bg: [f64; 3], noise: &[f64], amp: f64, h: usize, w: usize) -> Vec<u8> {
    let mut img = vec![0.0f64; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            img[p * 3 + c] = bg[c] + amp * noise[p];
        }
    }
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(shapes[i].depth));
    for i in order {
        for (p, &bit) in amodal[i].bits().iter().enumerate() {
            if bit != 0 {
                img[p * 3..p * 3 + 3].copy_from_slice(&shapes[i].fill);
            }
        }
    }
    img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Rejection-samples one scene. Fully hidden non-target shapes are dropped
/// from the annotation list (they cannot change any other visible mask).
pub fn gen_scene(seed: u64, cfg: &GeneratorConfig) -> Result<Scene> {
    cfg.validate()?;
    let size = cfg.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = cfg.occlusion_window;
    for _ in 0..cfg.max_attempts {
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let bg: [f64; 3] = [
            rng.gen_range(0.15..0.85),
            rng.gen_range(0.15..0.85),
            rng.gen_range(0.15..0.85),
        ];
        let mut depths: Vec<u32> = (0..n as u32).collect();
        depths.shuffle(&mut rng);
        let mut taken = vec![bg];
        let mut shapes = Vec::with_capacity(n);
        for &depth in &depths {
            let fill = pick_fill(&mut rng, &taken);
            taken.push(fill);
            shapes.push(random_shape(&mut rng, size, fill, depth));
        }
        let noise = value_noise(&mut rng, size, size);

        let objects = match compose_occlusion(&shapes, size, size) {
            Ok(o) => o,
            Err(PlugError::DegenerateShape(_)) => continue,
            Err(e) => return Err(e),
        };
        let target = &objects[0];
        if target.visible.is_empty() || target.amodal.is_empty() {
            continue;
        }
        if !(lo..=hi).contains(&target.occlusion_ratio) {
            continue;
        }
        if cfg.all_unoccluded && objects.iter().any(|o| o.occlusion_ratio != 0.0) {
            continue;
        }
        let kept: Vec<usize> = (0..n).filter(|&i| !objects[i].visible.is_empty()).collect();
        if kept.len() < cfg.min_objects {
            continue;
        }

        let amodal: Vec<&Mask> = objects.iter().map(|o| &o.amodal).collect();
        let image = render(&shapes, &amodal, bg, &noise, cfg.noise_amplitude, size, size);
        let objects = kept
            .iter()
            .enumerate()
            .map(|(new_id, &i)| ObjectAnnotation {
                id: new_id,
                ..objects[i].clone()
            })
            .collect();
        return Ok(Scene {
            height: size,
            width: size,
            image,
            objects,
            seed,
        });
    }
    Err(PlugError::GenerationFailed {
        seed,
        attempts: cfg.max_attempts,
    })
}

/// Generates `num` scenes with per-sample seeds derived from `global_seed`,
/// in index order regardless of the worker count.
pub fn generate_split(num: usize, global_seed: u64, cfg: &GeneratorConfig) -> Result<Vec<Scene>> {
    (0..num as u64)
        .into_par_iter()
        .map(|i| gen_scene(sample_seed(global_seed, i), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shape_is_unoccluded() {
        let s = Shape::rect(8.0, 8.0, 20.0, 20.0);
        let o = compose_occlusion(&[s], 32, 32).unwrap();
        assert_eq!(o[0].visible, o[0].amodal);
        assert_eq!(o[0].occlusion_ratio, 0.0);
    }

    #[test]
    fn fully_hidden_shape_has_ratio_one() {
        let front = Shape::rect(4.0, 4.0, 28.0, 28.0).with_depth(0);
        let back = Shape::rect(10.0, 10.0, 20.0, 20.0).with_depth(1);
        let o = compose_occlusion(&[front, back], 32, 32).unwrap();
        assert!(o[1].visible.is_empty());
        assert_eq!(o[1].occlusion_ratio, 1.0);
    }

    #[test]
    fn rectangle_pair_matches_pixel_difference_oracle() {
        let a = Shape::rect(8.0, 8.0, 16.0, 16.0).with_depth(0);
        let b = Shape::rect(4.0, 4.0, 20.0, 12.0).with_depth(1);
        let o = compose_occlusion(&[a, b], 64, 64).unwrap();
        // Oracle: explicit per-pixel set difference of the two rectangles.
        let mut expect = 0;
        let mut xs = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for r in 0..64i64 {
            for c in 0..64i64 {
                let in_b = (4..20).contains(&c) && (4..12).contains(&r);
                let in_a = (8..16).contains(&c) && (8..16).contains(&r);
                if in_b && !in_a {
                    expect += 1;
                    xs = (xs.0.min(c), xs.1.min(r), xs.2.max(c + 1), xs.3.max(r + 1));
                }
            }
        }
        assert_eq!(expect, 96);
        assert_eq!(o[1].visible.count(), expect);
        assert_eq!(o[1].visible_bbox, BBox::new(xs.0, xs.1, xs.2, xs.3));
        assert_eq!(o[1].visible_bbox, BBox::new(4, 4, 20, 12));
    }

    #[test]
    fn duplicate_depths_rejected() {
        let a = Shape::rect(1.0, 1.0, 5.0, 5.0);
        assert!(compose_occlusion(&[a.clone(), a], 16, 16).is_err());
    }

    #[test]
    fn order_independent_given_depths() {
        let a = Shape::rect(8.0, 8.0, 16.0, 16.0).with_depth(2);
        let b = Shape::ellipse(14.0, 12.0, 6.0, 4.0).with_depth(0);
        let c = Shape::rect(4.0, 4.0, 20.0, 12.0).with_depth(1);
        let fwd = compose_occlusion(&[a.clone(), b.clone(), c.clone()], 32, 32).unwrap();
        let rev = compose_occlusion(&[c, b, a], 32, 32).unwrap();
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            assert_eq!(fwd[i].visible, rev[j].visible);
            assert_eq!(fwd[i].occlusion_ratio, rev[j].occlusion_ratio);
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let cfg = GeneratorConfig::default();
        assert_eq!(gen_scene(42, &cfg).unwrap(), gen_scene(42, &cfg).unwrap());
        assert_ne!(gen_scene(42, &cfg).unwrap().image, gen_scene(43, &cfg).unwrap().image);
    }

    #[test]
    fn pretrain_scenes_are_unoccluded() {
        let cfg = GeneratorConfig::for_split(Split::Pretrain);
        for i in 0..20 {
            let s = gen_scene(sample_seed(5, i), &cfg).unwrap();
            assert!(s.objects.iter().all(|o| o.occlusion_ratio == 0.0));
        }
    }

    #[test]
    fn exhausted_budget_is_an_error() {
        let cfg = GeneratorConfig {
            occlusion_window: [0.999, 1.0],
            max_attempts: 5,
            ..GeneratorConfig::default()
        };
        assert!(matches!(gen_scene(1, &cfg), Err(PlugError::GenerationFailed { .. })));
    }
}
