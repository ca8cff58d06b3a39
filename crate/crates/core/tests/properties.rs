use plug_core::checkpoint;
use plug_core::metrics::{binarize, iou, occluded_iou};
use plug_core::model::{AblationFlags, ModelConfig, PlugModel};
use plug_core::refine::{RefineConfig, RefineNet, REFINE_CHANNELS};
use plug_core::syndata::{crop_double, gen_scene, occlusion_ratio, BBox, GeneratorConfig, Mask, Split};
use plug_core::tensor::Tensor;
use plug_core::uncertainty::{
    point_loss, point_loss_backward, sample_points, sample_points_with, uncertainty_map, PointLossParams,
};
use plug_core::nn::Params;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn window_oracle(p: &[f64], h: usize, w: usize, eps: usize) -> Vec<f64> {
    let r = eps as i64 - 1;
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                        let q = p[(yy * w as i64 + xx) as usize].clamp(1e-6, 1.0 - 1e-6);
                        s += -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
                        n += 1.0;
                    }
                }
            }
            out[(y * w as i64 + x) as usize] = s / n;
        }
    }
    out
}

fn grid(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w).map(|_| rng.gen::<f64>()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_objects_are_consistent(seed in any::<u64>(), split in 0usize..2) {
        let split = [Split::Pretrain, Split::Train][split];
        let scene = gen_scene(seed, &GeneratorConfig::for_split(split)).unwrap();
        for o in &scene.objects {
            prop_assert!(o.visible.and_not(&o.amodal).is_empty());
            prop_assert_eq!(occlusion_ratio(&o.amodal, &o.visible), o.occlusion_ratio);
        }
        if split == Split::Pretrain {
            prop_assert!(scene.objects.iter().all(|o| o.occlusion_ratio == 0.0));
        } else {
            let r = scene.target().occlusion_ratio;
            prop_assert!((0.1..=0.7).contains(&r));
        }
        prop_assert_eq!(&gen_scene(seed, &GeneratorConfig::for_split(split)).unwrap(), &scene);
    }

    #[test]
    fn crop_window_maps_back_to_itself(x0 in 0i64..60, y0 in 0i64..60, bw in 1i64..40, bh in 1i64..40, size in 8usize..80) {
        let (x1, y1) = ((x0 + bw).min(64), (y0 + bh).min(64));
        prop_assume!(x1 > x0 && y1 > y0);
        let img = vec![0.5f32; 3 * 64 * 64];
        let (_, t) = crop_double(&img, 3, 64, 64, BBox::new(x0, y0, x1, y1), size).unwrap();
        let (a, b) = t.to_source(0.0, 0.0);
        let (c, d) = t.to_source(size as f64, size as f64);
        prop_assert_eq!([a, b], [t.window[0], t.window[1]]);
        prop_assert!((c - t.window[2]).abs() < 1e-12 && (d - t.window[3]).abs() < 1e-12);
        let [wx0, wy0, wx1, wy1] = t.window;
        prop_assert!(wx0 >= 0.0 && wy0 >= 0.0 && wx1 <= 64.0 && wy1 <= 64.0);
    }

    #[test]
    fn uncertainty_matches_window_loop(seed in any::<u64>(), h in 1usize..14, w in 1usize..14, eps in 1usize..4) {
        let p = grid(seed, h, w);
        let u = uncertainty_map(&p, h, w, eps).unwrap();
        for (a, b) in u.values.iter().zip(window_oracle(&p, h, w, eps)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn moving_toward_half_never_lowers_uncertainty(seed in any::<u64>(), h in 2usize..10, w in 2usize..10, eps in 1usize..4, t in 0.01f64..1.0) {
        let mut p = grid(seed, h, w);
        let idx = (seed as usize) % (h * w);
        let before = uncertainty_map(&p, h, w, eps).unwrap();
        p[idx] += t * (0.5 - p[idx]);
        let after = uncertainty_map(&p, h, w, eps).unwrap();
        let (iy, ix) = ((idx / w) as i64, (idx % w) as i64);
        for y in 0..h {
            for x in 0..w {
                let inside = (y as i64 - iy).abs() < eps as i64 && (x as i64 - ix).abs() < eps as i64;
                let (a, b) = (after.values[y * w + x], before.values[y * w + x]);
                if inside {
                    prop_assert!(a >= b - 1e-15, "({y},{x}) {a} < {b}");
                } else {
                    prop_assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn sampled_points_respect_ranking(seed in any::<u64>(), k in 1usize..40, n in 1usize..5, c in 0.0f64..=1.0) {
        let (h, w) = (16, 16);
        prop_assume!(n * k <= h * w);
        let u = uncertainty_map(&grid(seed, h, w), h, w, 2).unwrap();
        let params = PointLossParams { k, n, c, ..PointLossParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_points(&u, &params, &mut rng).unwrap();
        prop_assert_eq!(s.points.len(), k);
        prop_assert_eq!(s.top, params.top_count());
        prop_assert_eq!(s.points.len() + s.rejected.len(), n * k);
        let mut seen: Vec<(usize, usize)> = s.points.iter().chain(&s.rejected).map(|p| (p.row, p.col)).collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), n * k);
        let top_min = s.points[..s.top].iter().map(|p| p.uncertainty).fold(f64::INFINITY, f64::min);
        let rest_max = s.points[s.top..].iter().chain(&s.rejected).map(|p| p.uncertainty).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(top_min >= rest_max);
    }

    #[test]
    fn point_loss_gradient_matches_differences(seed in any::<u64>(), eps in 1usize..4, beta in 0.0f64..1.0) {
        let (h, w) = (6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.05..0.95)).collect();
        let gt: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen::<bool>())).collect();
        let params = PointLossParams { eps, k: 6, n: 2, c: 0.5, alpha: 0.7, beta, uncertainty_grad: true };
        let u = uncertainty_map(&p, h, w, eps).unwrap();
        let pts = sample_points(&u, &params, &mut rng).unwrap();
        let grad = point_loss_backward(&pts, &p, &u, &gt, &params, 1.0);
        let f = |q: &[f64]| point_loss(&pts, q, &uncertainty_map(q, h, w, eps).unwrap(), &gt, &params);
        let step = 1e-6;
        for i in 0..h * w {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += step;
            b[i] -= step;
            let fd = (f(&a) - f(&b)) / (2.0 * step);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            prop_assert!((grad[i] - fd).abs() / denom <= 1e-3, "pixel {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn refine_residual_commutes_with_shifts(seed in any::<u64>(), dy in -3i64..=3, dx in -3i64..=3) {
        let (h, w) = (20, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = RefineNet::<f64>::new(&RefineConfig { channels: 4, blocks: 1 }, &mut rng);
        for (_, t) in net.named_mut("") {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
        // zero border so the shifted content stays inside the grid
        let x: Vec<f64> = (0..REFINE_CHANNELS * h * w)
            .map(|i| {
                let (y, c) = ((i / w) % h, i % w);
                if (4..h - 4).contains(&y) && (4..w - 4).contains(&c) { rng.gen_range(-1.0..1.0) } else { 0.0 }
            })
            .collect();
        let mut xs = vec![0.0; x.len()];
        for ch in 0..REFINE_CHANNELS {
            for y in 0..h as i64 {
                for c in 0..w as i64 {
                    let (sy, sc) = (y - dy, c - dx);
                    if sy >= 0 && sc >= 0 && sy < h as i64 && sc < w as i64 {
                        xs[ch * h * w + (y * w as i64 + c) as usize] = x[ch * h * w + (sy * w as i64 + sc) as usize];
                    }
                }
            }
        }
        let (r, _) = net.residual(&x, h, w).unwrap();
        let (rs, _) = net.residual(&xs, h, w).unwrap();
        // three stacked 3x3 convolutions see three pixels of padding
        let border = 3i64;
        for y in border..h as i64 - border {
            for c in border..w as i64 - border {
                let (sy, sc) = (y + dy, c + dx);
                if sy >= border && sc >= border && sy < h as i64 - border && sc < w as i64 - border {
                    let a = r[(y * w as i64 + c) as usize];
                    let b = rs[(sy * w as i64 + sc) as usize];
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn iou_is_a_bounded_symmetric_ratio(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.gen::<f64>() < 0.4).collect();
        let a = Mask::from_fn(h, w, |r, c| bits[r * w + c]);
        let b = Mask::from_fn(h, w, |r, c| (r * 7 + c * 3 + seed as usize) % 5 < 2);
        let (inter, union) = (
            (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| a.get(r, c) && b.get(r, c)).count(),
            (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| a.get(r, c) || b.get(r, c)).count(),
        );
        match iou(&a, &b) {
            None => prop_assert_eq!(union, 0),
            Some(v) => {
                prop_assert_eq!(v, inter as f64 / union as f64);
                prop_assert_eq!(Some(v), iou(&b, &a));
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let none = Mask::new(h, w);
        prop_assert_eq!(occluded_iou(&a, &b, &none), if b.is_empty() { None } else { iou(&a, &b) });
    }

    #[test]
    fn binarize_matches_elementwise_comparison(seed in any::<u64>(), tau in 0.01f64..0.99) {
        let p = grid(seed, 9, 7);
        let m = binarize(&p, 9, 7, tau);
        for (i, &v) in p.iter().enumerate() {
            prop_assert_eq!(m.bits()[i] == 1, v > tau);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_stable(seed in any::<u64>(), row in 0usize..5) {
        let flags = AblationFlags::cumulative_rows()[row];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = PlugModel::<f32>::new_full(&ModelConfig::toy(), flags, &mut rng).unwrap();
        let a = checkpoint::to_bytes(&m, Some(flags), serde_json::json!({"seed": seed})).unwrap();
        let back = checkpoint::from_bytes::<f32>(&a).unwrap();
        let b = checkpoint::to_bytes(&back.model, back.header.flags, back.header.config.clone()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn constant_map_draws_are_uniform() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let (h, w) = (16, 16);
    let u = uncertainty_map(&vec![0.5f64; h * w], h, w, 3).unwrap();
    let mut counts = vec![0u32; h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    for _ in 0..draws {
        let s = sample_points_with(&u, 4, 4, 3, &mut rng).unwrap();
        for p in &s.points {
            counts[p.row * w + p.col] += 1;
        }
    }
    let expected = draws as f64 * 4.0 / (h * w) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((h * w - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
}
