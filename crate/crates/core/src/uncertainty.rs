//! Per-pixel uncertainty maps, uncertainty-guided point sampling and the
//! point loss, all in probability space.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Branch;
use crate::error::{PlugError, Result};
use crate::scalar::Scalar;

pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointLossParams {
    /// Neighborhood parameter; the window is `(2ε−1)×(2ε−1)`.
    pub eps: usize,
    /// Oversampling factor: `n·K` candidates are drawn.
    pub n: usize,
    /// Fraction of points taken by uncertainty rank.
    pub c: f64,
    /// Points per map; `0` disables the point loss.
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Back-propagate through the `β·u` term.
    pub uncertainty_grad: bool,
}

impl Default for PointLossParams {
    fn default() -> Self {
        Self {
            eps: 3,
            n: 4,
            c: 0.75,
            k: 256,
            alpha: 0.1,
            beta: 0.1,
            uncertainty_grad: true,
        }
    }
}

impl PointLossParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlugError::Config(m.to_string()));
        if self.eps < 1 {
            return bad("eps must be >= 1");
        }
        if self.n <= 1 {
            return bad("n must be > 1");
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return bad("c must lie in (0, 1)");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        Ok(())
    }

    pub fn candidates(&self) -> usize {
        self.n * self.k
    }

    pub fn top_count(&self) -> usize {
        ((self.c * self.k as f64) + 1e-9).floor() as usize
    }

    pub fn enabled(&self) -> bool {
        self.k > 0
    }
}

#[inline]
pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// `1` where clamping leaves `p` unchanged, `0` where it saturates.
#[inline]
pub fn clamp_gate<T: Scalar>(p: T) -> T {
    let lo = T::lit(PROB_CLAMP);
    if p >= lo && p <= T::one() - lo {
        T::one()
    } else {
        T::zero()
    }
}

/// Binary cross-entropy of a probability with itself (binary entropy).
#[inline]
pub fn bce_self<T: Scalar>(p: T) -> T {
    let p = clamp_prob(p);
    let q = T::one() - p;
    -(p * p.ln() + q * q.ln())
}

/// Derivative of [`bce_self`] on the clamped interval.
#[inline]
pub fn bce_self_grad<T: Scalar>(p: T) -> T {
    let g = clamp_gate(p);
    let p = clamp_prob(p);
    g * ((T::one() - p) / p).ln()
}

/// Cross-entropy of probability `p` against a binary label.
#[inline]
pub fn bce<T: Scalar>(p: T, gt: T) -> T {
    let p = clamp_prob(p);
    -(gt * p.ln() + (T::one() - gt) * (T::one() - p).ln())
}

#[inline]
pub fn bce_grad<T: Scalar>(p: T, gt: T) -> T {
    let g = clamp_gate(p);
    let p = clamp_prob(p);
    g * (-(gt / p) + (T::one() - gt) / (T::one() - p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap<T> {
    pub height: usize,
    pub width: usize,
    pub eps: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> UncertaintyMap<T> {
    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    /// 8-bit grayscale rendering scaled by `255 / ln 2`, clipped.
    pub fn to_gray(&self) -> Vec<u8> {
        let s = 255.0 / std::f64::consts::LN_2;
        self.values
            .iter()
            .map(|v| (v.as_f64() * s).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Sums `src` over the clipped `(2r+1)`-wide square window around each pixel.
fn box_sum<T: Scalar>(src: &[T], h: usize, w: usize, r: usize) -> Vec<T> {
    let mut rows = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = T::zero();
            for xx in a..=b {
                s += src[y * w + xx];
            }
            rows[y * w + x] = s;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let (a, b) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let mut s = T::zero();
            for yy in a..=b {
                s += rows[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn window_count(h: usize, w: usize, r: usize, y: usize, x: usize) -> usize {
    let ny = (y + r).min(h - 1) - y.saturating_sub(r) + 1;
    let nx = (x + r).min(w - 1) - x.saturating_sub(r) + 1;
    ny * nx
}

fn check_grid(len: usize, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || len != h * w {
        return Err(PlugError::ShapeMismatch(format!(
            "grid of {len} values does not match {h}x{w}"
        )));
    }
    Ok(())
}

/// Mean binary entropy over the `(2ε−1)×(2ε−1)` window around each pixel;
/// windows crossing the border average over their in-bounds pixels.
pub fn uncertainty_map<T: Scalar>(p: &[T], h: usize, w: usize, eps: usize) -> Result<UncertaintyMap<T>> {
    check_grid(p.len(), h, w)?;
    if eps < 1 {
        return Err(PlugError::InvalidArgument("eps must be >= 1".into()));
    }
    let r = eps - 1;
    if r == 0 {
        let values = p.iter().map(|&v| bce_self(v)).collect();
        return Ok(UncertaintyMap {
            height: h,
            width: w,
            eps,
            values,
        });
    }
    // Sums run on entropies relative to the first pixel so that a constant
    // map comes out exactly constant regardless of window size.
    let shift = bce_self(p[0]);
    let ce: Vec<T> = p.iter().map(|&v| bce_self(v) - shift).collect();
    let sums = box_sum(&ce, h, w, r);
    let values = sums
        .iter()
        .enumerate()
        .map(|(i, &s)| shift + s / T::lit(window_count(h, w, r, i / w, i % w) as f64))
        .collect();
    Ok(UncertaintyMap {
        height: h,
        width: w,
        eps,
        values,
    })
}

/// Pulls a gradient on the uncertainty map back to the probabilities.
pub fn uncertainty_backward<T: Scalar>(p: &[T], h: usize, w: usize, eps: usize, du: &[T]) -> Vec<T> {
    let r = eps - 1;
    let scaled: Vec<T> = du
        .iter()
        .enumerate()
        .map(|(i, &g)| g / T::lit(window_count(h, w, r, i / w, i % w) as f64))
        .collect();
    let spread = box_sum(&scaled, h, w, r);
    spread
        .iter()
        .zip(p)
        .map(|(&s, &pv)| s * bce_self_grad(pv))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledPoint {
    pub row: usize,
    pub col: usize,
    pub uncertainty: f64,
}

/// `K` distinct sampled coordinates; the first `top` were selected by rank.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<SampledPoint>,
    pub top: usize,
    /// Candidates not kept (for diagnostics and tests).
    pub rejected: Vec<SampledPoint>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Draws `n·K` distinct candidates, keeps the `cK` most uncertain and fills
/// up to `K` with a uniform draw from the rest. Equal uncertainties keep
/// their draw order, so a constant map yields a uniform sample.
pub fn sample_points<T: Scalar, R: Rng + ?Sized>(
    u: &UncertaintyMap<T>,
    params: &PointLossParams,
    rng: &mut R,
) -> Result<PointSet> {
    sample_points_with(u, params.k, params.n, params.top_count(), rng)
}

pub fn sample_points_with<T: Scalar, R: Rng + ?Sized>(
    u: &UncertaintyMap<T>,
    k: usize,
    n: usize,
    top: usize,
    rng: &mut R,
) -> Result<PointSet> {
    let hw = u.height * u.width;
    let total = n * k;
    if total > hw {
        return Err(PlugError::InvalidArgument(format!(
            "{total} candidates exceed the {hw} pixels of the map"
        )));
    }
    if top > k {
        return Err(PlugError::InvalidArgument("top count exceeds K".into()));
    }
    let point = |i: usize| SampledPoint {
        row: i / u.width,
        col: i % u.width,
        uncertainty: u.values[i].as_f64(),
    };
    let mut cand: Vec<SampledPoint> = index::sample(rng, hw, total).into_iter().map(point).collect();
    cand.sort_by(|a, b| b.uncertainty.total_cmp(&a.uncertainty));
    let rest = cand.split_off(top);
    let mut points = cand;
    let fill = k - top;
    let picked = index::sample(rng, rest.len(), fill).into_vec();
    let mut taken = vec![false; rest.len()];
    for &i in &picked {
        taken[i] = true;
        points.push(rest[i]);
    }
    let rejected = rest
        .into_iter()
        .zip(taken)
        .filter(|(_, t)| !t)
        .map(|(p, _)| p)
        .collect();
    Ok(PointSet { points, top, rejected })
}

/// Source of point sets for the point loss, one call per predicted map.
pub trait PointSampler<T: Scalar> {
    fn sample(&mut self, branch: Branch, u: &UncertaintyMap<T>, params: &PointLossParams) -> Result<PointSet>;
}

impl<T: Scalar, R: Rng> PointSampler<T> for R {
    fn sample(&mut self, _branch: Branch, u: &UncertaintyMap<T>, params: &PointLossParams) -> Result<PointSet> {
        sample_points(u, params, self)
    }
}

/// Samples each branch's points once and replays them on later calls.
#[derive(Clone, Debug)]
pub struct PointCache<R> {
    pub rng: R,
    pub inmodal: Option<PointSet>,
    pub amodal: Option<PointSet>,
}

impl<R> PointCache<R> {
    pub fn new(rng: R) -> Self {
        Self {
            rng,
            inmodal: None,
            amodal: None,
        }
    }
}

impl<T: Scalar, R: Rng> PointSampler<T> for PointCache<R> {
    fn sample(&mut self, branch: Branch, u: &UncertaintyMap<T>, params: &PointLossParams) -> Result<PointSet> {
        let slot = match branch {
            Branch::Inmodal => &mut self.inmodal,
            Branch::Amodal => &mut self.amodal,
        };
        if slot.is_none() {
            *slot = Some(sample_points(u, params, &mut self.rng)?);
        }
        Ok(slot.clone().expect("slot filled above"))
    }
}

/// Mean over points of `α·l_e + β·u`, with `l_e` the cross-entropy against
/// `gt` and `u` read from the map of the same prediction.
pub fn point_loss<T: Scalar>(
    points: &PointSet,
    p: &[T],
    u: &UncertaintyMap<T>,
    gt: &[T],
    params: &PointLossParams,
) -> T {
    if points.is_empty() {
        return T::zero();
    }
    let (a, b) = (T::lit(params.alpha), T::lit(params.beta));
    let mut s = T::zero();
    for pt in &points.points {
        let i = pt.row * u.width + pt.col;
        s += a * bce(p[i], gt[i]) + b * u.values[i];
    }
    s / T::lit(points.len() as f64)
}

/// Per-point `α·l_e + β·u` values.
pub fn point_terms<T: Scalar>(
    points: &PointSet,
    p: &[T],
    u: &UncertaintyMap<T>,
    gt: &[T],
    params: &PointLossParams,
) -> Vec<T> {
    let (a, b) = (T::lit(params.alpha), T::lit(params.beta));
    points
        .points
        .iter()
        .map(|pt| {
            let i = pt.row * u.width + pt.col;
            a * bce(p[i], gt[i]) + b * u.values[i]
        })
        .collect()
}

/// Gradient of [`point_loss`] with respect to the probabilities, scaled by
/// `scale`. The `β·u` path is included when `params.uncertainty_grad`.
pub fn point_loss_backward<T: Scalar>(
    points: &PointSet,
    p: &[T],
    u: &UncertaintyMap<T>,
    gt: &[T],
    params: &PointLossParams,
    scale: T,
) -> Vec<T> {
    let (h, w) = (u.height, u.width);
    let mut dp = vec![T::zero(); h * w];
    if points.is_empty() {
        return dp;
    }
    let s = scale / T::lit(points.len() as f64);
    let a = T::lit(params.alpha) * s;
    let mut du = vec![T::zero(); h * w];
    for pt in &points.points {
        let i = pt.row * w + pt.col;
        dp[i] += a * bce_grad(p[i], gt[i]);
        du[i] += T::lit(params.beta) * s;
    }
    if params.uncertainty_grad && params.beta != 0.0 {
        let back = uncertainty_backward(p, h, w, u.eps, &du);
        for (d, b) in dp.iter_mut().zip(back) {
            *d += b;
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn brute(p: &[f64], h: usize, w: usize, eps: usize) -> Vec<f64> {
        let e = eps as i64;
        let mut out = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in 0..h as i64 {
                    for xx in 0..w as i64 {
                        if (yy - y).abs() < e && (xx - x).abs() < e {
                            let q = p[(yy as usize) * w + xx as usize];
                            s += -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
                            n += 1.0;
                        }
                    }
                }
                out[y as usize * w + x as usize] = s / n;
            }
        }
        out
    }

    #[test]
    fn bce_self_examples() {
        assert!((bce_self(0.5f64) - LN_2).abs() < 1e-15);
        assert!((bce_self(0.8f64) - 0.500402).abs() < 5e-7);
        let q: f64 = 1e-6;
        let direct = -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
        assert_eq!(bce_self(q), direct);
        assert!((direct - 1.48e-5).abs() < 1e-7);
        assert_eq!(bce_self(0.0f64), direct);
    }

    #[test]
    fn constant_half_is_ln2_everywhere() {
        let u = uncertainty_map(&vec![0.5f64; 64 * 64], 64, 64, 3).unwrap();
        assert!(u.values.iter().all(|v| (v - LN_2).abs() < 1e-15));
    }

    #[test]
    fn eps_one_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..49).map(|_| rng.gen_range(0.0..1.0)).collect();
        let u = uncertainty_map(&p, 7, 7, 1).unwrap();
        for (a, b) in u.values.iter().zip(&p) {
            assert_eq!(*a, bce_self(*b));
        }
    }

    #[test]
    fn random_5x5_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..25).map(|_| rng.gen_range(0.01..0.99)).collect();
        let u = uncertainty_map(&p, 5, 5, 2).unwrap();
        for (a, b) in u.values.iter().zip(brute(&p, 5, 5, 2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_constants_split_candidates() {
        let p = PointLossParams::default();
        assert_eq!(p.candidates(), 1024);
        assert_eq!(p.top_count(), 192);
        assert_eq!(p.k - p.top_count(), 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = uncertainty_map(&vec![0.3f64; 4096], 64, 64, 3).unwrap();
        let s = sample_points(&u, &p, &mut rng).unwrap();
        assert_eq!(s.len(), 256);
        assert_eq!(s.top, 192);
        assert_eq!(s.rejected.len(), 1024 - 256);
    }

    #[test]
    fn full_top_fraction_is_pure_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let u = UncertaintyMap { height: 16, width: 16, eps: 1, values: vals };
        let s = sample_points_with(&u, 16, 4, 16, &mut rng).unwrap();
        let mut cand: Vec<f64> = s.points.iter().chain(&s.rejected).map(|p| p.uncertainty).collect();
        cand.sort_by(|a, b| b.total_cmp(a));
        let got: Vec<f64> = s.points.iter().map(|p| p.uncertainty).collect();
        assert_eq!(got, cand[..16].to_vec());
    }

    #[test]
    fn too_many_candidates_is_an_error() {
        let u = uncertainty_map(&vec![0.5f64; 64], 8, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_points_with(&u, 20, 4, 10, &mut rng).is_err());
    }

    #[test]
    fn point_loss_examples() {
        let u = uncertainty_map(&[0.5f64], 1, 1, 1).unwrap();
        let pts = PointSet {
            points: vec![SampledPoint { row: 0, col: 0, uncertainty: LN_2 }],
            top: 1,
            rejected: vec![],
        };
        let params = PointLossParams { eps: 1, ..Default::default() };
        let l = point_loss(&pts, &[0.5], &u, &[1.0], &params);
        assert!((l - 0.138629).abs() < 5e-7);
        let zero = PointLossParams { alpha: 0.0, beta: 0.0, ..params.clone() };
        assert_eq!(point_loss(&pts, &[0.5], &u, &[1.0], &zero), 0.0);

        let q = 1.0 - 1e-6;
        let u1 = uncertainty_map(&[q], 1, 1, 1).unwrap();
        let l = point_loss(&pts, &[q], &u1, &[1.0], &params);
        let floor = bce_self(1e-6f64);
        assert!(l <= 0.1 * floor + 0.1 * floor + 1e-18);
        let direct = 0.1 * -(q.ln()) + 0.1 * floor;
        assert!((l - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn gray_export_scales_ln2_to_white() {
        let u = uncertainty_map(&[0.5f64, 1e-6], 1, 2, 1).unwrap();
        assert_eq!(u.to_gray(), vec![255, 0]);
    }
}
