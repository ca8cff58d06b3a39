//! Binarization, IoU and the evaluation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{PlugError, Result};
use crate::model::PlugModel;
use crate::nn::sigmoid;
use crate::scalar::Scalar;
use crate::syndata::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSpace {
    /// Threshold applied to `σ(logit)`.
    #[default]
    Prob,
    /// Threshold applied to raw logits.
    Logit,
}

/// Foreground where `p > tau` strictly.
pub fn binarize<T: Scalar>(p: &[T], h: usize, w: usize, tau: f64) -> Mask {
    assert_eq!(p.len(), h * w);
    let t = T::lit(tau);
    Mask::from_fn(h, w, |r, c| p[r * w + c] > t)
}

pub fn binarize_logits<T: Scalar>(logits: &[T], h: usize, w: usize, tau: f64, space: ThresholdSpace) -> Mask {
    match space {
        ThresholdSpace::Prob => {
            let p: Vec<T> = logits.iter().map(|&x| sigmoid(x)).collect();
            binarize(&p, h, w, tau)
        }
        ThresholdSpace::Logit => binarize(logits, h, w, tau),
    }
}

/// `|a ∧ b| / |a ∨ b|`, or `None` when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Option<f64> {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()));
    let union = a.or(b).count();
    if union == 0 {
        return None;
    }
    Some(a.and(b).count() as f64 / union as f64)
}

/// IoU on the occluded region `¬visible`, for objects whose gt occluded region is non-empty.
pub fn occluded_iou(pred: &Mask, amodal: &Mask, visible: &Mask) -> Option<f64> {
    let gt = amodal.and_not(visible);
    if gt.is_empty() {
        return None;
    }
    iou(&pred.and_not(visible), &gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub index: usize,
    pub iou_full: f64,
    pub iou_occ: Option<f64>,
    pub occlusion_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou_full: f64,
    pub miou_occ: f64,
    pub n_objects: usize,
    pub n_skipped_occ: usize,
    pub per_object: Vec<ObjectMetrics>,
}

impl MetricsReport {
    pub fn from_rows(per_object: Vec<ObjectMetrics>) -> Result<Self> {
        if per_object.is_empty() {
            return Err(PlugError::InvalidArgument("no objects to evaluate".into()));
        }
        let n = per_object.len();
        let miou_full = per_object.iter().map(|o| o.iou_full).sum::<f64>() / n as f64;
        let occ: Vec<f64> = per_object.iter().filter_map(|o| o.iou_occ).collect();
        let miou_occ = if occ.is_empty() {
            0.0
        } else {
            occ.iter().sum::<f64>() / occ.len() as f64
        };
        Ok(Self {
            miou_full,
            miou_occ,
            n_objects: n,
            n_skipped_occ: n - occ.len(),
            per_object,
        })
    }
}

/// Scores a predicted amodal mask against one object's ground truth.
pub fn score_object(index: usize, pred: &Mask, amodal: &Mask, visible: &Mask, occlusion_ratio: f64) -> ObjectMetrics {
    ObjectMetrics {
        index,
        iou_full: iou(pred, amodal).unwrap_or(1.0),
        iou_occ: occluded_iou(pred, amodal, visible),
        occlusion_ratio,
    }
}

/// Which box prompts the model during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Visible,
    Amodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    pub threshold_space: ThresholdSpace,
    pub eps: usize,
    pub prompt: PromptSource,
}

/// Refined amodal predictions on every sample, scored in crop space.
pub fn evaluate<T: Scalar>(model: &PlugModel<T>, samples: &[Sample], opts: &EvalOptions) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(PlugError::InvalidArgument("empty evaluation split".into()));
    }
    let rows: Result<Vec<ObjectMetrics>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let image: Vec<T> = s.image.iter().map(|&x| T::lit(f64::from(x))).collect();
            let prompt = match opts.prompt {
                PromptSource::Visible => s.visible_box,
                PromptSource::Amodal => s.amodal_box,
            };
            let pred = model.forward(&image, prompt, opts.eps)?;
            let mask = binarize_logits(&pred.refined, s.size, s.size, opts.threshold, opts.threshold_space);
            Ok(score_object(i, &mask, &s.amodal, &s.visible, s.occlusion_ratio))
        })
        .collect();
    MetricsReport::from_rows(rows?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_is_strict() {
        let m = binarize(&[0.3f64, 0.31, 0.2, 1.0], 2, 2, 0.3);
        assert_eq!(m.bits(), &[0, 1, 0, 1]);
        assert_eq!(binarize(&[0.31f32; 16], 4, 4, 0.3).count(), 16);
    }

    #[test]
    fn iou_examples() {
        let a = Mask::from_fn(4, 4, |r, c| r < 2 && c < 3);
        let b = Mask::from_fn(4, 4, |r, c| r < 2 && c < 2 && !(r == 1 && c == 1) || (r == 3 && c == 3));
        assert_eq!(a.count(), 6);
        assert_eq!(b.count(), 4);
        assert_eq!(a.and(&b).count(), 3);
        assert!((iou(&a, &b).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), Some(1.0));
        assert_eq!(iou(&a, &Mask::from_fn(4, 4, |r, _| r == 3)), Some(0.0));
        assert_eq!(iou(&Mask::new(4, 4), &Mask::new(4, 4)), None);
    }

    #[test]
    fn visible_only_prediction_scores_zero_occluded() {
        let amodal = Mask::from_fn(8, 8, |r, c| r < 6 && c < 6);
        let visible = Mask::from_fn(8, 8, |r, c| r < 6 && c < 3);
        let o = score_object(0, &visible, &amodal, &visible, 0.5);
        assert_eq!(o.iou_occ, Some(0.0));
        let perfect = score_object(0, &amodal, &amodal, &visible, 0.5);
        assert_eq!((perfect.iou_full, perfect.iou_occ), (1.0, Some(1.0)));
    }
}
