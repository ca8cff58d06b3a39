//! Segmentation losses on logits with gradients back to the logits.

use rand::Rng;

use crate::error::Result;
use crate::nn::sigmoid;
use crate::scalar::Scalar;
use crate::encoder::Branch;
use crate::uncertainty::{
    bce, clamp_gate, point_loss, point_loss_backward, uncertainty_map, PointLossParams, PointSampler, PointSet,
    UncertaintyMap,
};

/// Mean binary cross-entropy of `σ(m)` against `gt` and its logit gradient.
pub fn mean_bce<T: Scalar>(m: &[T], gt: &[T]) -> (T, Vec<T>) {
    let n = T::lit(m.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(m.len());
    for (&x, &g) in m.iter().zip(gt) {
        let p = sigmoid(x);
        loss += bce(p, g);
        grad.push(clamp_gate(p) * (p - g) / n);
    }
    (loss / n, grad)
}

/// Chains a probability-space gradient through the sigmoid.
pub fn prob_to_logit_grad<T: Scalar>(m: &[T], dp: &[T]) -> Vec<T> {
    m.iter()
        .zip(dp)
        .map(|(&x, &d)| {
            let p = sigmoid(x);
            d * p * (T::one() - p)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BranchLoss<T> {
    pub bce: T,
    pub point: T,
    pub total: T,
    pub points: Option<PointSet>,
    pub uncertainty: Option<UncertaintyMap<T>>,
}

/// `L_b + L_p` on one coarse logit map and its gradient with respect to the
/// logits. `params.k == 0` disables the point term.
pub fn branch_loss<T: Scalar, R: Rng>(
    m: &[T],
    gt: &[T],
    h: usize,
    w: usize,
    params: &PointLossParams,
    rng: &mut R,
) -> Result<(BranchLoss<T>, Vec<T>)> {
    branch_loss_with(m, gt, h, w, params, Branch::Amodal, rng)
}

/// As [`branch_loss`], drawing points from `sampler` for the given branch.
pub fn branch_loss_with<T: Scalar, S: PointSampler<T> + ?Sized>(
    m: &[T],
    gt: &[T],
    h: usize,
    w: usize,
    params: &PointLossParams,
    branch: Branch,
    sampler: &mut S,
) -> Result<(BranchLoss<T>, Vec<T>)> {
    let (lb, mut dm) = mean_bce(m, gt);
    if !params.enabled() {
        return Ok((
            BranchLoss {
                bce: lb,
                point: T::zero(),
                total: lb,
                points: None,
                uncertainty: None,
            },
            dm,
        ));
    }
    let p: Vec<T> = m.iter().map(|&x| sigmoid(x)).collect();
    let u = uncertainty_map(&p, h, w, params.eps)?;
    let pts = sampler.sample(branch, &u, params)?;
    let lp = point_loss(&pts, &p, &u, gt, params);
    let dp = point_loss_backward(&pts, &p, &u, gt, params, T::one());
    for (d, e) in dm.iter_mut().zip(prob_to_logit_grad(m, &dp)) {
        *d += e;
    }
    Ok((
        BranchLoss {
            bce: lb,
            point: lp,
            total: lb + lp,
            points: Some(pts),
            uncertainty: Some(u),
        },
        dm,
    ))
}
