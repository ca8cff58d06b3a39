use rand::Rng;

use crate::impl_params;
use crate::scalar::Scalar;
use crate::tensor::{mm, mm_nt, mm_tn_acc, Tensor};

/// Low-rank update pair inducing `ΔW = B·A` on a frozen projection.
///
/// `A` is `[r, in]`, `B` is `[out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl_params!(LoraPair { a => "A", b => "B" });

/// Intermediate `x·Aᵀ` kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LoraCache<T> {
    pub xa: Vec<T>,
}

impl<T: Scalar> LoraPair<T> {
    /// `A ~ N(0, 1/r)`, `B = 0`.
    pub fn new<R: Rng + ?Sized>(dim_in: usize, dim_out: usize, rank: usize, rng: &mut R) -> Self {
        Self {
            a: Tensor::randn(&[rank, dim_in], (1.0 / rank as f64).sqrt(), rng),
            b: Tensor::zeros(&[dim_out, rank]),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn dim_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn dim_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// Rows of `x` mapped through `B·A`: returns `x·Aᵀ·Bᵀ`.
    pub fn delta(&self, x: &[T], n: usize) -> (Vec<T>, LoraCache<T>) {
        let r = self.rank();
        let xa = mm_nt(x, n, self.dim_in(), self.a.data(), r);
        let d = mm_nt(&xa, n, r, self.b.data(), self.dim_out());
        (d, LoraCache { xa })
    }

    /// Returns the contribution to `dx`; accumulates into `grad` when given.
    pub fn backward(
        &self,
        x: &[T],
        cache: &LoraCache<T>,
        dy: &[T],
        n: usize,
        grad: Option<&mut LoraPair<T>>,
    ) -> Vec<T> {
        let (r, din, dout) = (self.rank(), self.dim_in(), self.dim_out());
        let dxa = mm(dy, n, dout, self.b.data(), r);
        if let Some(g) = grad {
            mm_tn_acc(dy, n, dout, &cache.xa, r, g.b.data_mut());
            mm_tn_acc(&dxa, n, r, x, din, g.a.data_mut());
        }
        mm(&dxa, n, r, self.a.data(), din)
    }

    /// Materialized `B·A` as `[out, in]`.
    pub fn product(&self) -> Vec<T> {
        mm(self.b.data(), self.dim_out(), self.rank(), self.a.data(), self.dim_in())
    }
}
