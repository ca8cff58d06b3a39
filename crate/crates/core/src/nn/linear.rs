use rand::Rng;

use crate::impl_params;
use crate::scalar::Scalar;
use crate::tensor::{mm, mm_nt, mm_tn_acc, Tensor};

/// `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl_params!(Linear { w => "w", b => "b" });

impl<T: Scalar> Linear<T> {
    /// Weights ~ N(0, 1/in), zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[output, input], (1.0 / input as f64).sqrt(), rng),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn zeroed(input: usize, output: usize) -> Self {
        Self {
            w: Tensor::zeros(&[output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let (din, dout) = (self.in_dim(), self.out_dim());
        let mut y = mm_nt(x, n, din, self.w.data(), dout);
        let b = self.b.data();
        for row in y.chunks_exact_mut(dout) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        y
    }

    /// Returns `dx`; accumulates parameter gradients into `grad` when given.
    pub fn backward(&self, x: &[T], dy: &[T], n: usize, grad: Option<&mut Linear<T>>) -> Vec<T> {
        let (din, dout) = (self.in_dim(), self.out_dim());
        if let Some(g) = grad {
            g.accumulate(x, dy, n);
        }
        mm(dy, n, dout, self.w.data(), din)
    }

    pub(crate) fn accumulate(&mut self, x: &[T], dy: &[T], n: usize) {
        let (din, dout) = (self.in_dim(), self.out_dim());
        mm_tn_acc(dy, n, dout, x, din, self.w.data_mut());
        let db = self.b.data_mut();
        for row in dy.chunks_exact(dout) {
            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
        }
    }
}
