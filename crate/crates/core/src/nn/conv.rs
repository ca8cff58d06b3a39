use rand::Rng;

use crate::impl_params;
use crate::scalar::Scalar;
use crate::tensor::{mm, mm_acc, mm_nt, mm_tn_acc, Tensor};

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl_params!(Conv3x3 { w => "w", b => "b" });

impl<T: Scalar> Conv3x3<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let fan_in = (cin * 9) as f64;
        Self {
            w: Tensor::randn(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), rng),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn cin(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.w.shape()[0]
    }

    /// Returns the output map and the unfolded input used by `backward`.
    pub fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
        let cin = self.cin();
        let cout = self.cout();
        assert_eq!(x.len(), cin * h * w);
        let col = im2col(x, cin, h, w);
        let mut y = mm(self.w.data(), cout, cin * 9, &col, h * w);
        for (co, row) in y.chunks_exact_mut(h * w).enumerate() {
            let b = self.b.data()[co];
            row.iter_mut().for_each(|v| *v += b);
        }
        (y, col)
    }

    pub fn backward(
        &self,
        col: &[T],
        dy: &[T],
        h: usize,
        w: usize,
        grad: Option<&mut Conv3x3<T>>,
    ) -> Vec<T> {
        let cin = self.cin();
        let cout = self.cout();
        let hw = h * w;
        if let Some(g) = grad {
            // dW += dY · colᵀ
            let mut dw = mm_nt(dy, cout, hw, col, cin * 9);
            crate::tensor::add_into(g.w.data_mut(), &dw);
            dw.clear();
            for (co, row) in dy.chunks_exact(hw).enumerate() {
                g.b.data_mut()[co] += row.iter().copied().sum::<T>();
            }
        }
        let mut dcol = vec![T::zero(); cin * 9 * hw];
        mm_tn_acc(self.w.data(), cout, cin * 9, dy, hw, &mut dcol);
        col2im(&dcol, cin, h, w)
    }
}

/// Output columns `[lo, hi)` whose source column `x + kx - 1` is in bounds.
fn valid_cols(kx: usize, w: usize) -> (usize, usize) {
    (1usize.saturating_sub(kx), (w + 1 - kx).min(w))
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                let (lo, hi) = valid_cols(kx, w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        continue;
                    }
                    let s0 = sy as usize * w + lo + kx - 1;
                    row[y * w + lo..y * w + hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                let (lo, hi) = valid_cols(kx, w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        continue;
                    }
                    let d0 = sy as usize * w + lo + kx - 1;
                    for (d, &v) in dst[d0..d0 + hi - lo].iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

/// Pointwise channel mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl_params!(Conv1x1 { w => "w", b => "b" });

impl<T: Scalar> Conv1x1<T> {
    pub fn zeroed(cin: usize, cout: usize) -> Self {
        Self {
            w: Tensor::zeros(&[cout, cin]),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn forward(&self, x: &[T], hw: usize) -> Vec<T> {
        let (cout, cin) = (self.w.shape()[0], self.w.shape()[1]);
        let mut y = mm(self.w.data(), cout, cin, x, hw);
        for (co, row) in y.chunks_exact_mut(hw).enumerate() {
            let b = self.b.data()[co];
            row.iter_mut().for_each(|v| *v += b);
        }
        y
    }

    pub fn backward(&self, x: &[T], dy: &[T], hw: usize, grad: Option<&mut Conv1x1<T>>) -> Vec<T> {
        let (cout, cin) = (self.w.shape()[0], self.w.shape()[1]);
        if let Some(g) = grad {
            let dw = mm_nt(dy, cout, hw, x, cin);
            crate::tensor::add_into(g.w.data_mut(), &dw);
            for (co, row) in dy.chunks_exact(hw).enumerate() {
                g.b.data_mut()[co] += row.iter().copied().sum::<T>();
            }
        }
        let mut dx = vec![T::zero(); cin * hw];
        mm_tn_acc(self.w.data(), cout, cin, dy, hw, &mut dx);
        dx
    }
}

/// 2×2 transposed convolution with stride 2 (exact 2× upsampling).
///
/// Weights are stored `[cin, cout, 2, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TConv2x2<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl_params!(TConv2x2 { w => "w", b => "b" });

impl<T: Scalar> TConv2x2<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[cin, cout, 2, 2], (2.0 / cin as f64).sqrt(), rng),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn cin(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn cout(&self) -> usize {
        self.w.shape()[1]
    }

    /// `x` is `cin × (h·w)`; output is `cout × (2h·2w)`.
    pub fn forward(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let (cin, cout) = (self.cin(), self.cout());
        let hw = h * w;
        let c4 = cout * 4;
        // Y' = Xᵀ · Wmat : hw × (cout·4)
        let mut yp = vec![T::zero(); hw * c4];
        mm_tn_acc(x, cin, hw, self.w.data(), c4, &mut yp);
        let ow = 2 * w;
        let mut y = vec![T::zero(); cout * 4 * hw];
        for i in 0..h {
            for j in 0..w {
                let src = &yp[(i * w + j) * c4..(i * w + j + 1) * c4];
                for co in 0..cout {
                    let b = self.b.data()[co];
                    for a in 0..2 {
                        for bb in 0..2 {
                            y[co * 4 * hw + (2 * i + a) * ow + 2 * j + bb] = src[co * 4 + a * 2 + bb] + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &[T], dy: &[T], h: usize, w: usize, grad: Option<&mut TConv2x2<T>>) -> Vec<T> {
        let (cin, cout) = (self.cin(), self.cout());
        let hw = h * w;
        let c4 = cout * 4;
        let ow = 2 * w;
        let mut dyp = vec![T::zero(); hw * c4];
        for i in 0..h {
            for j in 0..w {
                let dst = &mut dyp[(i * w + j) * c4..(i * w + j + 1) * c4];
                for co in 0..cout {
                    for a in 0..2 {
                        for bb in 0..2 {
                            dst[co * 4 + a * 2 + bb] = dy[co * 4 * hw + (2 * i + a) * ow + 2 * j + bb];
                        }
                    }
                }
            }
        }
        if let Some(g) = grad {
            mm_acc(x, cin, hw, &dyp, c4, g.w.data_mut());
            for co in 0..cout {
                g.b.data_mut()[co] += dy[co * 4 * hw..(co + 1) * 4 * hw].iter().copied().sum::<T>();
            }
        }
        mm_nt(self.w.data(), cin, c4, &dyp, hw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, h: usize, wd: usize) -> Vec<f64> {
        let mut y = vec![0.0; cout * h * wd];
        for co in 0..cout {
            for yy in 0..h {
                for xx in 0..wd {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    s += w[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x[ci * h * wd + sy as usize * wd + sx as usize];
                                }
                            }
                        }
                    }
                    y[co * h * wd + yy * wd + xx] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3x3::<f64>::new(2, 3, &mut rng);
        conv.b = Tensor::randn(&[3], 1.0, &mut rng);
        let x: Tensor<f64> = Tensor::randn(&[2, 5, 6], 1.0, &mut rng);
        let (y, _) = conv.forward(x.data(), 5, 6);
        let expect = direct_conv(x.data(), conv.w.data(), conv.b.data(), 2, 3, 5, 6);
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_places_each_input_in_its_2x2_cell() {
        let mut conv = TConv2x2::<f64> {
            w: Tensor::zeros(&[1, 1, 2, 2]),
            b: Tensor::zeros(&[1]),
        };
        conv.w.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let y = conv.forward(&[1.0, 10.0], 1, 2);
        assert_eq!(y, vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
    }
}
