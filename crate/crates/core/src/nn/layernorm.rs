use crate::impl_params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub g: Tensor<T>,
    pub b: Tensor<T>,
}

impl_params!(LayerNorm { g => "g", b => "b" });

#[derive(Clone, Debug)]
pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            g: Tensor::filled(&[dim], T::one()),
            b: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.numel()
    }

    pub fn forward(&self, x: &[T], n: usize) -> (Vec<T>, LnCache<T>) {
        let d = self.dim();
        let dn = T::lit(d as f64);
        let mut y = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let (g, b) = (self.g.data(), self.b.data());
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::lit(EPS)).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[i * d + j] = xh;
                y[i * d + j] = xh * g[j] + b[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &[T], grad: Option<&mut LayerNorm<T>>) -> Vec<T> {
        let d = self.dim();
        let n = cache.rstd.len();
        let dn = T::lit(d as f64);
        let g = self.g.data();
        if let Some(gr) = grad {
            let (gg, gb) = (gr.g.data_mut(), gr.b.data_mut());
            for i in 0..n {
                for j in 0..d {
                    gg[j] += dy[i * d + j] * cache.xhat[i * d + j];
                    gb[j] += dy[i * d + j];
                }
            }
        }
        let mut dx = vec![T::zero(); n * d];
        for i in 0..n {
            let xh = &cache.xhat[i * d..(i + 1) * d];
            let dyr = &dy[i * d..(i + 1) * d];
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..d {
                let dxh = dyr[j] * g[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= dn;
            mean_dxh_xh /= dn;
            for j in 0..d {
                let dxh = dyr[j] * g[j];
                dx[i * d + j] = cache.rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}
