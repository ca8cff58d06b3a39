use rand::Rng;

use crate::nn::{Linear, LoraCache, LoraPair, Params};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor, View};

/// Multi-head scaled dot-product attention with separate query, key and
/// value inputs. Query and value projections optionally carry a low-rank
/// adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Params<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (name, lin) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)] {
            out.push((crate::nn::join(prefix, &format!("w{name}")), &lin.w));
            out.push((crate::nn::join(prefix, &format!("b{name}")), &lin.b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (name, lin) in [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ] {
            out.push((crate::nn::join(prefix, &format!("w{name}")), &mut lin.w));
            out.push((crate::nn::join(prefix, &format!("b{name}")), &mut lin.b));
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    nq: usize,
    nk: usize,
    xq: Vec<T>,
    xk: Vec<T>,
    xv: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    mixed: Vec<T>,
    lora_q: Option<LoraCache<T>>,
    lora_v: Option<LoraCache<T>>,
}

/// Adapters applied to the query and value projections.
pub type QvAdapters<'a, T> = Option<(&'a LoraPair<T>, &'a LoraPair<T>)>;

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.out_dim()
    }

    pub fn forward(
        &self,
        xq: &[T],
        nq: usize,
        xk: &[T],
        xv: &[T],
        nk: usize,
        adapters: QvAdapters<'_, T>,
    ) -> (Vec<T>, AttnCache<T>) {
        let d = self.dim();
        let h = self.heads;
        let dh = d / h;
        let scale = T::one() / T::lit(dh as f64).sqrt();

        let mut q = self.q.forward(xq, nq);
        let k = self.k.forward(xk, nk);
        let mut v = self.v.forward(xv, nk);
        let (mut lora_q, mut lora_v) = (None, None);
        if let Some((aq, av)) = adapters {
            let (dq, cq) = aq.delta(xq, nq);
            crate::tensor::add_into(&mut q, &dq);
            lora_q = Some(cq);
            let (dv, cv) = av.delta(xv, nk);
            crate::tensor::add_into(&mut v, &dv);
            lora_v = Some(cv);
        }

        let mut probs = vec![T::zero(); h * nq * nk];
        let mut mixed = vec![T::zero(); nq * d];
        for head in 0..h {
            let off = head * dh;
            let p = &mut probs[head * nq * nk..(head + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                scale,
                &q,
                View::rm(d).at(off),
                &k,
                View::tr(d).at(off),
                T::zero(),
                p,
                View::rm(nk),
            );
            for row in p.chunks_exact_mut(nk) {
                softmax_in_place(row);
            }
            gemm(
                nq,
                nk,
                dh,
                T::one(),
                p,
                View::rm(nk),
                &v,
                View::rm(d).at(off),
                T::zero(),
                &mut mixed,
                View::rm(d).at(off),
            );
        }
        let out = self.o.forward(&mixed, nq);
        let cache = AttnCache {
            nq,
            nk,
            xq: xq.to_vec(),
            xk: xk.to_vec(),
            xv: xv.to_vec(),
            q,
            k,
            v,
            probs,
            mixed,
            lora_q,
            lora_v,
        };
        (out, cache)
    }

    /// Returns `(dxq, dxk, dxv)`.
    pub fn backward(
        &self,
        cache: &AttnCache<T>,
        dout: &[T],
        grad: Option<&mut Attention<T>>,
        adapters: QvAdapters<'_, T>,
        adapter_grads: Option<(&mut LoraPair<T>, &mut LoraPair<T>)>,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.dim();
        let h = self.heads;
        let dh = d / h;
        let (nq, nk) = (cache.nq, cache.nk);
        let scale = T::one() / T::lit(dh as f64).sqrt();

        let (mut gq, mut gk, mut gv, mut go) = match grad {
            Some(g) => (Some(&mut g.q), Some(&mut g.k), Some(&mut g.v), Some(&mut g.o)),
            None => (None, None, None, None),
        };

        let dmixed = self.o.backward(&cache.mixed, dout, nq, go.take());
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); nq * nk];
        for head in 0..h {
            let off = head * dh;
            let p = &cache.probs[head * nq * nk..(head + 1) * nq * nk];
            // dP = dO_h · V_hᵀ
            gemm(
                nq,
                dh,
                nk,
                T::one(),
                &dmixed,
                View::rm(d).at(off),
                &cache.v,
                View::tr(d).at(off),
                T::zero(),
                &mut dp,
                View::rm(nk),
            );
            // dV_h = Pᵀ · dO_h
            gemm(
                nk,
                nq,
                dh,
                T::one(),
                p,
                View::tr(nk),
                &dmixed,
                View::rm(d).at(off),
                T::zero(),
                &mut dv,
                View::rm(d).at(off),
            );
            // softmax backward, scaled
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut dp[i * nk..(i + 1) * nk];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..nk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(
                nq,
                nk,
                dh,
                T::one(),
                &dp,
                View::rm(nk),
                &cache.k,
                View::rm(d).at(off),
                T::zero(),
                &mut dq,
                View::rm(d).at(off),
            );
            gemm(
                nk,
                nq,
                dh,
                T::one(),
                &dp,
                View::tr(nk),
                &cache.q,
                View::rm(d).at(off),
                T::zero(),
                &mut dk,
                View::rm(d).at(off),
            );
        }

        let mut dxq = self.q.backward(&cache.xq, &dq, nq, gq.take());
        let dxk = self.k.backward(&cache.xk, &dk, nk, gk.take());
        let mut dxv = self.v.backward(&cache.xv, &dv, nk, gv.take());

        if let Some((aq, av)) = adapters {
            let (ga, gb) = match adapter_grads {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            let cq = cache.lora_q.as_ref().expect("adapter cache present");
            let cv = cache.lora_v.as_ref().expect("adapter cache present");
            let extra_q = aq.backward(&cache.xq, cq, &dq, nq, ga);
            crate::tensor::add_into(&mut dxq, &extra_q);
            let extra_v = av.backward(&cache.xv, cv, &dv, nk, gb);
            crate::tensor::add_into(&mut dxv, &extra_v);
        }
        (dxq, dxk, dxv)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
