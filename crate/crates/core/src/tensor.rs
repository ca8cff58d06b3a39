//! Dense row-major tensors and strided matrix products.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Panics if `data.len()` disagrees with the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn from N(0, std^2).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Placement of a logical matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Contiguous row-major matrix with `cols` columns.
    pub const fn rm(cols: usize) -> Self {
        Self {
            off: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a contiguous row-major matrix that has `stored_cols` columns.
    pub const fn tr(stored_cols: usize) -> Self {
        Self {
            off: 0,
            rs: 1,
            cs: stored_cols,
        }
    }

    pub const fn at(self, off: usize) -> Self {
        Self {
            off: self.off + off,
            rs: self.rs,
            cs: self.cs,
        }
    }

    fn check(&self, rows: usize, cols: usize, len: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "matrix view out of bounds ({last} >= {len})");
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    cv.check(m, n, c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.off + i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    av.check(m, k, a.len());
    bv.check(k, n, b.len());
    // SAFETY: bounds verified above; `c` is a unique borrow so it cannot alias `a`/`b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `a[m×k] · b[k×n]`.
pub fn mm<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, T::one(), a, View::rm(k), b, View::rm(n), T::zero(), &mut c, View::rm(n));
    c
}

/// `a[m×k] · bᵀ` where `b` is stored `n×k`.
pub fn mm_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, T::one(), a, View::rm(k), b, View::tr(k), T::zero(), &mut c, View::rm(n));
    c
}

/// `c += aᵀ · b` where `a` is stored `k×m` and `b` is stored `k×n`.
pub fn mm_tn_acc<T: Scalar>(a: &[T], k: usize, m: usize, b: &[T], n: usize, c: &mut [T]) {
    assert_eq!(c.len(), m * n);
    gemm(m, k, n, T::one(), a, View::tr(m), b, View::rm(n), T::one(), c, View::rm(n));
}

/// `c += a[m×k] · b[k×n]`.
pub fn mm_acc<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    assert_eq!(c.len(), m * n);
    gemm(m, k, n, T::one(), a, View::rm(k), b, View::rm(n), T::one(), c, View::rm(n));
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub fn added<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn products_match_naive_loops() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect();
        assert_eq!(mm(&a, 2, 3, &b, 4), naive(&a, 2, 3, &b, 4));

        let bt = transpose(&b, 3, 4);
        assert_eq!(mm_nt(&a, 2, 3, &bt, 4), naive(&a, 2, 3, &b, 4));

        let at = transpose(&a, 2, 3);
        let mut c = vec![1.0; 8];
        mm_tn_acc(&at, 3, 2, &b, 4, &mut c);
        let expect: Vec<f64> = naive(&a, 2, 3, &b, 4).iter().map(|v| v + 1.0).collect();
        assert_eq!(c, expect);
    }

    #[test]
    fn zero_inner_dimension_scales_output() {
        let mut c = vec![3.0f32; 4];
        gemm(2, 0, 2, 1.0, &[], View::rm(0), &[], View::rm(2), 0.0, &mut c, View::rm(2));
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    #[should_panic]
    fn out_of_bounds_view_panics() {
        let a = vec![0.0f32; 3];
        mm(&a, 2, 2, &a, 1);
    }
}
