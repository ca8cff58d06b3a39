use crate::scalar::Scalar;

/// Bilinear resampling between fixed grid sizes (half-pixel centers,
/// edge-clamped). Linear, so the backward pass is the adjoint.
#[derive(Clone, Debug)]
pub struct Bilinear {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = (s - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, t)
        })
        .collect()
}

impl Bilinear {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        Self {
            src: (src_h, src_w),
            dst: (dst_h, dst_w),
            rows: axis(src_h, dst_h),
            cols: axis(src_w, dst_w),
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        assert_eq!(x.len(), sh * sw);
        let mut y = vec![T::zero(); dh * dw];
        for (i, &(r0, r1, ty)) in self.rows.iter().enumerate() {
            let ty = T::lit(ty);
            for (j, &(c0, c1, tx)) in self.cols.iter().enumerate() {
                let tx = T::lit(tx);
                let top = x[r0 * sw + c0] * (T::one() - tx) + x[r0 * sw + c1] * tx;
                let bot = x[r1 * sw + c0] * (T::one() - tx) + x[r1 * sw + c1] * tx;
                y[i * dw + j] = top * (T::one() - ty) + bot * ty;
            }
        }
        y
    }

    pub fn adjoint<T: Scalar>(&self, dy: &[T]) -> Vec<T> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        assert_eq!(dy.len(), dh * dw);
        let mut dx = vec![T::zero(); sh * sw];
        for (i, &(r0, r1, ty)) in self.rows.iter().enumerate() {
            let ty = T::lit(ty);
            for (j, &(c0, c1, tx)) in self.cols.iter().enumerate() {
                let tx = T::lit(tx);
                let g = dy[i * dw + j];
                dx[r0 * sw + c0] += g * (T::one() - ty) * (T::one() - tx);
                dx[r0 * sw + c1] += g * (T::one() - ty) * tx;
                dx[r1 * sw + c0] += g * ty * (T::one() - tx);
                dx[r1 * sw + c1] += g * ty * tx;
            }
        }
        dx
    }
}
