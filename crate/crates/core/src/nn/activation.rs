use crate::scalar::Scalar;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU, evaluated as `x·σ(2z)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let z = T::lit(2.0 * SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    x * sigmoid(z)
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let s = sigmoid(T::lit(2.0) * c * (x + a * x * x * x));
    s + T::lit(2.0) * x * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// `dy ⊙ gelu'(pre)`.
pub fn gelu_backward<T: Scalar>(pre: &[T], dy: &[T]) -> Vec<T> {
    pre.iter().zip(dy).map(|(&x, &g)| g * gelu_grad(x)).collect()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    x.logistic()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            let t = 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh());
            assert!((gelu(x) - t).abs() < 1e-14, "{x}");
        }
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_7).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
