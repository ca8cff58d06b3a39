use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named access to a module's parameter tensors, in a fixed order.
pub trait Params<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut out);
        out
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut out);
        out
    }

    fn zero_(&mut self) {
        for (_, t) in self.named_mut("") {
            t.fill(T::zero());
        }
    }

    fn param_count(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.numel()).sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Params<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        if let Some(p) = self {
            p.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(p) = self {
            p.visit_mut(prefix, out);
        }
    }
}

/// Implements [`Params`] by visiting the listed fields under the given names.
#[macro_export]
macro_rules! impl_params {
    ($ty:ident { $($field:ident => $name:expr),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::nn::Params<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::tensor::Tensor<T>)>,
            ) {
                $( $crate::nn::Params::visit(&self.$field, &$crate::nn::join(prefix, $name), out); )*
            }

            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::tensor::Tensor<T>)>,
            ) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, &$crate::nn::join(prefix, $name), out); )*
            }
        }
    };
}
