use super::{Graph, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

pub type ParamVisitor<'a, S> = dyn FnMut(&str, &Tensor<S>) + 'a;
pub type ParamVisitorMut<'a, S> = dyn FnMut(&str, &mut Tensor<S>) + 'a;

/// Named traversal over every learnable tensor of a module.
///
/// Names are dotted paths (`te.layer0.wq`); they key checkpoints and the
/// optimizer moments, so they must be stable for a given configuration.
pub trait Parameters<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>);
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, S>);

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Pulls gradients of every registered parameter out of `g`.
    fn accumulate_grads(&mut self, g: &Graph<S>) -> Result<()> {
        let mut res = Ok(());
        self.visit_mut("", &mut |_, t| {
            if let Some(gr) = g.param_grad(t) {
                if res.is_ok() {
                    res = t.accumulate_grad(gr);
                }
            }
        });
        res
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(on));
    }
}

/// Joins a module prefix and a local parameter name.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<S: Scalar> Parameters<S> for Tensor<S> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(prefix, self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, S>) {
        f(prefix, self);
    }
}

impl<S: Scalar, P: Parameters<S>> Parameters<S> for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, S>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<S: Scalar, P: Parameters<S>> Parameters<S> for Option<P> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, S>) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Parameters`] for a struct generic over `S` by visiting the
/// listed fields under their own names.
#[allow(unused_macros)]
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<S: $crate::scalar::Scalar> $crate::tensor::Parameters<S> for $ty<S> {
            fn visit(&self, prefix: &str, f: &mut $crate::tensor::ParamVisitor<'_, S>) {
                $( $crate::tensor::Parameters::visit(&self.$field, &$crate::tensor::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut $crate::tensor::ParamVisitorMut<'_, S>) {
                $( $crate::tensor::Parameters::visit_mut(&mut self.$field, &$crate::tensor::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameters;
