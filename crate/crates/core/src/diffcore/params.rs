use super::{Real, Tensor};

/// A fixed-order collection of named trainable tensors.
///
/// Gradient buffers use the same type as the parameters they belong to, so
/// `visit` on a parameter set and on its gradient set yields tensors in the
/// same order.
pub trait Parameters<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    /// Same structure, every element zero.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill_zero());
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn num_elements(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Flattened copy of all elements in visit order.
    fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Adds every tensor of `other` into `self`.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<&Tensor<T>> = other.named("").into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.visit_mut("", &mut |_, t| {
            t.add_assign(src[i]);
            i += 1;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}
