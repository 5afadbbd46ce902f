use rand::Rng;

use super::ops::{matmul_nn, matmul_nt, matmul_tn_acc, sum_rows_acc};
use super::params::join;
use super::{Parameters, Real, Tensor};

/// Affine layer `y = W x + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `x: [B, in]` to `[B, out]`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.rows();
        let n = self.output_dim();
        let mut y = Tensor::zeros(&[b, n]);
        for r in 0..b {
            y.row_mut(r).copy_from_slice(self.bias.data());
        }
        matmul_nt(x, &self.weight, T::one(), &mut y);
        y
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Linear<T>) -> Tensor<T> {
        self.backward_params(x, dy, grad);
        let mut dx = Tensor::zeros(&[x.rows(), self.input_dim()]);
        matmul_nn(dy, &self.weight, T::zero(), &mut dx);
        dx
    }

    /// Parameter gradients only, when the input is not differentiable.
    pub fn backward_params(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Linear<T>) {
        matmul_tn_acc(dy, x, &mut grad.weight);
        sum_rows_acc(dy, &mut grad.bias);
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "w"), &self.weight);
        f(join(prefix, "b"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "w"), &mut self.weight);
        f(join(prefix, "b"), &mut self.bias);
    }

    fn zeros_like(&self) -> Self {
        Linear {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
        }
    }
}
