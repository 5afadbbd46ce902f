use serde::{Deserialize, Serialize};

use super::{Parameters, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Minimizes: parameters move against the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `params` using the matching tensor of `grads`.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        let g: Vec<&Tensor<T>> = grads.named("").into_iter().map(|(_, t)| t).collect();
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), g.len(), "adam state does not match parameters");
        let k = self.advance();
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            k.apply(p, g[i], &mut m[i], &mut v[i]);
            i += 1;
        });
        assert_eq!(i, g.len(), "adam parameter/gradient count");
    }

    pub fn step_tensors(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "adam parameter/gradient count");
        if self.m.is_empty() {
            self.m = params.iter().map(|t| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "adam state does not match parameters");
        let k = self.advance();
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            k.apply(p, g, m, v);
        }
    }

    fn advance(&mut self) -> StepConstants<T> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        StepConstants {
            b1: T::lit(c.beta1),
            b2: T::lit(c.beta2),
            ib1: T::lit(1.0 - c.beta1),
            ib2: T::lit(1.0 - c.beta2),
            step_size: T::lit(c.learning_rate / bc1),
            inv_sqrt_bc2: T::lit(1.0 / bc2.sqrt()),
            eps: T::lit(c.epsilon),
        }
    }
}

struct StepConstants<T> {
    b1: T,
    b2: T,
    ib1: T,
    ib2: T,
    step_size: T,
    inv_sqrt_bc2: T,
    eps: T,
}

impl<T: Real> StepConstants<T> {
    fn apply(&self, p: &mut Tensor<T>, g: &Tensor<T>, m: &mut [T], v: &mut [T]) {
        assert_eq!(p.shape(), g.shape(), "adam shape mismatch");
        for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.b1 * *mi + self.ib1 * *gi;
            *vi = self.b2 * *vi + self.ib2 * *gi * *gi;
            *pi -= self.step_size * *mi / (vi.sqrt() * self.inv_sqrt_bc2 + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(&[n], v).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = one(vec![1.0, -2.0, 3.0]);
        let g = one(vec![0.0; 3]);
        for _ in 0..10 {
            adam.step_tensors(&mut [&mut p], &[&g]);
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn step_counter_increments_once_per_call() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = one(vec![0.0]);
        let g = one(vec![1.0]);
        for k in 1..=5 {
            adam.step_tensors(&mut [&mut p], &[&g]);
            assert_eq!(adam.steps(), k);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = one(vec![0.0, 0.0]);
        let g = one(vec![3.0, -0.01]);
        adam.step_tensors(&mut [&mut p], &[&g]);
        assert!((p.data()[0] + 1e-3).abs() < 1e-9);
        assert!((p.data()[1] - 1e-3).abs() < 1e-9);
    }
}
