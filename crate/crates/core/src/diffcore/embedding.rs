use rand::Rng;

use super::params::join;
use super::{Parameters, Real, Tensor};

/// Lookup table `[rows, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub table: Tensor<T>,
}

impl<T: Real> Embedding<T> {
    pub fn new<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        // A lookup is a one-hot product, so the fan-in is the row count.
        let bound = 1.0 / (rows as f64).sqrt();
        Embedding {
            table: Tensor::uniform(&[rows, dim], bound, rng),
        }
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Returns `[idx.len(), dim]`. Panics on an out-of-range index.
    pub fn lookup(&self, idx: &[usize]) -> Tensor<T> {
        for &i in idx {
            assert!(i < self.rows(), "embedding index {i} out of range {}", self.rows());
        }
        self.table.gather_rows(idx)
    }

    /// Scatter-adds `dy` into the looked-up rows of `grad`.
    pub fn backward(&self, idx: &[usize], dy: &Tensor<T>, grad: &mut Embedding<T>) {
        grad.table.scatter_add_rows(idx, dy);
    }
}

impl<T: Real> Parameters<T> for Embedding<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "table"), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "table"), &mut self.table);
    }

    fn zeros_like(&self) -> Self {
        Embedding {
            table: Tensor::zeros_like(&self.table),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_only_touches_looked_up_row() {
        let emb = Embedding::<f64>::new(11, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = emb.zeros_like();
        let dy = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        emb.backward(&[7], &dy, &mut g);
        for r in 0..11 {
            let nonzero = g.table.row(r).iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, r == 7);
        }
    }

    #[test]
    fn repeated_index_doubles_gradient() {
        let emb = Embedding::<f64>::new(5, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = emb.zeros_like();
        let dy = Tensor::from_vec(&[2, 3], vec![1.0, -1.0, 0.5, 1.0, -1.0, 0.5]).unwrap();
        emb.backward(&[2, 2], &dy, &mut g);
        assert_eq!(g.table.row(2), &[2.0, -2.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn out_of_range_index_panics() {
        let emb = Embedding::<f64>::new(3, 2, &mut ChaCha8Rng::seed_from_u64(5));
        emb.lookup(&[3]);
    }
}
