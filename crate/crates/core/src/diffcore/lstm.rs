use rand::Rng;

use super::ops::{matmul_nn, matmul_nt, matmul_tn_acc, sum_rows_acc};
use super::params::join;
use super::{Embedding, Parameters, Real, Tensor};

/// LSTM cell with gate blocks ordered input, forget, cell, output.
///
/// `w_ih: [4H, D]`, `w_hh: [4H, H]`, `bias: [4H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<T> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Everything one cell step needs for its backward pass.
#[derive(Clone, Debug)]
pub struct LstmStep<T> {
    /// Input rows, absent when the input projection was supplied directly.
    x: Option<Tensor<T>>,
    h_prev: Tensor<T>,
    c_prev: Tensor<T>,
    /// The previous state is known to be zero, so `w_hh` gets no gradient.
    zero_state: bool,
    /// Activated gates `[B, 4H]`.
    gates: Tensor<T>,
    h: Tensor<T>,
    c: Tensor<T>,
    tanh_c: Tensor<T>,
}

impl<T: Real> LstmStep<T> {
    pub fn h(&self) -> &Tensor<T> {
        &self.h
    }

    pub fn c(&self) -> &Tensor<T> {
        &self.c
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }
}

/// Gradients leaving one step.
#[derive(Debug)]
pub struct StepGrads<T> {
    /// Gradient at the gate pre-activations (equal to the gradient at the
    /// input projection `x · w_ihᵀ`).
    pub dgates: Tensor<T>,
    /// Present when the step was fed input rows.
    pub dx: Option<Tensor<T>>,
    pub dh_prev: Tensor<T>,
    pub dc_prev: Tensor<T>,
}

/// Gradients leaving a backward pass through time.
#[derive(Debug)]
pub struct SequenceGrads<T> {
    /// Per-step input gradients; empty for token-fed sequences.
    pub dxs: Vec<Tensor<T>>,
    pub dgates: Vec<Tensor<T>>,
    pub dh0: Tensor<T>,
    pub dc0: Tensor<T>,
}

impl<T: Real> Lstm<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Lstm {
            w_ih: Tensor::uniform(&[4 * hidden, input], 1.0 / (input as f64).sqrt(), rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn step(&self, x: Tensor<T>, h_prev: Tensor<T>, c_prev: Tensor<T>) -> LstmStep<T> {
        assert_eq!(x.cols(), self.input_dim(), "lstm input width");
        let mut pre = Tensor::zeros(&[x.rows(), 4 * self.hidden()]);
        matmul_nt(&x, &self.w_ih, T::zero(), &mut pre);
        self.finish_step(pre, Some(x), h_prev, c_prev, false)
    }

    /// A step whose input contribution `x · w_ihᵀ` is given as `[B, 4H]`.
    pub fn step_from_gates(&self, input_gates: Tensor<T>, h_prev: Tensor<T>, c_prev: Tensor<T>) -> LstmStep<T> {
        self.finish_step(input_gates, None, h_prev, c_prev, false)
    }

    fn finish_step(
        &self,
        mut gates: Tensor<T>,
        x: Option<Tensor<T>>,
        h_prev: Tensor<T>,
        c_prev: Tensor<T>,
        zero_state: bool,
    ) -> LstmStep<T> {
        let b = gates.rows();
        let hd = self.hidden();
        assert_eq!(gates.cols(), 4 * hd, "lstm gate width");
        assert_eq!((h_prev.rows(), h_prev.cols()), (b, hd), "lstm hidden shape");
        assert_eq!((c_prev.rows(), c_prev.cols()), (b, hd), "lstm cell shape");

        for r in 0..b {
            for (g, bias) in gates.row_mut(r).iter_mut().zip(self.bias.data()) {
                *g += *bias;
            }
        }
        if !zero_state {
            matmul_nt(&h_prev, &self.w_hh, T::one(), &mut gates);
        }

        let mut h = Tensor::zeros(&[b, hd]);
        let mut c = Tensor::zeros(&[b, hd]);
        for r in 0..b {
            let g = gates.row_mut(r);
            T::sigmoid_slice(&mut g[..2 * hd]);
            T::tanh_slice(&mut g[2 * hd..3 * hd]);
            T::sigmoid_slice(&mut g[3 * hd..]);
            let g = gates.row(r);
            let cp = c_prev.row(r);
            let cr = c.row_mut(r);
            for k in 0..hd {
                cr[k] = g[hd + k] * cp[k] + g[k] * g[2 * hd + k];
            }
        }
        let mut tanh_c = c.clone();
        T::tanh_slice(tanh_c.data_mut());
        for r in 0..b {
            let o = &gates.row(r)[3 * hd..];
            for ((hv, ov), tv) in h.row_mut(r).iter_mut().zip(o).zip(tanh_c.row(r)) {
                *hv = *ov * *tv;
            }
        }
        LstmStep {
            x,
            h_prev,
            c_prev,
            zero_state,
            gates,
            h,
            c,
            tanh_c,
        }
    }

    /// Runs a sequence from `(h0, c0)`.
    pub fn run(&self, xs: Vec<Tensor<T>>, h0: Tensor<T>, c0: Tensor<T>) -> Vec<LstmStep<T>> {
        let mut steps: Vec<LstmStep<T>> = Vec::with_capacity(xs.len());
        let (mut h, mut c) = (h0, c0);
        for x in xs {
            let s = self.step(x, h, c);
            h = s.h.clone();
            c = s.c.clone();
            steps.push(s);
        }
        steps
    }

    /// Runs a sequence from zero state and returns the steps.
    pub fn encode(&self, xs: Vec<Tensor<T>>) -> Vec<LstmStep<T>> {
        let b = xs[0].rows();
        let hd = self.hidden();
        self.run(xs, Tensor::zeros(&[b, hd]), Tensor::zeros(&[b, hd]))
    }

    /// `table · w_ihᵀ`, `[rows, 4H]`: the input contribution of every
    /// embedding row, so token-fed steps only gather rows of it.
    pub fn project_table(&self, table: &Embedding<T>) -> Tensor<T> {
        let mut proj = Tensor::zeros(&[table.rows(), 4 * self.hidden()]);
        matmul_nt(&table.table, &self.w_ih, T::zero(), &mut proj);
        proj
    }

    /// Encodes token sequences from zero state. `tokens[k]` holds the tokens
    /// at position `k` for every row; `proj` comes from [`Self::project_table`].
    pub fn encode_tokens(&self, proj: &Tensor<T>, tokens: &[Vec<usize>]) -> Vec<LstmStep<T>> {
        let b = tokens[0].len();
        let hd = self.hidden();
        let mut steps: Vec<LstmStep<T>> = Vec::with_capacity(tokens.len());
        for (k, idx) in tokens.iter().enumerate() {
            let (h, c, zero) = match steps.last() {
                Some(s) => (s.h.clone(), s.c.clone(), false),
                None => (Tensor::zeros(&[b, hd]), Tensor::zeros(&[b, hd]), true),
            };
            debug_assert_eq!(zero, k == 0);
            steps.push(self.finish_step(proj.gather_rows(idx), None, h, c, zero));
        }
        steps
    }

    /// Routes per-step gate gradients of a token-fed sequence into `w_ih`
    /// and the embedding table.
    pub fn backward_tokens(
        &self,
        table: &Embedding<T>,
        tokens: &[Vec<usize>],
        dgates: &[Tensor<T>],
        grad: &mut Lstm<T>,
        table_grad: &mut Embedding<T>,
    ) {
        let mut dproj = Tensor::zeros(&[table.rows(), 4 * self.hidden()]);
        for (idx, dg) in tokens.iter().zip(dgates) {
            dproj.scatter_add_rows(idx, dg);
        }
        matmul_tn_acc(&dproj, &table.table, &mut grad.w_ih);
        let mut dtable = Tensor::zeros(&[table.rows(), table.dim()]);
        matmul_nn(&dproj, &self.w_ih, T::zero(), &mut dtable);
        table_grad.table.add_assign(&dtable);
    }

    /// Backward through one step.
    pub fn step_backward(&self, s: &LstmStep<T>, dh: &Tensor<T>, dc: &Tensor<T>, grad: &mut Lstm<T>) -> StepGrads<T> {
        let b = s.batch();
        let hd = self.hidden();
        let one = T::one();
        let mut dgates = Tensor::zeros(&[b, 4 * hd]);
        let mut dc_prev = Tensor::zeros(&[b, hd]);
        for r in 0..b {
            let g = s.gates.row(r);
            let tc = s.tanh_c.row(r);
            let cp = s.c_prev.row(r);
            let dhr = dh.row(r);
            let dcr = dc.row(r);
            let dg = dgates.row_mut(r);
            let dcp = dc_prev.row_mut(r);
            for k in 0..hd {
                let (gi, gf, gg, go) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                let dct = dcr[k] + dhr[k] * go * (one - tc[k] * tc[k]);
                dg[k] = dct * gg * gi * (one - gi);
                dg[hd + k] = dct * cp[k] * gf * (one - gf);
                dg[2 * hd + k] = dct * gi * (one - gg * gg);
                dg[3 * hd + k] = dhr[k] * tc[k] * go * (one - go);
                dcp[k] = dct * gf;
            }
        }
        if !s.zero_state {
            matmul_tn_acc(&dgates, &s.h_prev, &mut grad.w_hh);
        }
        sum_rows_acc(&dgates, &mut grad.bias);
        let dx = s.x.as_ref().map(|x| {
            matmul_tn_acc(&dgates, x, &mut grad.w_ih);
            let mut dx = Tensor::zeros(&[b, self.input_dim()]);
            matmul_nn(&dgates, &self.w_ih, T::zero(), &mut dx);
            dx
        });
        let mut dh_prev = Tensor::zeros(&[b, hd]);
        matmul_nn(&dgates, &self.w_hh, T::zero(), &mut dh_prev);
        StepGrads {
            dgates,
            dx,
            dh_prev,
            dc_prev,
        }
    }

    /// Backpropagation through time.
    ///
    /// `dh_out[k]` is the loss gradient arriving at the hidden output of step
    /// `k` from outside the recurrence; pass zeros where nothing arrives.
    pub fn backward(&self, steps: &[LstmStep<T>], dh_out: &[Tensor<T>], grad: &mut Lstm<T>) -> SequenceGrads<T> {
        assert_eq!(steps.len(), dh_out.len());
        let b = steps[0].batch();
        let hd = self.hidden();
        let mut dh = Tensor::zeros(&[b, hd]);
        let mut dc = Tensor::zeros(&[b, hd]);
        let mut dxs = Vec::with_capacity(steps.len());
        let mut dgates = Vec::with_capacity(steps.len());
        for (s, ext) in steps.iter().zip(dh_out).rev() {
            dh.add_assign(ext);
            let g = self.step_backward(s, &dh, &dc, grad);
            dxs.extend(g.dx);
            dgates.push(g.dgates);
            dh = g.dh_prev;
            dc = g.dc_prev;
        }
        dxs.reverse();
        dgates.reverse();
        SequenceGrads {
            dxs,
            dgates,
            dh0: dh,
            dc0: dc,
        }
    }

    /// Backward for an encoder whose only output is the final hidden state.
    pub fn backward_final(&self, steps: &[LstmStep<T>], dh_final: &Tensor<T>, grad: &mut Lstm<T>) -> SequenceGrads<T> {
        let b = steps[0].batch();
        let hd = self.hidden();
        let mut dh_out: Vec<Tensor<T>> = (0..steps.len()).map(|_| Tensor::zeros(&[b, hd])).collect();
        *dh_out.last_mut().expect("non-empty sequence") = dh_final.clone();
        self.backward(steps, &dh_out, grad)
    }
}

impl<T: Real> Parameters<T> for Lstm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "w_ih"), &self.w_ih);
        f(join(prefix, "w_hh"), &self.w_hh);
        f(join(prefix, "b"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "w_ih"), &mut self.w_ih);
        f(join(prefix, "w_hh"), &mut self.w_hh);
        f(join(prefix, "b"), &mut self.bias);
    }

    fn zeros_like(&self) -> Self {
        Lstm {
            w_ih: Tensor::zeros_like(&self.w_ih),
            w_hh: Tensor::zeros_like(&self.w_hh),
            bias: Tensor::zeros_like(&self.bias),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state_gives_zero_output() {
        let mut lstm = Lstm::<f64>::new(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        lstm.zero();
        let s = lstm.step(
            Tensor::from_vec(&[1, 3], vec![0.4, -1.0, 2.0]).unwrap(),
            Tensor::zeros(&[1, 4]),
            Tensor::zeros(&[1, 4]),
        );
        assert!(s.h().data().iter().all(|v| *v == 0.0));
        assert!(s.c().data().iter().all(|v| *v == 0.0));
        // every sigmoid gate sits at 0.5, the cell candidate at tanh(0)
        assert!(s.gates.data()[..8].iter().all(|v| *v == 0.5));
    }

    /// With the forget gate saturated open and the input gate closed, the
    /// cell state is carried through unchanged.
    #[test]
    fn saturated_forget_gate_carries_cell_state() {
        let hd = 3;
        let mut lstm = Lstm::<f64>::new(2, hd, &mut ChaCha8Rng::seed_from_u64(1));
        lstm.w_ih.fill_zero();
        lstm.w_hh.fill_zero();
        let bias = lstm.bias.data_mut();
        for k in 0..hd {
            bias[k] = -50.0; // input gate closed
            bias[hd + k] = 50.0; // forget gate open
        }
        let c0 = Tensor::from_vec(&[1, hd], vec![0.7, -0.2, 1.5]).unwrap();
        let s = lstm.step(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, hd]), c0.clone());
        for (a, b) in s.c().data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Forget gate saturated open: `c' = c + i * g`, so the cell state is
    /// non-decreasing whenever the candidate is non-negative.
    #[test]
    fn saturated_forget_gate_accumulates_monotonically() {
        let hd = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lstm = Lstm::<f64>::new(1, hd, &mut rng);
        lstm.w_hh.fill_zero();
        for k in 0..hd {
            lstm.bias.data_mut()[hd + k] = 50.0;
            // candidate rows get positive input weight
            lstm.w_ih.data_mut()[2 * hd + k] = 1.0;
        }
        let xs: Vec<Tensor<f64>> = (0..6)
            .map(|t| Tensor::from_vec(&[1, 1], vec![0.1 * (t + 1) as f64]).unwrap())
            .collect();
        let steps = lstm.encode(xs);
        let mut prev = vec![0.0; hd];
        for s in &steps {
            let gi = &s.gates.row(0)[..hd];
            let gg = &s.gates.row(0)[2 * hd..3 * hd];
            for k in 0..hd {
                let c = s.c().row(0)[k];
                assert!(c >= prev[k]);
                assert!((c - (prev[k] + gi[k] * gg[k])).abs() < 1e-12);
                prev[k] = c;
            }
        }
    }
}
