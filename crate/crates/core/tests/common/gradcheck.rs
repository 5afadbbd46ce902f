//! Analytic gradients against central finite differences at 64-bit. Each
//! check returns the worst relative error over its random instances.

use negotiate_core::agent::{AgentConfig, AgentParams, Observation, TurnCoefficients};
use negotiate_core::diffcore::{Bernoulli, Categorical, Embedding, Linear, Lstm, Parameters, Tensor};
use negotiate_core::env::{new_game_with, Action, Channel, Horizon};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative error `|a - n| / max(|a|, |n|)` over a whole tensor's checked
/// coordinates, so that roundoff in near-zero entries does not dominate.
fn rel_err_vec(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-7 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences for up to `max_per_tensor` coordinates of every
/// parameter tensor; returns the worst relative error and the tensor name.
fn check_params<P: Parameters<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    max_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, String) {
    let named = analytic.named("");
    let mut worst = (0.0f64, String::new());
    for (ti, (name, grad)) in named.iter().enumerate() {
        let len = grad.len();
        let picks: Vec<usize> = if len <= max_per_tensor {
            (0..len).collect()
        } else {
            (0..max_per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        for k in picks {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut i = 0;
                p.visit_mut("", &mut |_, t| {
                    if i == ti {
                        t.data_mut()[k] += delta;
                    }
                    i += 1;
                });
                loss(&p)
            };
            a.push(grad.data()[k]);
            n.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
        }
        let e = rel_err_vec(&a, &n);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}

fn check_input(x: &Tensor<f64>, analytic: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let numeric: Vec<f64> = (0..x.len())
        .map(|k| {
            let eval = |delta: f64| {
                let mut y = x.clone();
                y.data_mut()[k] += delta;
                loss(&y)
            };
            (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
        })
        .collect();
    rel_err_vec(analytic.data(), &numeric)
}

pub fn linear_layer() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..7));
        let layer = Linear::<f64>::new(i, o, &mut rng);
        let x = random(&[b, i], &mut rng);
        let g = random(&[b, o], &mut rng);
        let mut grad = layer.zeros_like();
        let dx = layer.backward(&x, &g, &mut grad);
        let worst = check_params(&layer, &grad, |l| dot(&l.forward(&x), &g), usize::MAX, &mut rng)
            .0
            .max(check_input(&x, &dx, |x| dot(&layer.forward(x), &g)));
        all = all.max(worst);
    }
    all
}

pub fn embedding_table() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Embedding::<f64>::new(11, 100, &mut rng);
        let idx: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..11)).collect();
        let g = random(&[idx.len(), 100], &mut rng);
        let mut grad = table.zeros_like();
        table.backward(&idx, &g, &mut grad);
        let (worst, _) = check_params(&table, &grad, |t| dot(&t.lookup(&idx), &g), usize::MAX, &mut rng);
        all = all.max(worst);
    }
    all
}

pub fn lstm_sequence() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, d, h) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
        let lstm = Lstm::<f64>::new(d, h, &mut rng);
        let xs: Vec<Tensor<f64>> = (0..6).map(|_| random(&[b, d], &mut rng)).collect();
        let h0 = random(&[b, h], &mut rng);
        let c0 = random(&[b, h], &mut rng);
        let gh: Vec<Tensor<f64>> = (0..6).map(|_| random(&[b, h], &mut rng)).collect();
        let gc = random(&[b, h], &mut rng);
        let loss = |l: &Lstm<f64>, xs: &[Tensor<f64>], h0: &Tensor<f64>, c0: &Tensor<f64>| {
            let steps = l.run(xs.to_vec(), h0.clone(), c0.clone());
            let hs: f64 = steps.iter().zip(&gh).map(|(s, g)| dot(s.h(), g)).sum();
            hs + dot(steps[5].c(), &gc)
        };

        let steps = lstm.run(xs.clone(), h0.clone(), c0.clone());
        let mut grad = lstm.zeros_like();
        // the final cell gradient enters through the last step's backward
        let mut dh = Tensor::zeros(&[b, h]);
        let mut dc = gc.clone();
        let mut dxs = Vec::new();
        for (s, ext) in steps.iter().zip(&gh).rev() {
            dh.add_assign(ext);
            let g = lstm.step_backward(s, &dh, &dc, &mut grad);
            dxs.push(g.dx.unwrap());
            dh = g.dh_prev;
            dc = g.dc_prev;
        }
        dxs.reverse();

        let (mut worst, _) = check_params(&lstm, &grad, |l| loss(l, &xs, &h0, &c0), usize::MAX, &mut rng);
        worst = worst.max(check_input(&h0, &dh, |h0| loss(&lstm, &xs, h0, &c0)));
        worst = worst.max(check_input(&c0, &dc, |c0| loss(&lstm, &xs, &h0, c0)));
        for k in 0..6 {
            worst = worst.max(check_input(&xs[k], &dxs[k], |x| {
                let mut v = xs.clone();
                v[k] = x.clone();
                loss(&lstm, &v, &h0, &c0)
            }));
        }
        all = all.max(worst);

        // the sequence helper agrees with the manual loop when no cell gradient leaves
        let mut grad2 = lstm.zeros_like();
        let seq = lstm.backward(&steps, &gh, &mut grad2);
        let mut grad3 = lstm.zeros_like();
        let mut dh = Tensor::zeros(&[b, h]);
        let mut dc = Tensor::zeros(&[b, h]);
        for (s, ext) in steps.iter().zip(&gh).rev() {
            dh.add_assign(ext);
            let g = lstm.step_backward(s, &dh, &dc, &mut grad3);
            dh = g.dh_prev;
            dc = g.dc_prev;
        }
        assert_eq!(grad2, grad3);
        assert_eq!(seq.dh0, dh);
    }
    all
}
/// Embedding table feeding an LSTM through the precomputed projection.
pub fn token_encoder() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, d, h, b) = (rng.gen_range(2..8), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
        let table = Embedding::<f64>::new(rows, d, &mut rng);
        let lstm = Lstm::<f64>::new(d, h, &mut rng);
        let tokens: Vec<Vec<usize>> = (0..rng.gen_range(1..6)).map(|_| (0..b).map(|_| rng.gen_range(0..rows)).collect()).collect();
        let g = random(&[b, h], &mut rng);
        let loss = |t: &Embedding<f64>, l: &Lstm<f64>| {
            let steps = l.encode_tokens(&l.project_table(t), &tokens);
            dot(steps.last().unwrap().h(), &g)
        };
        let steps = lstm.encode_tokens(&lstm.project_table(&table), &tokens);
        let mut grad = lstm.zeros_like();
        let mut table_grad = table.zeros_like();
        let seq = lstm.backward_final(&steps, &g, &mut grad);
        lstm.backward_tokens(&table, &tokens, &seq.dgates, &mut grad, &mut table_grad);
        let (w, _) = check_params(&lstm, &grad, |l| loss(&table, l), usize::MAX, &mut rng);
        let (t, _) = check_params(&table, &table_grad, |t| loss(t, &lstm), usize::MAX, &mut rng);
        all = all.max(w).max(t);
    }
    all
}


pub fn categorical_head() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..12);
        let logits = random(&[1, k], &mut rng);
        let mask: Option<Vec<bool>> = (seed % 2 == 1).then(|| (0..k).map(|j| j != 0).collect());
        let mask = mask.as_deref();
        let a = rng.gen_range(if mask.is_some() { 1 } else { 0 }..k);
        let (c_lp, c_ent) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
        let loss = |l: &Tensor<f64>| {
            let d = Categorical::from_logits_masked(l.data(), mask);
            c_lp * d.log_prob(a) + c_ent * d.entropy()
        };
        let mut dl = Tensor::zeros(&[1, k]);
        Categorical::from_logits_masked(logits.data(), mask).backward(a, c_lp, c_ent, dl.data_mut());
        let worst = check_input(&logits, &dl, loss);
        all = all.max(worst);

        // plain negative log-likelihood
        let mut dl = Tensor::zeros(&[1, k]);
        Categorical::from_logits(logits.data()).backward(a, -1.0, 0.0, dl.data_mut());
        let worst = check_input(&logits, &dl, |l| -Categorical::from_logits(l.data()).log_prob(a));
        all = all.max(worst);
    }
    all
}

pub fn bernoulli_head() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rng.gen_range(-4.0..4.0);
        let e = rng.gen_bool(0.5);
        let (c_lp, c_ent) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
        let analytic = Bernoulli::from_logit(z).backward(e, c_lp, c_ent);
        let f = |z: f64| {
            let d = Bernoulli::from_logit(z);
            c_lp * d.log_prob(e) + c_ent * d.entropy()
        };
        let numeric = (f(z + STEP) - f(z - STEP)) / (2.0 * STEP);
        all = all.max(rel_err_vec(&[analytic], &[numeric]));
    }
    all
}

pub struct AgentCase {
    pub agent: AgentParams<f64>,
    pub obs: Vec<Observation>,
    actions: Vec<Action>,
    coefs: Vec<TurnCoefficients<f64>>,
    decode: bool,
    allow_terminate: bool,
}

impl AgentCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n_opponents = (seed % 3 == 0).then_some(4);
        let config = AgentConfig {
            embed_dim: 5,
            hidden_dim: 4,
            id_embed_dim: 3,
            n_opponents,
            allow_dummy_symbol: seed % 4 != 1,
            variable_length: seed % 5 == 2,
        };
        let agent = AgentParams::<f64>::new(config, &mut rng);
        let rows = rng.gen_range(1..4);
        let shared = seed % 7 == 3;
        let mut obs = Vec::new();
        for r in 0..rows {
            if shared && r > 0 {
                obs.push(obs[0]);
                continue;
            }
            let mut state = new_game_with(&mut rng, Channel::Both, Horizon::Fixed(10));
            for _ in 0..rng.gen_range(0..3) {
                let action = random_action(&mut rng, false);
                state.step(&action);
            }
            let role = state.actor();
            let id = n_opponents.map(|n| rng.gen_range(0..n));
            obs.push(Observation::from_state(&state, role, id));
        }
        let decode = seed % 6 != 4;
        let allow_terminate = seed % 8 != 5;
        let h = agent.encode_turn(agent.encode_contexts(&contexts(&obs)).hidden(), &obs);
        let mut rngs: Vec<ChaCha8Rng> = (0..rows).map(|r| ChaCha8Rng::seed_from_u64(seed * 31 + r as u64)).collect();
        let opts = negotiate_core::agent::ActOptions {
            mode: negotiate_core::agent::ActMode::Sample,
            decode_utterance: decode,
            allow_terminate,
        };
        let actions = agent.decide(h.hidden(), &mut rngs, opts).actions;
        let coefs = (0..rows)
            .map(|_| TurnCoefficients {
                log_prob: rng.gen_range(-1.0..1.0),
                entropy_term: rng.gen_range(-0.5..0.5),
                entropy_utt: rng.gen_range(-0.5..0.5),
                entropy_prop: rng.gen_range(-0.5..0.5),
            })
            .collect();
        AgentCase {
            agent,
            obs,
            actions,
            coefs,
            decode,
            allow_terminate,
        }
    }

    fn loss(&self, agent: &AgentParams<f64>) -> f64 {
        let ctx = agent.encode_contexts(&contexts(&self.obs));
        let enc = agent.encode_turn(ctx.hidden(), &self.obs);
        let dec = agent.score(enc.hidden(), &self.actions, self.decode, self.allow_terminate);
        dec.stats
            .iter()
            .zip(&self.coefs)
            .map(|(s, c)| {
                let term = if self.allow_terminate { c.entropy_term * s.entropy_term } else { 0.0 };
                c.log_prob * s.log_prob() + term + c.entropy_utt * s.entropy_utt + c.entropy_prop * s.entropy_prop
            })
            .sum()
    }

    pub fn gradient(&self) -> AgentParams<f64> {
        let agent = &self.agent;
        let mut grad = agent.zeros_like();
        let ctx = agent.encode_contexts(&contexts(&self.obs));
        let enc = agent.encode_turn(ctx.hidden(), &self.obs);
        let dec = agent.score(enc.hidden(), &self.actions, self.decode, self.allow_terminate);
        let dctx = agent.backward_turn(&enc, &dec, &self.coefs, &mut grad);
        agent.backward_contexts(&ctx, &dctx, &mut grad);
        grad
    }
}

fn contexts(obs: &[Observation]) -> Vec<[u8; 6]> {
    obs.iter().map(|o| o.item_context).collect()
}

fn random_action(rng: &mut ChaCha8Rng, terminate: bool) -> Action {
    Action {
        terminate,
        message: negotiate_core::env::Message::new(std::array::from_fn(|_| rng.gen_range(0..11))).unwrap(),
        proposal: negotiate_core::env::Proposal::new(std::array::from_fn(|_| rng.gen_range(0..6))).unwrap(),
    }
}

pub fn full_agent_turn() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let case = AgentCase::random(seed);
        let grad = case.gradient();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (worst, _) = check_params(&case.agent, &grad, |a| case.loss(a), 40, &mut rng);
        all = all.max(worst);
    }
    all
}

pub fn encoder_hidden_state() -> f64 {
    let mut all = 0.0f64;
    for seed in 0..INSTANCES {
        let case = AgentCase::random(seed);
        let agent = &case.agent;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random(&[case.obs.len(), agent.hidden_dim()], &mut rng);
        let loss = |a: &AgentParams<f64>| {
            let ctx = a.encode_contexts(&contexts(&case.obs));
            dot(a.encode_turn(ctx.hidden(), &case.obs).hidden(), &g)
        };
        // a zero-coefficient decision leaves only the gradient injected at h
        let mut grad = agent.zeros_like();
        let ctx = agent.encode_contexts(&contexts(&case.obs));
        let enc = agent.encode_turn(ctx.hidden(), &case.obs);
        let dec = agent.score(enc.hidden(), &case.actions, false, false);
        let zero = vec![TurnCoefficients::default(); case.obs.len()];
        let probe = agent.backward_turn(&enc, &dec, &zero, &mut grad);
        assert!(probe.data().iter().all(|v| *v == 0.0));
        let dctx = agent.backward_hidden(&enc, &g, &mut grad);
        agent.backward_contexts(&ctx, &dctx, &mut grad);
        let (worst, _) = check_params(agent, &grad, loss, 40, &mut rng);
        all = all.max(worst);
    }
    all
}


/// Every check by name, for reporting.
pub fn all_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("linear", linear_layer()),
        ("embedding", embedding_table()),
        ("lstm", lstm_sequence()),
        ("token encoder", token_encoder()),
        ("categorical", categorical_head()),
        ("bernoulli", bernoulli_head()),
        ("agent turn", full_agent_turn()),
        ("encoder hidden state", encoder_hidden_state()),
    ]
}
