//! Independent reference computations for the game rules.

use negotiate_core::agent::{AgentConfig, AgentParams, Observation};
use negotiate_core::env::{
    joint_optimal_reward, new_game, sample_turn_limit, Action, Channel, GameState, ItemPool, Message, Proposal, Role,
    Utilities,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHANNELS: [Channel; 4] = [Channel::Proposal, Channel::Linguistic, Channel::Both, Channel::None];

pub fn random_action(rng: &mut ChaCha8Rng, p_terminate: f64) -> Action {
    Action {
        terminate: rng.gen_bool(p_terminate),
        message: Message::new(std::array::from_fn(|_| rng.gen_range(0..11))).unwrap(),
        proposal: Proposal::new(std::array::from_fn(|_| rng.gen_range(0..6))).unwrap(),
    }
}

/// Plays random actions until the game ends.
pub fn random_terminal_game(rng: &mut ChaCha8Rng) -> GameState {
    let channel = CHANNELS[rng.gen_range(0..4)];
    let mut g = new_game(rng, channel);
    let p = rng.gen_range(0.05..0.6);
    while !g.is_over() {
        let a = random_action(rng, p);
        g.step(&a);
    }
    g
}

fn value(u: &[u8; 3], x: &[u8; 3]) -> u32 {
    u.iter().zip(x).map(|(a, b)| *a as u32 * *b as u32).sum()
}

/// Best joint payoff over all 216 candidate divisions, skipping those that
/// exceed the pool.
pub fn brute_force_optimum(pool: &ItemPool, ua: &Utilities, ub: &Utilities) -> u32 {
    let (p, ua, ub) = (pool.values(), ua.values(), ub.values());
    let mut best = 0;
    for a in 0..6u8 {
        for b in 0..6u8 {
            for c in 0..6u8 {
                let x = [a, b, c];
                if x.iter().zip(&p).any(|(x, p)| x > p) {
                    continue;
                }
                let rest = [p[0] - a, p[1] - b, p[2] - c];
                best = best.max(value(&ua, &x) + value(&ub, &rest));
            }
        }
    }
    best
}

/// Payoffs read straight off the action history: the accepted proposal is
/// the one made on the turn before the accepting turn.
pub fn reference_rewards(g: &GameState) -> [u32; 2] {
    let h = &g.history;
    let Some((acceptor, last)) = h.last() else { return [0, 0] };
    if !last.terminate {
        return [0, 0];
    }
    let (proposer, prev) = h[h.len() - 2];
    assert_eq!(proposer, acceptor.opponent());
    let pool = g.pool.values();
    let mine = prev.proposal.values();
    if mine.iter().zip(&pool).any(|(m, p)| m > p) {
        return [0, 0];
    }
    let rest = [pool[0] - mine[0], pool[1] - mine[1], pool[2] - mine[2]];
    let mut r = [0; 2];
    r[proposer.index()] = value(&g.utilities[proposer.index()].values(), &mine);
    r[acceptor.index()] = value(&g.utilities[acceptor.index()].values(), &rest);
    r
}

/// Number of games out of `n` where the environment disagrees with the
/// brute-force reference on either payoffs or the joint optimum.
pub fn env_oracle_mismatches(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter(|_| {
            let g = random_terminal_game(&mut rng);
            let [ua, ub] = g.utilities;
            g.compute_rewards() != reference_rewards(&g)
                || joint_optimal_reward(&g.pool, &ua, &ub) != brute_force_optimum(&g.pool, &ua, &ub)
        })
        .count()
}

/// Poisson(7) pmf conditioned on `[4, 10]`.
pub fn truncated_poisson_pmf() -> [f64; 7] {
    let mut raw = [0.0; 7];
    for (i, n) in (4..=10).enumerate() {
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        raw[i] = (-7.0f64).exp() * 7f64.powi(n) / fact;
    }
    let z: f64 = raw.iter().sum();
    raw.map(|p| p / z)
}

/// Largest absolute gap between empirical and analytic pmf.
pub fn turn_limit_max_deviation(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 7];
    for _ in 0..samples {
        let n = sample_turn_limit(&mut rng);
        counts[(n - 4) as usize] += 1;
    }
    truncated_poisson_pmf()
        .iter()
        .zip(counts)
        .map(|(p, c)| (c as f64 / samples as f64 - p).abs())
        .fold(0.0, f64::max)
}

/// Plays the same game twice with actions that differ only in content the
/// channel hides, and counts pairs where the receiving agent's observations
/// or encoder states differ in any bit. Channels with both parts open are
/// skipped since nothing is hidden.
pub fn channel_leak_violations(pairs: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = AgentConfig {
        embed_dim: 8,
        hidden_dim: 8,
        id_embed_dim: 4,
        n_opponents: None,
        allow_dummy_symbol: true,
        variable_length: false,
    };
    let agent = AgentParams::<f32>::new(config, &mut rng);
    let closed = [Channel::Proposal, Channel::Linguistic, Channel::None];
    let mut bad = 0;
    for i in 0..pairs {
        let channel = closed[i % 3];
        let base = new_game(&mut rng, channel);
        let (mut g1, mut g2) = (base.clone(), base);
        let mut differs = false;
        for _ in 0..g1.turn_limit {
            let a1 = random_action(&mut rng, 0.0);
            let mut a2 = random_action(&mut rng, 0.0);
            if channel.linguistic_open() {
                a2.message = a1.message;
            }
            if channel.proposal_open() {
                a2.proposal = a1.proposal;
            }
            g1.step(&a1);
            g2.step(&a2);
            if g1.is_over() {
                break;
            }
            let receiver: Role = g1.actor();
            let o1 = Observation::from_state(&g1, receiver, None);
            let o2 = Observation::from_state(&g2, receiver, None);
            let h1 = agent.encode_turn(agent.encode_contexts(&[o1.item_context]).hidden(), &[o1]);
            let h2 = agent.encode_turn(agent.encode_contexts(&[o2.item_context]).hidden(), &[o2]);
            let bits = |h: &[f32]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            differs |= o1 != o2 || bits(h1.hidden().data()) != bits(h2.hidden().data());
        }
        // the hidden parts did differ, only their visibility is masked
        assert!(g1.history != g2.history);
        bad += usize::from(differs);
    }
    bad
}
