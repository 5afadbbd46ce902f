//! Batched self-play rollouts and REINFORCE with an exponentially smoothed
//! mean baseline and entropy regularization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, ActOptions, AgentConfig, AgentParams, ContextEncoding, Decision, Observation, PolicyStats, TurnCoefficients, TurnEncoding};
use crate::diffcore::{Adam, AdamConfig, Parameters, Real, Tensor};
use crate::env::{new_game_with, Action, Channel, GameState, Horizon, ItemPool, Outcome, RewardScheme, Role, Sociality, Utilities};

pub const BASELINE_SMOOTHING: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyWeights {
    pub term: f64,
    pub utt: f64,
    pub prop: f64,
}

impl Default for EntropyWeights {
    fn default() -> Self {
        EntropyWeights {
            term: 0.05,
            utt: 0.001,
            prop: 0.05,
        }
    }
}

/// `b <- s * b + (1 - s) * mean_reward`, starting from zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub smoothing: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline {
            value: 0.0,
            smoothing: BASELINE_SMOOTHING,
        }
    }
}

impl Baseline {
    pub fn update(&mut self, mean_reward: f64) {
        self.value = self.smoothing * self.value + self.mix() * mean_reward;
    }

    /// `1 - smoothing` rounded to nine decimals, so that 0.7 pairs with the
    /// double nearest 0.3 rather than `1.0 - 0.7 = 0.30000000000000004`.
    pub fn mix(&self) -> f64 {
        ((1.0 - self.smoothing) * 1e9).round() / 1e9
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: Role,
    pub action: Action,
    pub stats: PolicyStats,
}

/// One finished game.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub pool: ItemPool,
    pub utilities: [Utilities; 2],
    pub turn_limit: u32,
    pub channel: Channel,
    pub turns: Vec<TurnRecord>,
    pub outcome: Outcome,
    pub raw_rewards: [u32; 2],
    /// Each agent's reward under its own scheme.
    pub scaled_scores: [f64; 2],
    pub joint_score: f64,
    /// The accepted proposal's proposer and the proposal, if any.
    pub agreement: Option<(Role, crate::env::Proposal)>,
}

impl Trajectory {
    fn from_game(state: &GameState, stats: &[PolicyStats], schemes: [RewardScheme; 2]) -> Self {
        let raw = state.compute_rewards();
        let turns = state
            .history
            .iter()
            .zip(stats)
            .map(|((role, action), stats)| TurnRecord {
                role: *role,
                action: *action,
                stats: *stats,
            })
            .collect();
        Trajectory {
            pool: state.pool,
            utilities: state.utilities,
            turn_limit: state.turn_limit,
            channel: state.channel,
            turns,
            outcome: state.outcome.expect("finished game"),
            raw_rewards: raw,
            scaled_scores: state.scale_rewards(raw, schemes),
            joint_score: state.joint_score(raw),
            agreement: state.accepted(),
        }
    }

    pub fn is_agreement(&self) -> bool {
        matches!(self.outcome, Outcome::Agreement { .. })
    }

    /// Joint optimality of each non-accepting turn's proposal, in turn order.
    pub fn proposal_optimality(&self) -> Vec<f64> {
        let state = GameState::new(self.pool, self.utilities, self.turn_limit, self.channel);
        self.turns
            .iter()
            .filter(|t| !t.action.terminate)
            .map(|t| state.proposal_optimality(&t.action.proposal, t.role))
            .collect()
    }
}

/// An agent taking part in a batch of games.
#[derive(Clone, Copy)]
pub struct Seat<'a, T> {
    pub params: &'a AgentParams<T>,
    /// Opponent identity fed to agents with an ID table.
    pub opponent_id: Option<usize>,
    pub scheme: RewardScheme,
}

struct TurnTape<T> {
    role: Role,
    /// Batch rows that acted this turn.
    rows: Vec<usize>,
    enc: TurnEncoding<T>,
    dec: Decision<T>,
}

/// A played batch with everything needed to backpropagate through it.
pub struct Rollout<T> {
    pub trajectories: Vec<Trajectory>,
    tapes: Vec<TurnTape<T>>,
    contexts: [ContextEncoding<T>; 2],
}

/// Plays `games` to completion, all under the same channel.
///
/// `rngs` holds one random stream per game. When the linguistic channel is
/// closed no utterance is decoded: the message is all dummy symbols and adds
/// nothing to log-probabilities or entropies.
pub fn rollout_batch<T: Real, R: Rng>(seats: [Seat<'_, T>; 2], mut games: Vec<GameState>, rngs: &mut [R], mode: ActMode) -> Rollout<T> {
    let b = games.len();
    assert!(b >= 1, "empty batch");
    assert_eq!(rngs.len(), b, "one random stream per game");
    let channel = games[0].channel;
    assert!(games.iter().all(|g| g.channel == channel && !g.is_over()));

    let contexts = [Role::A, Role::B].map(|role| {
        let ctx: Vec<[u8; 6]> = games.iter().map(|g| crate::agent::item_context(g, role)).collect();
        seats[role.index()].params.encode_contexts(&ctx)
    });
    let mut stats: Vec<Vec<PolicyStats>> = vec![Vec::new(); b];
    let mut tapes = Vec::new();
    let mut turn = 1;
    loop {
        let rows: Vec<usize> = (0..b).filter(|g| !games[*g].is_over()).collect();
        if rows.is_empty() {
            break;
        }
        let role = Role::for_turn(turn);
        let seat = seats[role.index()];
        let obs: Vec<Observation> = rows
            .iter()
            .map(|g| Observation::from_state(&games[*g], role, seat.opponent_id))
            .collect();
        let ctx_h = contexts[role.index()].hidden().gather_rows(&rows);
        let enc = seat.params.encode_turn(&ctx_h, &obs);
        let mut sub: Vec<&mut R> = rngs
            .iter_mut()
            .enumerate()
            .filter(|(g, _)| !games[*g].is_over())
            .map(|(_, r)| r)
            .collect();
        let opts = ActOptions {
            mode,
            decode_utterance: channel.linguistic_open(),
            allow_terminate: turn >= 2,
        };
        let dec = seat.params.decide(enc.hidden(), &mut sub, opts);
        for (i, g) in rows.iter().enumerate() {
            games[*g].step(&dec.actions[i]);
            stats[*g].push(dec.stats[i]);
        }
        tapes.push(TurnTape { role, rows, enc, dec });
        turn += 1;
    }
    let schemes = [seats[0].scheme, seats[1].scheme];
    let trajectories = games
        .iter()
        .zip(&stats)
        .map(|(g, s)| Trajectory::from_game(g, s, schemes))
        .collect();
    Rollout {
        trajectories,
        tapes,
        contexts,
    }
}

impl<T: Real> Rollout<T> {
    /// Adds the gradient of the batch-mean loss
    /// `-(R - b) log π(τ) - Σ λ_x H_x` over `role`'s turns into `grad`.
    /// The accept decision on turn 1 is forced and contributes nothing.
    pub fn accumulate_gradient(
        &self,
        params: &AgentParams<T>,
        role: Role,
        advantages: &[f64],
        weights: EntropyWeights,
        grad: &mut AgentParams<T>,
    ) {
        let b = self.trajectories.len();
        assert_eq!(advantages.len(), b);
        let inv = 1.0 / b as f64;
        let mut dctx = Tensor::zeros(&[b, params.hidden_dim()]);
        for tape in self.tapes.iter().filter(|t| t.role == role) {
            let coefs: Vec<TurnCoefficients<T>> = tape
                .rows
                .iter()
                .map(|g| TurnCoefficients {
                    log_prob: T::lit(-advantages[*g] * inv),
                    entropy_term: T::lit(-weights.term * inv),
                    entropy_utt: T::lit(-weights.utt * inv),
                    entropy_prop: T::lit(-weights.prop * inv),
                })
                .collect();
            let d = params.backward_turn(&tape.enc, &tape.dec, &coefs, grad);
            dctx.scatter_add_rows(&tape.rows, &d);
        }
        params.backward_contexts(&self.contexts[role.index()], &dctx, grad);
    }
}

/// An agent with its optimizer and baseline.
#[derive(Clone, Debug)]
pub struct Learner<T> {
    pub params: AgentParams<T>,
    pub adam: Adam<T>,
    pub baseline: Baseline,
    grads: AgentParams<T>,
}

impl<T: Real> Learner<T> {
    pub fn new(params: AgentParams<T>, adam: AdamConfig) -> Self {
        Learner {
            grads: params.zeros_like(),
            params,
            adam: Adam::new(adam),
            baseline: Baseline::default(),
        }
    }

    pub fn with_smoothing(mut self, smoothing: f64) -> Self {
        self.baseline.smoothing = smoothing;
        self
    }

    /// One REINFORCE step for the agent that sat in `role`. The baseline is
    /// updated with the batch-mean reward after the gradient is taken.
    pub fn update(&mut self, rollout: &Rollout<T>, role: Role, weights: EntropyWeights) {
        let rewards: Vec<f64> = rollout.trajectories.iter().map(|t| t.scaled_scores[role.index()]).collect();
        let advantages: Vec<f64> = rewards.iter().map(|r| r - self.baseline.value).collect();
        self.grads.zero();
        rollout.accumulate_gradient(&self.params, role, &advantages, weights, &mut self.grads);
        self.adam.step(&mut self.params, &self.grads);
        self.baseline.update(rewards.iter().sum::<f64>() / rewards.len() as f64);
    }

    pub fn gradient(&self) -> &AgentParams<T> {
        &self.grads
    }
}

/// Summary of a batch of games, one row of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: u64,
    /// 1 for greedy evaluation on the held-out games, 0 for training batches.
    pub eval_flag: u8,
    pub mean_score_a: f64,
    pub mean_score_b: f64,
    pub joint_optimality: f64,
    pub mean_turns: f64,
    pub agreement_rate: f64,
    pub entropy_term: f64,
    pub entropy_utt: f64,
    pub entropy_prop: f64,
}

impl MetricsRow {
    pub fn from_trajectories(episode: u64, eval: bool, trajs: &[Trajectory]) -> Self {
        let n = trajs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&Trajectory) -> f64| trajs.iter().map(f).sum::<f64>() / n;
        let turns: Vec<&TurnRecord> = trajs.iter().flat_map(|t| &t.turns).collect();
        let nt = turns.len().max(1) as f64;
        let turn_mean = |f: &dyn Fn(&PolicyStats) -> f64| turns.iter().map(|t| f(&t.stats)).sum::<f64>() / nt;
        MetricsRow {
            episode,
            eval_flag: eval as u8,
            mean_score_a: mean(&|t| t.scaled_scores[0]),
            mean_score_b: mean(&|t| t.scaled_scores[1]),
            joint_optimality: mean(&|t| t.joint_score),
            mean_turns: mean(&|t| t.turns.len() as f64),
            agreement_rate: mean(&|t| t.is_agreement() as u8 as f64),
            entropy_term: turn_mean(&|s| s.entropy_term),
            entropy_utt: turn_mean(&|s| s.entropy_utt),
            entropy_prop: turn_mean(&|s| s.entropy_prop),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub agent: AgentConfig,
    pub channel: Channel,
    pub horizon: Horizon,
    /// Reward schemes of agents A and B.
    pub sociality: [Sociality; 2],
    pub batch_size: usize,
    pub episodes: u64,
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub entropy: EntropyWeights,
    pub baseline_smoothing: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            agent: AgentConfig::default(),
            channel: Channel::Proposal,
            horizon: Horizon::TruncatedPoisson,
            sociality: [Sociality::Selfish; 2],
            batch_size: 128,
            episodes: 0,
            eval_interval: 50,
            eval_batches: 5,
            entropy: EntropyWeights::default(),
            baseline_smoothing: BASELINE_SMOOTHING,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Independent random streams of one training run.
pub struct RunStreams {
    /// Parameter initialization.
    pub init: ChaCha8Rng,
    /// Training games.
    pub games: ChaCha8Rng,
    /// Seeds for the per-game action streams.
    pub actions: ChaCha8Rng,
    /// The held-out evaluation games.
    pub held_out: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        RunStreams {
            init: stream(0),
            games: stream(1),
            actions: stream(2),
            held_out: stream(3),
        }
    }

    pub fn game_rngs(&mut self, n: usize) -> Vec<ChaCha8Rng> {
        (0..n).map(|_| ChaCha8Rng::seed_from_u64(self.actions.gen())).collect()
    }
}

pub fn sample_games<R: Rng + ?Sized>(rng: &mut R, n: usize, channel: Channel, horizon: Horizon) -> Vec<GameState> {
    (0..n).map(|_| new_game_with(rng, channel, horizon)).collect()
}

/// Greedy play on fixed games; no parameters change.
pub fn evaluate<T: Real>(seats: [Seat<'_, T>; 2], games: &[GameState]) -> Vec<Trajectory> {
    let mut rngs: Vec<ChaCha8Rng> = (0..games.len()).map(|_| ChaCha8Rng::seed_from_u64(0)).collect();
    rollout_batch(seats, games.to_vec(), &mut rngs, ActMode::Greedy).trajectories
}

pub enum Progress<'a, T> {
    Metrics(&'a MetricsRow),
    /// Emitted after every evaluation past episode 0, with each agent under
    /// its checkpoint name.
    Snapshot {
        episode: u64,
        agents: Vec<(String, &'a AgentParams<T>)>,
    },
}

pub struct PairedOutcome<T> {
    pub learners: [Learner<T>; 2],
    /// Greedy play on the held-out games after the last episode.
    pub final_eval: Vec<Trajectory>,
    pub metrics: Vec<MetricsRow>,
}

/// Trains agents A and B against each other, updating both every episode.
pub fn train_paired<T: Real>(config: &TrainConfig, mut progress: impl FnMut(Progress<'_, T>)) -> PairedOutcome<T> {
    let mut streams = RunStreams::new(config.seed);
    let schemes = config.sociality.map(Sociality::scheme);
    let mut learners = [0, 1].map(|_| Learner::new(AgentParams::new(config.agent, &mut streams.init), config.adam).with_smoothing(config.baseline_smoothing));
    let held_out: Vec<Vec<GameState>> = (0..config.eval_batches)
        .map(|_| sample_games(&mut streams.held_out, config.batch_size, config.channel, config.horizon))
        .collect();
    let mut metrics = Vec::new();

    let run_eval = |learners: &[Learner<T>; 2], episode: u64| {
        let seats = seats_for(learners, schemes);
        let trajs: Vec<Trajectory> = held_out.iter().flat_map(|games| evaluate(seats, games)).collect();
        (MetricsRow::from_trajectories(episode, true, &trajs), trajs)
    };

    let (row, mut last_eval) = run_eval(&learners, 0);
    progress(Progress::Metrics(&row));
    metrics.push(row);
    for episode in 1..=config.episodes {
        let games = sample_games(&mut streams.games, config.batch_size, config.channel, config.horizon);
        let mut rngs = streams.game_rngs(config.batch_size);
        let rollout = rollout_batch(seats_for(&learners, schemes), games, &mut rngs, ActMode::Sample);
        let row = MetricsRow::from_trajectories(episode, false, &rollout.trajectories);
        progress(Progress::Metrics(&row));
        metrics.push(row);
        let [a, b] = &mut learners;
        a.update(&rollout, Role::A, config.entropy);
        b.update(&rollout, Role::B, config.entropy);
        if episode % config.eval_interval == 0 || episode == config.episodes {
            let (row, trajs) = run_eval(&learners, episode);
            progress(Progress::Metrics(&row));
            metrics.push(row);
            last_eval = trajs;
            progress(Progress::Snapshot {
                episode,
                agents: vec![
                    ("agent_a".to_string(), &learners[0].params),
                    ("agent_b".to_string(), &learners[1].params),
                ],
            });
        }
    }
    PairedOutcome {
        learners,
        final_eval: last_eval,
        metrics,
    }
}

fn seats_for<T>(learners: &[Learner<T>; 2], schemes: [RewardScheme; 2]) -> [Seat<'_, T>; 2] {
    [0, 1].map(|i| Seat {
        params: &learners[i].params,
        opponent_id: None,
        scheme: schemes[i],
    })
}

/// Mean proposal optimality per turn index (1-based position in the game)
/// with the number of proposals averaged.
pub fn proposal_optimality_by_turn(trajs: &[Trajectory]) -> Vec<(u32, f64, usize)> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for t in trajs {
        for (k, v) in t.proposal_optimality().into_iter().enumerate() {
            if sums.len() <= k {
                sums.resize(k + 1, (0.0, 0));
            }
            sums[k].0 += v;
            sums[k].1 += 1;
        }
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(k, (s, n))| (k as u32 + 1, s / n as f64, n))
        .collect()
}

/// Most common game length; ties go to the shorter length.
pub fn modal_length(trajs: &[Trajectory]) -> Option<u32> {
    let mut counts = std::collections::BTreeMap::new();
    for t in trajs {
        *counts.entry(t.turns.len() as u32).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(len, _)| len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            agent: AgentConfig {
                embed_dim: 6,
                hidden_dim: 5,
                id_embed_dim: 4,
                ..AgentConfig::default()
            },
            batch_size: 8,
            episodes: 3,
            eval_interval: 2,
            eval_batches: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn baseline_recursion() {
        let mut b = Baseline::default();
        assert_eq!(b.mix(), 0.3);
        b.update(1.0);
        assert_eq!(b.value, 0.3);
        b.update(0.5);
        assert_eq!(b.value, 0.7 * 0.3 + 0.3 * 0.5);
    }

    #[test]
    fn zero_episodes_emit_initial_evaluation_only() {
        let cfg = TrainConfig { episodes: 0, ..tiny() };
        let out = train_paired::<f32>(&cfg, |_| {});
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].eval_flag, 1);
        assert_eq!(out.metrics[0].episode, 0);
        assert_eq!(out.final_eval.len(), 16);
    }

    #[test]
    fn evaluation_schedule() {
        let out = train_paired::<f32>(&tiny(), |_| {});
        let evals: Vec<u64> = out.metrics.iter().filter(|m| m.eval_flag == 1).map(|m| m.episode).collect();
        assert_eq!(evals, vec![0, 2, 3]);
        assert_eq!(out.metrics.len(), 6);
        assert_eq!(out.learners[0].adam.steps(), 3);
        assert_eq!(out.learners[1].adam.steps(), 3);
    }

    #[test]
    fn games_end_within_horizon_and_alternate() {
        let mut streams = RunStreams::new(4);
        let cfg = tiny();
        let a = AgentParams::<f32>::new(cfg.agent, &mut streams.init);
        let b = AgentParams::<f32>::new(cfg.agent, &mut streams.init);
        let seats = [&a, &b].map(|p| Seat {
            params: p,
            opponent_id: None,
            scheme: RewardScheme::SELFISH,
        });
        let games = sample_games(&mut streams.games, 32, Channel::Both, Horizon::TruncatedPoisson);
        let mut rngs = streams.game_rngs(32);
        let r = rollout_batch(seats, games, &mut rngs, ActMode::Sample);
        for t in &r.trajectories {
            assert!(!t.turns.is_empty() && t.turns.len() as u32 <= t.turn_limit);
            for (k, turn) in t.turns.iter().enumerate() {
                assert_eq!(turn.role, Role::for_turn(k as u32 + 1));
            }
            assert!(!t.turns[0].action.terminate);
            assert_eq!(t.turns[0].stats.log_prob_term, 0.0);
        }
    }

    #[test]
    fn closed_linguistic_channel_skips_decoding() {
        let mut streams = RunStreams::new(5);
        let cfg = tiny();
        let a = AgentParams::<f32>::new(cfg.agent, &mut streams.init);
        let seats = [Seat {
            params: &a,
            opponent_id: None,
            scheme: RewardScheme::PROSOCIAL,
        }; 2];
        let games = sample_games(&mut streams.games, 8, Channel::Proposal, Horizon::Fixed(10));
        let mut rngs = streams.game_rngs(8);
        let r = rollout_batch(seats, games, &mut rngs, ActMode::Sample);
        for t in &r.trajectories {
            for turn in &t.turns {
                assert!(turn.action.message.is_dummy());
                assert_eq!(turn.stats.entropy_utt, 0.0);
            }
        }
    }

    #[test]
    fn zero_advantage_without_entropy_changes_nothing() {
        let mut streams = RunStreams::new(6);
        let cfg = tiny();
        let params = AgentParams::<f64>::new(cfg.agent, &mut streams.init);
        let seats = [Seat {
            params: &params,
            opponent_id: None,
            scheme: RewardScheme::SELFISH,
        }; 2];
        let games = sample_games(&mut streams.games, 8, Channel::Both, Horizon::TruncatedPoisson);
        let mut rngs = streams.game_rngs(8);
        let r = rollout_batch(seats, games, &mut rngs, ActMode::Sample);
        let mut grad = params.zeros_like();
        let zero = EntropyWeights {
            term: 0.0,
            utt: 0.0,
            prop: 0.0,
        };
        r.accumulate_gradient(&params, Role::A, &[0.0; 8], zero, &mut grad);
        assert!(grad.flat().iter().all(|g| *g == 0.0));
        let mut learner = Learner::new(params.clone(), AdamConfig::default());
        learner.adam.step(&mut learner.params, &grad);
        assert_eq!(learner.params, params);
    }

    #[test]
    fn modal_length_prefers_shorter_on_ties() {
        let mut streams = RunStreams::new(7);
        let cfg = tiny();
        let a = AgentParams::<f32>::new(cfg.agent, &mut streams.init);
        let seats = [Seat {
            params: &a,
            opponent_id: None,
            scheme: RewardScheme::SELFISH,
        }; 2];
        let games = sample_games(&mut streams.games, 16, Channel::Both, Horizon::TruncatedPoisson);
        let trajs = evaluate(seats, &games);
        let m = modal_length(&trajs).unwrap();
        let count = |l: u32| trajs.iter().filter(|t| t.turns.len() as u32 == l).count();
        for l in 1..=10 {
            assert!(count(l) < count(m) || (count(l) == count(m) && l >= m));
        }
    }
}
