//! The three experiment protocols: paired training under a random or fixed
//! horizon, and a fixed agent trained against a community of opponents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, AgentParams};
use crate::diffcore::{AdamConfig, Real};
use crate::env::{Channel, GameState, Horizon, Role, Sociality, MAX_TURN_LIMIT};
use crate::error::{Error, Result};
use crate::trainer::{
    evaluate, modal_length, proposal_optimality_by_turn, rollout_batch, sample_games, train_paired, EntropyWeights, Learner,
    MetricsRow, Progress, BASELINE_SMOOTHING, RunStreams, Seat, TrainConfig, Trajectory,
};

/// Mean, sample standard deviation and quartiles (linear interpolation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Stats {
            n,
            mean,
            std,
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Held-out results of one trained pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSeedResult {
    pub seed: u64,
    pub joint_optimality: f64,
    pub mean_turns: f64,
    pub agreement_rate: f64,
    pub mean_score_a: f64,
    pub mean_score_b: f64,
    /// `(turn, mean proposal optimality, proposals)`.
    pub proposal_optimality_by_turn: Vec<(u32, f64, usize)>,
    pub modal_length: Option<u32>,
}

impl PairedSeedResult {
    pub fn from_eval(seed: u64, trajs: &[Trajectory]) -> Self {
        let row = MetricsRow::from_trajectories(0, true, trajs);
        PairedSeedResult {
            seed,
            joint_optimality: row.joint_optimality,
            mean_turns: row.mean_turns,
            agreement_rate: row.agreement_rate,
            mean_score_a: row.mean_score_a,
            mean_score_b: row.mean_score_b,
            proposal_optimality_by_turn: proposal_optimality_by_turn(trajs),
            modal_length: modal_length(trajs),
        }
    }
}

/// One cell of the joint-reward table: statistics across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub sociality: [Sociality; 2],
    pub channel: Channel,
    pub horizon: Horizon,
    pub seeds: Vec<PairedSeedResult>,
    pub joint_optimality: Option<Stats>,
    pub mean_turns: Option<Stats>,
}

impl PairedSummary {
    pub fn new(config: &TrainConfig, seeds: Vec<PairedSeedResult>) -> Self {
        let joint: Vec<f64> = seeds.iter().map(|s| s.joint_optimality).collect();
        let turns: Vec<f64> = seeds.iter().map(|s| s.mean_turns).collect();
        PairedSummary {
            sociality: config.sociality,
            channel: config.channel,
            horizon: config.horizon,
            joint_optimality: Stats::of(&joint),
            mean_turns: Stats::of(&turns),
            seeds,
        }
    }

    /// `joint ± std (IQR) | turns ± std (IQR)`
    pub fn table_row(&self) -> String {
        let cell = |s: &Option<Stats>| match s {
            Some(s) => format!("{:.2} ± {:.2} (IQR {:.2})", s.mean, s.std, s.iqr()),
            None => "n/a".to_string(),
        };
        format!(
            "{}/{} {}: joint {} | turns {}",
            self.sociality[0].name(),
            self.sociality[1].name(),
            self.channel,
            cell(&self.joint_optimality),
            cell(&self.mean_turns)
        )
    }
}

/// Everything produced by one trained pair.
pub struct PairedSeedRun<T> {
    pub result: PairedSeedResult,
    pub learners: [Learner<T>; 2],
    pub final_eval: Vec<Trajectory>,
    pub metrics: Vec<MetricsRow>,
}

pub fn run_paired_seed<T: Real>(config: &TrainConfig, progress: impl FnMut(Progress<'_, T>)) -> PairedSeedRun<T> {
    let out = train_paired(config, progress);
    PairedSeedRun {
        result: PairedSeedResult::from_eval(config.seed, &out.final_eval),
        learners: out.learners,
        final_eval: out.final_eval,
        metrics: out.metrics,
    }
}

/// Trains one pair per seed and summarizes the held-out results.
pub fn run_paired<T: Real>(config: &TrainConfig, seeds: &[u64]) -> PairedSummary {
    let results = seeds
        .iter()
        .map(|&seed| run_paired_seed::<T>(&TrainConfig { seed, ..*config }, |_| {}).result)
        .collect();
    PairedSummary::new(config, results)
}

/// As [`run_paired`] with every game lasting up to the full ten turns.
pub fn run_paired_fixed_horizon<T: Real>(config: &TrainConfig, seeds: &[u64]) -> PairedSummary {
    let config = TrainConfig {
        horizon: Horizon::Fixed(MAX_TURN_LIMIT),
        ..*config
    };
    run_paired::<T>(&config, seeds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityConfig {
    pub agent: AgentConfig,
    pub channel: Channel,
    pub horizon: Horizon,
    pub community_size: usize,
    /// Members `0..n_prosocial` are prosocial, the rest selfish.
    pub n_prosocial: usize,
    pub fixed_role: Role,
    pub fixed_sociality: Sociality,
    /// Give the fixed agent a trainable embedding of its opponent's identity.
    pub ids: bool,
    pub batch_size: usize,
    pub episodes: u64,
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub test_batches: usize,
    pub test_batch_size: usize,
    pub entropy: EntropyWeights,
    pub baseline_smoothing: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        CommunityConfig {
            agent: AgentConfig::default(),
            channel: Channel::Proposal,
            horizon: Horizon::TruncatedPoisson,
            community_size: 10,
            n_prosocial: 5,
            fixed_role: Role::A,
            fixed_sociality: Sociality::Selfish,
            ids: true,
            batch_size: 128,
            episodes: 0,
            eval_interval: 50,
            eval_batches: 5,
            test_batches: 10,
            test_batch_size: 128,
            entropy: EntropyWeights::default(),
            baseline_smoothing: BASELINE_SMOOTHING,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl CommunityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.community_size == 0 {
            return Err(Error::Config("community_size must be positive".into()));
        }
        if self.n_prosocial == 0 || self.n_prosocial > self.community_size {
            return Err(Error::Config(format!(
                "n_prosocial must be in 1..={}, got {}",
                self.community_size, self.n_prosocial
            )));
        }
        Ok(())
    }

    pub fn member_sociality(&self, member: usize) -> Sociality {
        if member < self.n_prosocial {
            Sociality::Prosocial
        } else {
            Sociality::Selfish
        }
    }

    /// The fixed agent's objective in one game: its own scaled reward if
    /// selfish, the joint score if prosocial.
    pub fn fixed_objective(&self, t: &Trajectory) -> f64 {
        match self.fixed_sociality {
            Sociality::Selfish => t.scaled_scores[self.fixed_role.index()],
            Sociality::Prosocial => t.joint_score,
        }
    }
}

pub struct CommunityRun<T> {
    pub fixed: Learner<T>,
    pub members: Vec<Learner<T>>,
    /// How often each member was drawn for training.
    pub draws: Vec<u64>,
    pub metrics: Vec<MetricsRow>,
    /// Test games of the fixed agent against the prosocial members.
    pub test_games: Vec<Trajectory>,
    pub result: CommunitySeedResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunitySeedResult {
    pub seed: u64,
    /// Fixed agent objective over all test games.
    pub objective: Stats,
    pub joint_optimality: f64,
    pub agreement_rate: f64,
}

/// Trains a fixed agent against a community: each episode one member is
/// drawn uniformly, a batch is played and both agents are updated. Members
/// not drawn are untouched. Testing pits the fixed agent against the
/// prosocial members only, without updates.
pub fn run_community_seed<T: Real>(config: &CommunityConfig, mut progress: impl FnMut(Progress<'_, T>)) -> Result<CommunityRun<T>> {
    config.validate()?;
    let mut streams = RunStreams::new(config.seed);
    let fixed_agent = AgentConfig {
        n_opponents: config.ids.then_some(config.community_size),
        ..config.agent
    };
    let member_agent = AgentConfig {
        n_opponents: None,
        ..config.agent
    };
    let mut fixed = Learner::new(AgentParams::<T>::new(fixed_agent, &mut streams.init), config.adam).with_smoothing(config.baseline_smoothing);
    let mut members: Vec<Learner<T>> = (0..config.community_size)
        .map(|_| Learner::new(AgentParams::new(member_agent, &mut streams.init), config.adam).with_smoothing(config.baseline_smoothing))
        .collect();
    let held_out: Vec<Vec<GameState>> = (0..config.eval_batches)
        .map(|_| sample_games(&mut streams.held_out, config.batch_size, config.channel, config.horizon))
        .collect();
    let test_set: Vec<Vec<GameState>> = (0..config.test_batches)
        .map(|_| sample_games(&mut streams.held_out, config.test_batch_size, config.channel, config.horizon))
        .collect();

    let fixed_role = config.fixed_role;
    let member_role = fixed_role.opponent();
    // batch k of a held-out set is played against prosocial member k mod n
    let play_prosocial = |fixed: &Learner<T>, members: &[Learner<T>], sets: &[Vec<GameState>]| -> Vec<Trajectory> {
        sets.iter()
            .enumerate()
            .flat_map(|(k, games)| {
                let id = k % config.n_prosocial;
                evaluate(community_seats(config, fixed, &members[id], id), games)
            })
            .collect()
    };

    let mut metrics = Vec::new();
    let mut draws = vec![0u64; config.community_size];
    let row = MetricsRow::from_trajectories(0, true, &play_prosocial(&fixed, &members, &held_out));
    progress(Progress::Metrics(&row));
    metrics.push(row);
    for episode in 1..=config.episodes {
        let id = streams.games.gen_range(0..config.community_size);
        draws[id] += 1;
        let games = sample_games(&mut streams.games, config.batch_size, config.channel, config.horizon);
        let mut rngs = streams.game_rngs(config.batch_size);
        let rollout = rollout_batch(community_seats(config, &fixed, &members[id], id), games, &mut rngs, crate::agent::ActMode::Sample);
        let row = MetricsRow::from_trajectories(episode, false, &rollout.trajectories);
        progress(Progress::Metrics(&row));
        metrics.push(row);
        fixed.update(&rollout, fixed_role, config.entropy);
        members[id].update(&rollout, member_role, config.entropy);
        if episode % config.eval_interval == 0 || episode == config.episodes {
            let row = MetricsRow::from_trajectories(episode, true, &play_prosocial(&fixed, &members, &held_out));
            progress(Progress::Metrics(&row));
            metrics.push(row);
            let mut agents = vec![("fixed".to_string(), &fixed.params)];
            agents.extend(members.iter().enumerate().map(|(i, m)| (format!("member_{i}"), &m.params)));
            progress(Progress::Snapshot { episode, agents });
        }
    }

    let test_games = play_prosocial(&fixed, &members, &test_set);
    let objective: Vec<f64> = test_games.iter().map(|t| config.fixed_objective(t)).collect();
    let row = MetricsRow::from_trajectories(config.episodes, true, &test_games);
    let result = CommunitySeedResult {
        seed: config.seed,
        objective: Stats::of(&objective).ok_or_else(|| Error::Config("no test games".into()))?,
        joint_optimality: row.joint_optimality,
        agreement_rate: row.agreement_rate,
    };
    Ok(CommunityRun {
        fixed,
        members,
        draws,
        metrics,
        test_games,
        result,
    })
}

fn community_seats<'a, T>(config: &CommunityConfig, fixed: &'a Learner<T>, member: &'a Learner<T>, id: usize) -> [Seat<'a, T>; 2] {
    let mut s = [
        Seat {
            params: &fixed.params,
            opponent_id: config.ids.then_some(id),
            scheme: config.fixed_sociality.scheme(),
        },
        Seat {
            params: &member.params,
            opponent_id: None,
            scheme: config.member_sociality(id).scheme(),
        },
    ];
    if config.fixed_role == Role::B {
        s.swap(0, 1);
    }
    s
}

/// One cell of the community table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunitySummary {
    pub fixed_role: Role,
    pub fixed_sociality: Sociality,
    pub n_prosocial: usize,
    pub ids: bool,
    pub channel: Channel,
    pub seeds: Vec<CommunitySeedResult>,
    /// Across seeds, of each seed's mean objective.
    pub objective: Option<Stats>,
}

impl CommunitySummary {
    pub fn new(config: &CommunityConfig, seeds: Vec<CommunitySeedResult>) -> Self {
        let means: Vec<f64> = seeds.iter().map(|s| s.objective.mean).collect();
        CommunitySummary {
            fixed_role: config.fixed_role,
            fixed_sociality: config.fixed_sociality,
            n_prosocial: config.n_prosocial,
            ids: config.ids,
            channel: config.channel,
            objective: Stats::of(&means),
            seeds,
        }
    }

    pub fn table_row(&self) -> String {
        let cell = match &self.objective {
            Some(s) if s.n > 1 => format!("{:.2} ± {:.2}", s.mean, s.std),
            Some(_) => {
                let s = &self.seeds[0].objective;
                format!("{:.2} ± {:.2}", s.mean, s.std)
            }
            None => "n/a".to_string(),
        };
        format!(
            "{} fixed {}, {} prosocial, ids {}, {}: {}",
            self.fixed_sociality.name(),
            self.fixed_role,
            self.n_prosocial,
            if self.ids { "yes" } else { "no" },
            self.channel,
            cell
        )
    }
}

pub fn run_community<T: Real>(config: &CommunityConfig, seeds: &[u64]) -> Result<CommunitySummary> {
    let mut results = Vec::new();
    for &seed in seeds {
        results.push(run_community_seed::<T>(&CommunityConfig { seed, ..*config }, |_| {})?.result);
    }
    Ok(CommunitySummary::new(config, results))
}
