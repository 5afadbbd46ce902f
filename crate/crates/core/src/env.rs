//! Rules of the negotiation game.
//!
//! Two agents split a pool of three item types. Each has private per-item
//! utilities. They alternate turns (A on odd turns, B on even turns); on each
//! turn the acting agent either accepts the opponent's latest proposal or
//! sends a message and a proposal of its own. The horizon `N` is hidden from
//! the agents and reaching it without agreement pays nothing.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_ITEMS: usize = 3;
pub const MAX_ITEM_COUNT: u8 = 5;
pub const MAX_UTILITY: u8 = 10;
/// Symbols `0..VOCAB_SIZE`; symbol 0 doubles as the dummy/padding symbol.
pub const VOCAB_SIZE: usize = 11;
pub const UTTERANCE_LEN: usize = 6;
pub const DUMMY_SYMBOL: u8 = 0;
pub const MIN_TURN_LIMIT: u32 = 4;
pub const MAX_TURN_LIMIT: u32 = 10;
pub const TURN_LIMIT_MEAN: f64 = 7.0;

macro_rules! bounded_vector {
    ($(#[$meta:meta])* $name:ident, $len:expr, $max:expr, $what:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
        pub struct $name([u8; $len]);

        impl $name {
            pub fn new(values: [u8; $len]) -> Result<Self> {
                if let Some(v) = values.iter().find(|v| **v > $max) {
                    return Err(Error::Config(format!(
                        concat!($what, " element {} exceeds {}"),
                        v, $max
                    )));
                }
                Ok($name(values))
            }

            pub fn values(&self) -> [u8; $len] {
                self.0
            }
        }

        impl TryFrom<Vec<u8>> for $name {
            type Error = Error;

            fn try_from(v: Vec<u8>) -> Result<Self> {
                let arr: [u8; $len] = v.try_into().map_err(|v: Vec<u8>| {
                    Error::Config(format!(concat!($what, " needs {} elements, got {}"), $len, v.len()))
                })?;
                $name::new(arr)
            }
        }

        impl From<$name> for Vec<u8> {
            fn from(v: $name) -> Vec<u8> {
                v.0.to_vec()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", self.0)
            }
        }
    };
}

bounded_vector!(
    /// Item counts, each in `0..=5`.
    ItemPool, N_ITEMS, MAX_ITEM_COUNT, "item pool"
);
bounded_vector!(
    /// Items the proposer claims for itself, each in `0..=5`. Whether the
    /// claim fits the pool is only checked when the proposal is accepted.
    Proposal, N_ITEMS, MAX_ITEM_COUNT, "proposal"
);
bounded_vector!(
    /// A fixed-length utterance over the symbol vocabulary.
    Message, UTTERANCE_LEN, (VOCAB_SIZE - 1) as u8, "message"
);

/// Per-unit reward of each item type, each in `0..=10`, not all zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Utilities([u8; N_ITEMS]);

impl Utilities {
    pub fn new(values: [u8; N_ITEMS]) -> Result<Self> {
        if values.iter().any(|v| *v > MAX_UTILITY) {
            return Err(Error::Config(format!("utility out of range: {values:?}")));
        }
        if values.iter().all(|v| *v == 0) {
            return Err(Error::Config("utilities must not be all zero".into()));
        }
        Ok(Utilities(values))
    }

    pub fn values(&self) -> [u8; N_ITEMS] {
        self.0
    }
}

impl TryFrom<Vec<u8>> for Utilities {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        let arr: [u8; N_ITEMS] = v
            .try_into()
            .map_err(|_| Error::Config("utilities need 3 elements".into()))?;
        Utilities::new(arr)
    }
}

impl From<Utilities> for Vec<u8> {
    fn from(v: Utilities) -> Vec<u8> {
        v.0.to_vec()
    }
}

impl Message {
    pub fn dummy() -> Self {
        Message([DUMMY_SYMBOL; UTTERANCE_LEN])
    }

    pub fn is_dummy(&self) -> bool {
        self.0.iter().all(|s| *s == DUMMY_SYMBOL)
    }
}

impl ItemPool {
    pub fn total(&self) -> u32 {
        self.0.iter().map(|v| *v as u32).sum()
    }
}

impl Proposal {
    /// Every claim fits inside `pool`.
    pub fn fits(&self, pool: &ItemPool) -> bool {
        self.0.iter().zip(pool.0.iter()).all(|(p, i)| p <= i)
    }

    /// What the other side receives: `pool - self`. Requires `fits`.
    pub fn complement(&self, pool: &ItemPool) -> [u8; N_ITEMS] {
        let mut out = [0; N_ITEMS];
        for k in 0..N_ITEMS {
            out[k] = pool.0[k] - self.0[k];
        }
        out
    }
}

pub fn dot(u: &Utilities, items: &[u8; N_ITEMS]) -> u32 {
    u.0.iter().zip(items).map(|(a, b)| *a as u32 * *b as u32).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
}

impl Role {
    /// A acts on odd turns, B on even turns (turns count from 1).
    pub fn for_turn(turn: u32) -> Role {
        if turn % 2 == 1 {
            Role::A
        } else {
            Role::B
        }
    }

    pub fn opponent(self) -> Role {
        match self {
            Role::A => Role::B,
            Role::B => Role::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Role::A => 0,
            Role::B => 1,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::A => "A",
            Role::B => "B",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Role::A),
            "B" | "b" => Ok(Role::B),
            _ => Err(Error::Config(format!("unknown role {s:?}, expected A or B"))),
        }
    }
}

/// Which communication channels are open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Proposal,
    Linguistic,
    Both,
    None,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Proposal, Channel::Linguistic, Channel::Both, Channel::None];

    pub fn proposal_open(self) -> bool {
        matches!(self, Channel::Proposal | Channel::Both)
    }

    pub fn linguistic_open(self) -> bool {
        matches!(self, Channel::Linguistic | Channel::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Proposal => "proposal",
            Channel::Linguistic => "linguistic",
            Channel::Both => "both",
            Channel::None => "none",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown channel '{s}' (proposal|linguistic|both|none)")))
    }
}

/// `R = own * R_self + other * R_opponent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardScheme {
    pub own: f64,
    pub other: f64,
}

impl RewardScheme {
    pub const SELFISH: RewardScheme = RewardScheme { own: 1.0, other: 0.0 };
    pub const PROSOCIAL: RewardScheme = RewardScheme { own: 1.0, other: 1.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sociality {
    Selfish,
    Prosocial,
}

impl Sociality {
    pub fn scheme(self) -> RewardScheme {
        match self {
            Sociality::Selfish => RewardScheme::SELFISH,
            Sociality::Prosocial => RewardScheme::PROSOCIAL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sociality::Selfish => "selfish",
            Sociality::Prosocial => "prosocial",
        }
    }
}

impl std::str::FromStr for Sociality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "selfish" | "self" => Ok(Sociality::Selfish),
            "prosocial" | "pros" => Ok(Sociality::Prosocial),
            other => Err(Error::Config(format!("unknown sociality '{other}' (selfish|prosocial)"))),
        }
    }
}

/// How the horizon `N` of each game is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Poisson(7) conditioned on `4 <= N <= 10`.
    TruncatedPoisson,
    Fixed(u32),
}

/// One turn's action: accept flag, utterance and proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub terminate: bool,
    pub message: Message,
    pub proposal: Proposal,
}

/// Poisson(7) conditioned on `[4, 10]`, by rejection.
pub fn sample_turn_limit<R: Rng + ?Sized>(rng: &mut R) -> u32 {
    let poisson = Poisson::new(TURN_LIMIT_MEAN).expect("positive mean");
    loop {
        let n = poisson.sample(rng) as u32;
        if (MIN_TURN_LIMIT..=MAX_TURN_LIMIT).contains(&n) {
            return n;
        }
    }
}

fn sample_nonzero_pool<R: Rng + ?Sized>(rng: &mut R) -> ItemPool {
    loop {
        let v: [u8; N_ITEMS] = std::array::from_fn(|_| rng.gen_range(0..=MAX_ITEM_COUNT));
        // an empty pool leaves every scaling denominator at zero
        if v.iter().any(|c| *c > 0) {
            return ItemPool(v);
        }
    }
}

fn sample_utilities<R: Rng + ?Sized>(rng: &mut R) -> Utilities {
    loop {
        let v: [u8; N_ITEMS] = std::array::from_fn(|_| rng.gen_range(0..=MAX_UTILITY));
        if v.iter().any(|u| *u > 0) {
            return Utilities(v);
        }
    }
}

/// What the opponent gets to see of an action.
pub fn apply_channel_mask(channel: Channel, message: Message, proposal: Proposal) -> (Message, Option<Proposal>) {
    let visible_message = if channel.linguistic_open() { message } else { Message::dummy() };
    let visible_proposal = channel.proposal_open().then_some(proposal);
    (visible_message, visible_proposal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// `acceptor` took the opponent's latest proposal.
    Agreement { acceptor: Role },
    /// The horizon was reached without agreement.
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameState {
    pub pool: ItemPool,
    /// Indexed by [`Role::index`].
    pub utilities: [Utilities; 2],
    pub turn_limit: u32,
    pub turn: u32,
    pub channel: Channel,
    /// Raw latest proposal, used for rewards even if the channel hides it.
    pub last_proposal: Option<Proposal>,
    /// Latest proposal as the opponent sees it.
    pub visible_proposal: Option<Proposal>,
    /// Latest utterance as the opponent sees it.
    pub last_message: Option<Message>,
    pub outcome: Option<Outcome>,
    /// Actions as taken, with a coerced first-turn accept recorded as `false`.
    pub history: Vec<(Role, Action)>,
}

/// Samples a fresh game with a truncated-Poisson horizon.
pub fn new_game<R: Rng + ?Sized>(rng: &mut R, channel: Channel) -> GameState {
    new_game_with(rng, channel, Horizon::TruncatedPoisson)
}

pub fn new_game_with<R: Rng + ?Sized>(rng: &mut R, channel: Channel, horizon: Horizon) -> GameState {
    let pool = sample_nonzero_pool(rng);
    let ua = sample_utilities(rng);
    let ub = sample_utilities(rng);
    let turn_limit = match horizon {
        Horizon::TruncatedPoisson => sample_turn_limit(rng),
        Horizon::Fixed(n) => n,
    };
    GameState::new(pool, [ua, ub], turn_limit, channel)
}

impl GameState {
    pub fn new(pool: ItemPool, utilities: [Utilities; 2], turn_limit: u32, channel: Channel) -> Self {
        assert!(turn_limit >= 1, "turn limit must be positive");
        GameState {
            pool,
            utilities,
            turn_limit,
            turn: 1,
            channel,
            last_proposal: None,
            visible_proposal: None,
            last_message: None,
            outcome: None,
            history: Vec::new(),
        }
    }

    pub fn is_over(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn actor(&self) -> Role {
        Role::for_turn(self.turn)
    }

    /// Turns played so far, including the final one once the game is over.
    pub fn turns_taken(&self) -> u32 {
        self.history.len() as u32
    }

    /// The accepted proposal and its proposer, if the game ended in agreement.
    pub fn accepted(&self) -> Option<(Role, Proposal)> {
        match self.outcome {
            Some(Outcome::Agreement { acceptor }) => {
                Some((acceptor.opponent(), self.last_proposal.expect("agreement needs a proposal")))
            }
            _ => None,
        }
    }

    /// Applies the current actor's action.
    ///
    /// Accepting on turn 1 is coerced to a normal move since nothing has been
    /// proposed yet. Panics if the game is already over.
    pub fn step(&mut self, action: &Action) {
        assert!(!self.is_over(), "step on a finished game");
        assert!(self.turn <= self.turn_limit);
        let actor = self.actor();
        if action.terminate && self.turn >= 2 {
            self.history.push((actor, *action));
            self.outcome = Some(Outcome::Agreement { acceptor: actor });
            return;
        }
        let mut taken = *action;
        taken.terminate = false;
        self.history.push((actor, taken));
        let (msg, prop) = apply_channel_mask(self.channel, action.message, action.proposal);
        self.last_proposal = Some(action.proposal);
        self.visible_proposal = prop;
        self.last_message = Some(msg);
        if self.turn == self.turn_limit {
            self.outcome = Some(Outcome::Timeout);
        } else {
            self.turn += 1;
        }
    }

    /// Integer payoffs `[R_A, R_B]`. Panics before the game is over.
    pub fn compute_rewards(&self) -> [u32; 2] {
        let outcome = self.outcome.expect("rewards requested before the game is over");
        match outcome {
            Outcome::Timeout => [0, 0],
            Outcome::Agreement { acceptor } => {
                let proposer = acceptor.opponent();
                let p = self.last_proposal.expect("agreement needs a proposal");
                if !p.fits(&self.pool) {
                    return [0, 0];
                }
                let mut raw = [0; 2];
                raw[proposer.index()] = dot(&self.utilities[proposer.index()], &p.0);
                raw[acceptor.index()] = dot(&self.utilities[acceptor.index()], &p.complement(&self.pool));
                raw
            }
        }
    }

    /// Scaled score of `role` under `scheme`, in `[0, 1]`.
    ///
    /// The scale is the best achievable value of the scheme's objective:
    /// `Σ_k pool_k * max(own * u_self_k, other * u_opp_k)`. For the selfish
    /// scheme that is `u_self · pool`; for the prosocial scheme it is the joint
    /// optimum. A zero scale (nothing of value in the pool) scores zero.
    pub fn scaled_score(&self, raw: [u32; 2], role: Role, scheme: RewardScheme) -> f64 {
        let me = role.index();
        let them = role.opponent().index();
        let value = scheme.own * raw[me] as f64 + scheme.other * raw[them] as f64;
        let scale: f64 = (0..N_ITEMS)
            .map(|k| {
                let best = (scheme.own * self.utilities[me].0[k] as f64)
                    .max(scheme.other * self.utilities[them].0[k] as f64);
                self.pool.0[k] as f64 * best
            })
            .sum();
        if scale <= 0.0 {
            0.0
        } else {
            value / scale
        }
    }

    /// `[score_A, score_B]` with each agent under its own scheme.
    pub fn scale_rewards(&self, raw: [u32; 2], schemes: [RewardScheme; 2]) -> [f64; 2] {
        [
            self.scaled_score(raw, Role::A, schemes[0]),
            self.scaled_score(raw, Role::B, schemes[1]),
        ]
    }

    /// `(R_A + R_B) / joint optimum`, zero if the optimum is zero.
    pub fn joint_score(&self, raw: [u32; 2]) -> f64 {
        let best = joint_optimal_reward(&self.pool, &self.utilities[0], &self.utilities[1]);
        if best == 0 {
            0.0
        } else {
            (raw[0] + raw[1]) as f64 / best as f64
        }
    }

    /// Joint value of `proposal` by `proposer` relative to the optimum, zero
    /// for proposals that do not fit the pool.
    pub fn proposal_optimality(&self, proposal: &Proposal, proposer: Role) -> f64 {
        if !proposal.fits(&self.pool) {
            return 0.0;
        }
        let best = joint_optimal_reward(&self.pool, &self.utilities[0], &self.utilities[1]);
        if best == 0 {
            return 0.0;
        }
        let mine = dot(&self.utilities[proposer.index()], &proposal.0);
        let theirs = dot(&self.utilities[proposer.opponent().index()], &proposal.complement(&self.pool));
        (mine + theirs) as f64 / best as f64
    }
}

/// Best joint payoff: every item goes to whoever values it more.
pub fn joint_optimal_reward(pool: &ItemPool, ua: &Utilities, ub: &Utilities) -> u32 {
    (0..N_ITEMS)
        .map(|k| pool.0[k] as u32 * ua.0[k].max(ub.0[k]) as u32)
        .sum()
}
