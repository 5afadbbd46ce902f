//! The negotiating agent.
//!
//! Each turn the agent re-encodes its observation: the item context
//! (pool then own utilities) through one LSTM, the opponent's last utterance
//! through a second and the opponent's last proposal through a third. The
//! three final hidden states (plus an opponent-ID embedding when enabled) go
//! through a ReLU layer to give the hidden state `h`, from which three
//! policies act: a Bernoulli accept head, an LSTM utterance decoder seeded
//! with `h`, and one categorical head per item type for the proposal.
//!
//! Everything is batched over games; rows of a batch are independent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bernoulli, Categorical, Embedding, Linear, Lstm, LstmStep, Parameters, Real, Tensor};
use crate::env::{
    Action, GameState, Message, Proposal, Role, DUMMY_SYMBOL, MAX_ITEM_COUNT, MAX_UTILITY, N_ITEMS,
    UTTERANCE_LEN, VOCAB_SIZE,
};

/// Rows of the numeric embedding table: values `0..=10`.
pub const NUMERIC_VOCAB: usize = MAX_UTILITY as usize + 1;
/// Item context length: three pool counts then three utilities.
pub const CONTEXT_LEN: usize = 2 * N_ITEMS;
const PROPOSAL_CLASSES: usize = MAX_ITEM_COUNT as usize + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub id_embed_dim: usize,
    /// Size of the opponent-ID table; `None` removes the ID pathway entirely.
    pub n_opponents: Option<usize>,
    /// Whether symbol 0 may be generated inside utterances.
    pub allow_dummy_symbol: bool,
    /// Treat an emitted symbol 0 as end of utterance and pad the rest.
    pub variable_length: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            embed_dim: 100,
            hidden_dim: 100,
            id_embed_dim: 100,
            n_opponents: None,
            allow_dummy_symbol: true,
            variable_length: false,
        }
    }
}

/// All trainable tensors of one agent. Gradient buffers share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams<T> {
    pub config: AgentConfig,
    /// Shared by item context and proposals.
    pub numeric_embedding: Embedding<T>,
    /// Shared by the message encoder and the utterance decoder input.
    pub utterance_embedding: Embedding<T>,
    pub context_encoder: Lstm<T>,
    pub message_encoder: Lstm<T>,
    pub proposal_encoder: Lstm<T>,
    pub combiner: Linear<T>,
    pub termination_head: Linear<T>,
    pub proposal_heads: Vec<Linear<T>>,
    pub utterance_decoder: Lstm<T>,
    pub utterance_output: Linear<T>,
    pub opponent_embedding: Option<Embedding<T>>,
}

impl<T: Real> AgentParams<T> {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, rng: &mut R) -> Self {
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let id_width = config.n_opponents.map_or(0, |_| config.id_embed_dim);
        AgentParams {
            config,
            numeric_embedding: Embedding::new(NUMERIC_VOCAB, e, rng),
            utterance_embedding: Embedding::new(VOCAB_SIZE, e, rng),
            context_encoder: Lstm::new(e, h, rng),
            message_encoder: Lstm::new(e, h, rng),
            proposal_encoder: Lstm::new(e, h, rng),
            combiner: Linear::new(3 * h + id_width, h, rng),
            termination_head: Linear::new(h, 1, rng),
            proposal_heads: (0..N_ITEMS).map(|_| Linear::new(h, PROPOSAL_CLASSES, rng)).collect(),
            utterance_decoder: Lstm::new(e, h, rng),
            utterance_output: Linear::new(h, VOCAB_SIZE, rng),
            opponent_embedding: config.n_opponents.map(|n| Embedding::new(n, config.id_embed_dim, rng)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// The trainable embedding row for opponent `id`.
    pub fn opponent_embedding(&self, id: usize) -> Tensor<T> {
        self.opponent_embedding
            .as_ref()
            .expect("agent has no opponent-ID table")
            .lookup(&[id])
    }
}

impl<T: Real> Parameters<T> for AgentParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        let p = |name: &str| crate::diffcore::join(prefix, name);
        self.numeric_embedding.visit(&p("embed_numeric"), f);
        self.utterance_embedding.visit(&p("embed_utterance"), f);
        self.context_encoder.visit(&p("encoder_ctx"), f);
        self.message_encoder.visit(&p("encoder_msg"), f);
        self.proposal_encoder.visit(&p("encoder_prop"), f);
        self.combiner.visit(&p("combiner"), f);
        self.termination_head.visit(&p("head_term"), f);
        for (k, head) in self.proposal_heads.iter().enumerate() {
            head.visit(&p(&format!("head_prop_{k}")), f);
        }
        self.utterance_decoder.visit(&p("decoder_utt"), f);
        self.utterance_output.visit(&p("decoder_out"), f);
        if let Some(ids) = &self.opponent_embedding {
            ids.visit(&p("opponent_ids"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let p = |name: &str| crate::diffcore::join(prefix, name);
        self.numeric_embedding.visit_mut(&p("embed_numeric"), f);
        self.utterance_embedding.visit_mut(&p("embed_utterance"), f);
        self.context_encoder.visit_mut(&p("encoder_ctx"), f);
        self.message_encoder.visit_mut(&p("encoder_msg"), f);
        self.proposal_encoder.visit_mut(&p("encoder_prop"), f);
        self.combiner.visit_mut(&p("combiner"), f);
        self.termination_head.visit_mut(&p("head_term"), f);
        for (k, head) in self.proposal_heads.iter_mut().enumerate() {
            head.visit_mut(&p(&format!("head_prop_{k}")), f);
        }
        self.utterance_decoder.visit_mut(&p("decoder_utt"), f);
        self.utterance_output.visit_mut(&p("decoder_out"), f);
        if let Some(ids) = &mut self.opponent_embedding {
            ids.visit_mut(&p("opponent_ids"), f);
        }
    }

    fn zeros_like(&self) -> Self {
        AgentParams {
            config: self.config,
            numeric_embedding: self.numeric_embedding.zeros_like(),
            utterance_embedding: self.utterance_embedding.zeros_like(),
            context_encoder: self.context_encoder.zeros_like(),
            message_encoder: self.message_encoder.zeros_like(),
            proposal_encoder: self.proposal_encoder.zeros_like(),
            combiner: self.combiner.zeros_like(),
            termination_head: self.termination_head.zeros_like(),
            proposal_heads: self.proposal_heads.iter().map(|h| h.zeros_like()).collect(),
            utterance_decoder: self.utterance_decoder.zeros_like(),
            utterance_output: self.utterance_output.zeros_like(),
            opponent_embedding: self.opponent_embedding.as_ref().map(|e| e.zeros_like()),
        }
    }
}

/// What one agent sees on its turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    /// Pool counts followed by the agent's own utilities.
    pub item_context: [u8; CONTEXT_LEN],
    pub prev_message: Message,
    /// `None` before any proposal or when the proposal channel is closed;
    /// the network then sees `[0, 0, 0]`.
    pub prev_proposal: Option<Proposal>,
    pub opponent_id: Option<usize>,
}

impl Observation {
    /// Builds `role`'s view of `state`. Only public information and the
    /// agent's own utilities are read.
    pub fn from_state(state: &GameState, role: Role, opponent_id: Option<usize>) -> Self {
        Observation {
            item_context: item_context(state, role),
            prev_message: state.last_message.unwrap_or_else(Message::dummy),
            prev_proposal: state.visible_proposal,
            opponent_id,
        }
    }

    fn proposal_tokens(&self) -> [u8; N_ITEMS] {
        self.prev_proposal.map_or([0; N_ITEMS], |p| p.values())
    }
}

pub fn item_context(state: &GameState, role: Role) -> [u8; CONTEXT_LEN] {
    let mut ctx = [0; CONTEXT_LEN];
    ctx[..N_ITEMS].copy_from_slice(&state.pool.values());
    ctx[N_ITEMS..].copy_from_slice(&state.utilities[role.index()].values());
    ctx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Clone, Copy, Debug)]
pub struct ActOptions {
    pub mode: ActMode,
    /// Run the utterance decoder. When off the message is all dummy symbols
    /// and contributes nothing to log-probabilities or entropies.
    pub decode_utterance: bool,
    /// When off (first turn) the accept head is not consulted.
    pub allow_terminate: bool,
}

/// Log-probabilities of the chosen actions and entropies of the policies
/// for one agent turn. Utterance and proposal terms are sums over symbols
/// and items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub log_prob_term: f64,
    pub log_prob_utt: f64,
    pub log_prob_prop: f64,
    pub entropy_term: f64,
    pub entropy_utt: f64,
    pub entropy_prop: f64,
}

impl PolicyStats {
    pub fn log_prob(&self) -> f64 {
        self.log_prob_term + self.log_prob_utt + self.log_prob_prop
    }

    pub fn entropy(&self) -> f64 {
        self.entropy_term + self.entropy_utt + self.entropy_prop
    }
}

/// An LSTM run over token sequences, possibly collapsed to one row when
/// every row of the batch holds the same sequence.
#[derive(Debug)]
struct SequenceEncoding<T> {
    /// `tokens[position][row]`
    tokens: Vec<Vec<usize>>,
    steps: Vec<LstmStep<T>>,
    shared: bool,
    rows: usize,
}

impl<T: Real> SequenceEncoding<T> {
    fn run(lstm: &Lstm<T>, table: &Embedding<T>, seqs: &[Vec<usize>]) -> Self {
        let rows = seqs.len();
        let shared = rows > 1 && seqs.iter().all(|s| *s == seqs[0]);
        let used = if shared { &seqs[..1] } else { seqs };
        let len = used[0].len();
        let tokens: Vec<Vec<usize>> = (0..len).map(|k| used.iter().map(|s| s[k]).collect()).collect();
        for &t in tokens.iter().flatten() {
            assert!(t < table.rows(), "token {t} out of range {}", table.rows());
        }
        let proj = lstm.project_table(table);
        SequenceEncoding {
            steps: lstm.encode_tokens(&proj, &tokens),
            tokens,
            shared,
            rows,
        }
    }

    fn final_h(&self) -> Tensor<T> {
        let h = self.steps.last().expect("non-empty sequence").h();
        if self.shared {
            h.gather_rows(&vec![0; self.rows])
        } else {
            h.clone()
        }
    }

    fn backward(&self, lstm: &Lstm<T>, table: &Embedding<T>, dh: &Tensor<T>, lstm_grad: &mut Lstm<T>, table_grad: &mut Embedding<T>) {
        let dh = if self.shared {
            let mut sum = Tensor::zeros(&[1, dh.cols()]);
            sum.scatter_add_rows(&vec![0; dh.rows()], dh);
            sum
        } else {
            dh.clone()
        };
        let g = lstm.backward_final(&self.steps, &dh, lstm_grad);
        lstm.backward_tokens(table, &self.tokens, &g.dgates, lstm_grad, table_grad);
    }
}

/// Encoded item contexts for a batch of games. Contexts are fixed for a
/// whole game, so they are encoded once and the gradient arriving at their
/// hidden state is accumulated across turns before backpropagating.
#[derive(Debug)]
pub struct ContextEncoding<T> {
    enc: SequenceEncoding<T>,
    hidden: Tensor<T>,
}

impl<T: Real> ContextEncoding<T> {
    /// `[games, H]`
    pub fn hidden(&self) -> &Tensor<T> {
        &self.hidden
    }
}

/// Forward pass of the observation encoder for one turn.
#[derive(Debug)]
pub struct TurnEncoding<T> {
    message: SequenceEncoding<T>,
    proposal: SequenceEncoding<T>,
    ids: Option<Vec<usize>>,
    combiner_input: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Real> TurnEncoding<T> {
    /// Agent hidden state `h_t`, `[rows, H]`.
    pub fn hidden(&self) -> &Tensor<T> {
        &self.hidden
    }
}

#[derive(Debug)]
struct UtteranceDecoding<T> {
    /// Input symbol per position and row (position 0 is the dummy).
    inputs: Vec<Vec<usize>>,
    steps: Vec<LstmStep<T>>,
    /// `dists[position][row]`
    dists: Vec<Vec<Categorical<T>>>,
    /// Whether the row was still emitting at each position.
    alive: Vec<Vec<bool>>,
}

/// Sampled (or greedy) actions for a batch of rows plus what backward needs.
#[derive(Debug)]
pub struct Decision<T> {
    pub actions: Vec<Action>,
    pub stats: Vec<PolicyStats>,
    allow_terminate: bool,
    term: Vec<Bernoulli<T>>,
    term_input: Tensor<T>,
    props: Vec<[Categorical<T>; N_ITEMS]>,
    utterance: Option<UtteranceDecoding<T>>,
}

enum Pick<'a, R> {
    Sample(&'a mut [R]),
    Greedy,
    Forced(&'a [Action]),
}

impl<R: Rng> Pick<'_, R> {
    fn terminate<T: Real>(&mut self, row: usize, d: &Bernoulli<T>) -> bool {
        match self {
            Pick::Sample(rngs) => d.sample(&mut rngs[row]),
            Pick::Greedy => d.argmax(),
            Pick::Forced(actions) => actions[row].terminate,
        }
    }

    fn symbol<T: Real>(&mut self, row: usize, pos: usize, d: &Categorical<T>) -> usize {
        match self {
            Pick::Sample(rngs) => d.sample(&mut rngs[row]),
            Pick::Greedy => d.argmax(),
            Pick::Forced(actions) => actions[row].message.values()[pos] as usize,
        }
    }

    fn item<T: Real>(&mut self, row: usize, k: usize, d: &Categorical<T>) -> usize {
        match self {
            Pick::Sample(rngs) => d.sample(&mut rngs[row]),
            Pick::Greedy => d.argmax(),
            Pick::Forced(actions) => actions[row].proposal.values()[k] as usize,
        }
    }
}

/// Loss coefficients for one row's turn: the loss gradient is
/// `log_prob * d log π(a) + Σ_policy entropy_x * d H_x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TurnCoefficients<T> {
    pub log_prob: T,
    pub entropy_term: T,
    pub entropy_utt: T,
    pub entropy_prop: T,
}

impl<T: Real> AgentParams<T> {
    pub fn encode_contexts(&self, contexts: &[[u8; CONTEXT_LEN]]) -> ContextEncoding<T> {
        let seqs: Vec<Vec<usize>> = contexts.iter().map(|c| c.iter().map(|v| *v as usize).collect()).collect();
        let enc = SequenceEncoding::run(&self.context_encoder, &self.numeric_embedding, &seqs);
        let hidden = enc.final_h();
        ContextEncoding { enc, hidden }
    }

    pub fn backward_contexts(&self, ctx: &ContextEncoding<T>, dh: &Tensor<T>, grad: &mut AgentParams<T>) {
        ctx.enc.backward(
            &self.context_encoder,
            &self.numeric_embedding,
            dh,
            &mut grad.context_encoder,
            &mut grad.numeric_embedding,
        );
    }

    /// `h = ReLU(W [h_ctx; h_msg; h_prop (; id)] + b)` for each row.
    ///
    /// `context_hidden` holds the context encodings of these rows.
    pub fn encode_turn(&self, context_hidden: &Tensor<T>, obs: &[Observation]) -> TurnEncoding<T> {
        assert_eq!(context_hidden.rows(), obs.len());
        let msgs: Vec<Vec<usize>> = obs
            .iter()
            .map(|o| o.prev_message.values().iter().map(|s| *s as usize).collect())
            .collect();
        let props: Vec<Vec<usize>> = obs
            .iter()
            .map(|o| o.proposal_tokens().iter().map(|s| *s as usize).collect())
            .collect();
        let message = SequenceEncoding::run(&self.message_encoder, &self.utterance_embedding, &msgs);
        let proposal = SequenceEncoding::run(&self.proposal_encoder, &self.numeric_embedding, &props);
        let hm = message.final_h();
        let hp = proposal.final_h();
        let (ids, id_emb) = match &self.opponent_embedding {
            Some(table) => {
                let ids: Vec<usize> = obs
                    .iter()
                    .map(|o| o.opponent_id.expect("agent with ID table needs opponent ids"))
                    .collect();
                let e = table.lookup(&ids);
                (Some(ids), Some(e))
            }
            None => (None, None),
        };
        let combiner_input = match &id_emb {
            Some(e) => Tensor::concat_cols(&[context_hidden, &hm, &hp, e]),
            None => Tensor::concat_cols(&[context_hidden, &hm, &hp]),
        };
        let mut hidden = self.combiner.forward(&combiner_input);
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        TurnEncoding {
            message,
            proposal,
            ids,
            combiner_input,
            hidden,
        }
    }

    /// Runs the three policies on hidden states `h`, one random stream per row.
    pub fn decide<R: Rng>(&self, h: &Tensor<T>, rngs: &mut [R], opts: ActOptions) -> Decision<T> {
        assert_eq!(rngs.len(), h.rows(), "one random stream per row");
        let pick = match opts.mode {
            ActMode::Sample => Pick::Sample(rngs),
            ActMode::Greedy => Pick::Greedy,
        };
        self.decide_with(h, pick, opts.decode_utterance, opts.allow_terminate)
    }

    /// Evaluates the policies on given actions instead of choosing new ones.
    pub fn score(&self, h: &Tensor<T>, actions: &[Action], decode_utterance: bool, allow_terminate: bool) -> Decision<T> {
        assert_eq!(actions.len(), h.rows());
        self.decide_with::<rand::rngs::mock::StepRng>(h, Pick::Forced(actions), decode_utterance, allow_terminate)
    }

    fn decide_with<R: Rng>(&self, h: &Tensor<T>, mut pick: Pick<'_, R>, decode_utterance: bool, allow_terminate: bool) -> Decision<T> {
        let b = h.rows();
        let mut stats = vec![PolicyStats::default(); b];

        let term_logits = self.termination_head.forward(h);
        let term: Vec<Bernoulli<T>> = (0..b).map(|r| Bernoulli::from_logit(term_logits.row(r)[0])).collect();
        let mut terminate = vec![false; b];
        for r in 0..b {
            stats[r].entropy_term = term[r].entropy().as_f64();
            if allow_terminate {
                let e = pick.terminate(r, &term[r]);
                terminate[r] = e;
                stats[r].log_prob_term = term[r].log_prob(e).as_f64();
            }
        }

        let (utterance, symbols) = if decode_utterance {
            let (dec, symbols) = self.decode_utterances(h, &mut pick);
            for r in 0..b {
                for (pos, dists) in dec.dists.iter().enumerate() {
                    if dec.alive[pos][r] {
                        stats[r].log_prob_utt += dists[r].log_prob(symbols[r][pos] as usize).as_f64();
                        stats[r].entropy_utt += dists[r].entropy().as_f64();
                    }
                }
            }
            (Some(dec), symbols)
        } else {
            (None, vec![[DUMMY_SYMBOL; UTTERANCE_LEN]; b])
        };

        let logits: Vec<Tensor<T>> = self.proposal_heads.iter().map(|head| head.forward(h)).collect();
        let mut props = Vec::with_capacity(b);
        let mut claims = vec![[0u8; N_ITEMS]; b];
        for r in 0..b {
            let dists: [Categorical<T>; N_ITEMS] = std::array::from_fn(|k| Categorical::from_logits(logits[k].row(r)));
            for k in 0..N_ITEMS {
                let a = pick.item(r, k, &dists[k]);
                claims[r][k] = a as u8;
                stats[r].log_prob_prop += dists[k].log_prob(a).as_f64();
                stats[r].entropy_prop += dists[k].entropy().as_f64();
            }
            props.push(dists);
        }

        let actions = (0..b)
            .map(|r| Action {
                terminate: terminate[r],
                message: Message::new(symbols[r]).expect("decoder emits vocabulary symbols"),
                proposal: Proposal::new(claims[r]).expect("heads emit 0..=5"),
            })
            .collect();
        Decision {
            actions,
            stats,
            allow_terminate,
            term,
            term_input: h.clone(),
            props,
            utterance,
        }
    }

    fn decode_utterances<R: Rng>(&self, h: &Tensor<T>, pick: &mut Pick<'_, R>) -> (UtteranceDecoding<T>, Vec<[u8; UTTERANCE_LEN]>) {
        let b = h.rows();
        let hd = self.hidden_dim();
        let allowed: Vec<bool> = (0..VOCAB_SIZE)
            .map(|s| s != DUMMY_SYMBOL as usize || self.config.allow_dummy_symbol)
            .collect();
        let mut symbols = vec![[DUMMY_SYMBOL; UTTERANCE_LEN]; b];
        let mut alive_now = vec![true; b];
        let mut inputs = Vec::with_capacity(UTTERANCE_LEN);
        let mut steps = Vec::with_capacity(UTTERANCE_LEN);
        let mut dists = Vec::with_capacity(UTTERANCE_LEN);
        let mut alive = Vec::with_capacity(UTTERANCE_LEN);
        let mut prev = vec![DUMMY_SYMBOL as usize; b];
        let (mut hs, mut cs) = (h.clone(), Tensor::zeros(&[b, hd]));
        let proj = self.utterance_decoder.project_table(&self.utterance_embedding);
        for pos in 0..UTTERANCE_LEN {
            let step = self.utterance_decoder.step_from_gates(proj.gather_rows(&prev), hs, cs);
            let logits = self.utterance_output.forward(step.h());
            let mut row_dists = Vec::with_capacity(b);
            for r in 0..b {
                let d = Categorical::from_logits_masked(logits.row(r), Some(&allowed));
                if alive_now[r] {
                    let s = pick.symbol(r, pos, &d);
                    symbols[r][pos] = s as u8;
                }
                row_dists.push(d);
            }
            alive.push(alive_now.clone());
            inputs.push(prev);
            prev = (0..b).map(|r| symbols[r][pos] as usize).collect();
            if self.config.variable_length {
                for r in 0..b {
                    if symbols[r][pos] == DUMMY_SYMBOL {
                        alive_now[r] = false;
                    }
                }
            }
            hs = step.h().clone();
            cs = step.c().clone();
            steps.push(step);
            dists.push(row_dists);
        }
        (
            UtteranceDecoding {
                inputs,
                steps,
                dists,
                alive,
            },
            symbols,
        )
    }

    /// Backpropagates one turn's loss into `grad` and returns the gradient
    /// at the context hidden state of each row.
    pub fn backward_turn(
        &self,
        enc: &TurnEncoding<T>,
        dec: &Decision<T>,
        coefs: &[TurnCoefficients<T>],
        grad: &mut AgentParams<T>,
    ) -> Tensor<T> {
        let b = enc.hidden.rows();
        assert_eq!(coefs.len(), b);

        // accept head
        let mut dterm = Tensor::zeros(&[b, 1]);
        for r in 0..b {
            let e = dec.actions[r].terminate;
            let lp = if dec.allow_terminate { coefs[r].log_prob } else { T::zero() };
            let ent = if dec.allow_terminate { coefs[r].entropy_term } else { T::zero() };
            dterm.row_mut(r)[0] = dec.term[r].backward(e, lp, ent);
        }
        let mut dh = self.termination_head.backward(&dec.term_input, &dterm, &mut grad.termination_head);

        // proposal heads
        for k in 0..N_ITEMS {
            let mut dlogits = Tensor::zeros(&[b, PROPOSAL_CLASSES]);
            for r in 0..b {
                let a = dec.actions[r].proposal.values()[k] as usize;
                dec.props[r][k].backward(a, coefs[r].log_prob, coefs[r].entropy_prop, dlogits.row_mut(r));
            }
            let d = self.proposal_heads[k].backward(&dec.term_input, &dlogits, &mut grad.proposal_heads[k]);
            dh.add_assign(&d);
        }

        // utterance decoder
        if let Some(utt) = &dec.utterance {
            let mut dh_out = Vec::with_capacity(UTTERANCE_LEN);
            for (pos, step) in utt.steps.iter().enumerate() {
                let mut dlogits = Tensor::zeros(&[b, VOCAB_SIZE]);
                for r in 0..b {
                    if utt.alive[pos][r] {
                        let s = dec.actions[r].message.values()[pos] as usize;
                        utt.dists[pos][r].backward(s, coefs[r].log_prob, coefs[r].entropy_utt, dlogits.row_mut(r));
                    }
                }
                dh_out.push(self.utterance_output.backward(step.h(), &dlogits, &mut grad.utterance_output));
            }
            let g = self.utterance_decoder.backward(&utt.steps, &dh_out, &mut grad.utterance_decoder);
            self.utterance_decoder.backward_tokens(
                &self.utterance_embedding,
                &utt.inputs,
                &g.dgates,
                &mut grad.utterance_decoder,
                &mut grad.utterance_embedding,
            );
            dh.add_assign(&g.dh0);
        }
        self.backward_hidden(enc, &dh, grad)
    }

    /// Backpropagates a gradient at the hidden states through the observation
    /// encoders and returns the gradient at the context hidden state.
    pub fn backward_hidden(&self, enc: &TurnEncoding<T>, dh: &Tensor<T>, grad: &mut AgentParams<T>) -> Tensor<T> {
        let hd = self.hidden_dim();
        let mut dh = dh.clone();
        for (d, h) in dh.data_mut().iter_mut().zip(enc.hidden.data()) {
            if *h <= T::zero() {
                *d = T::zero();
            }
        }
        let dcomb = self.combiner.backward(&enc.combiner_input, &dh, &mut grad.combiner);
        let mut widths = vec![hd, hd, hd];
        if enc.ids.is_some() {
            widths.push(self.config.id_embed_dim);
        }
        let parts = dcomb.split_cols(&widths);
        enc.message.backward(
            &self.message_encoder,
            &self.utterance_embedding,
            &parts[1],
            &mut grad.message_encoder,
            &mut grad.utterance_embedding,
        );
        enc.proposal.backward(
            &self.proposal_encoder,
            &self.numeric_embedding,
            &parts[2],
            &mut grad.proposal_encoder,
            &mut grad.numeric_embedding,
        );
        if let (Some(ids), Some(table)) = (&enc.ids, &self.opponent_embedding) {
            table.backward(ids, &parts[3], grad.opponent_embedding.as_mut().expect("grad has ID table"));
        }
        parts.into_iter().next().expect("context part")
    }

    /// Hidden state for a single observation.
    pub fn encode(&self, obs: &Observation) -> Tensor<T> {
        let ctx = self.encode_contexts(&[obs.item_context]);
        self.encode_turn(ctx.hidden(), std::slice::from_ref(obs)).hidden
    }

    /// Chooses an action for a single observation.
    pub fn act<R: Rng>(&self, obs: &Observation, rng: &mut R, mode: ActMode, allow_terminate: bool) -> (Action, PolicyStats)
    where
        R: Clone,
    {
        let h = self.encode(obs);
        let mut rngs = [rng.clone()];
        let opts = ActOptions {
            mode,
            decode_utterance: true,
            allow_terminate,
        };
        let dec = self.decide(&h, &mut rngs, opts);
        *rng = rngs[0].clone();
        (dec.actions[0], dec.stats[0])
    }
}
