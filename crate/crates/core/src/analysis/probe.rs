//! Probe classifiers: how much of each agent's hidden utilities and of the
//! accepted proposal can be recovered from the transmitted messages and the
//! item pool.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Categorical, Embedding, Linear, Lstm, Parameters, Real, Tensor};
use crate::env::{MAX_ITEM_COUNT, MAX_UTILITY, N_ITEMS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::transcript::TranscriptRecord;

/// Ends every message in a probe transcript.
pub const SEPARATOR: usize = VOCAB_SIZE;
/// Left padding so a minibatch shares one length.
pub const PAD: usize = VOCAB_SIZE + 1;
const TRANSCRIPT_VOCAB: usize = VOCAB_SIZE + 2;
const POOL_VOCAB: usize = MAX_ITEM_COUNT as usize + 1;

pub const N_TARGETS: usize = 3 * N_ITEMS;
pub const MIN_GAMES: usize = 10;

/// Classes of target `k`: utilities of A, utilities of B, accepted proposal.
pub fn target_classes(k: usize) -> usize {
    if k < 2 * N_ITEMS {
        MAX_UTILITY as usize + 1
    } else {
        MAX_ITEM_COUNT as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeExample {
    pub transcript: Vec<usize>,
    pub pool: [usize; N_ITEMS],
    /// `[u_A; u_B; accepted proposal]`
    pub labels: [usize; N_TARGETS],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProbeDataset {
    pub examples: Vec<ProbeExample>,
}

impl ProbeDataset {
    /// Games that ended in agreement. Only messages the opponent could hear
    /// go into the transcript, so the accepting turn's message is dropped
    /// unless `include_final_message` is set.
    pub fn from_records(records: &[TranscriptRecord], include_final_message: bool) -> Self {
        let examples = records
            .iter()
            .filter_map(|r| {
                let accepted = r.accepted_proposal()?;
                let heard = if include_final_message { r.turns.len() } else { r.turns.len() - 1 };
                let mut transcript = Vec::with_capacity(heard * 7);
                for t in &r.turns[..heard] {
                    transcript.extend(t.message.values().iter().map(|&s| s as usize));
                    transcript.push(SEPARATOR);
                }
                let mut labels = [0; N_TARGETS];
                for k in 0..N_ITEMS {
                    labels[k] = r.util_a.values()[k] as usize;
                    labels[N_ITEMS + k] = r.util_b.values()[k] as usize;
                    labels[2 * N_ITEMS + k] = accepted.values()[k] as usize;
                }
                Some(ProbeExample {
                    transcript,
                    pool: r.pool.values().map(|v| v as usize),
                    labels,
                })
            })
            .collect();
        ProbeDataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Same labels, every input replaced by a single zero symbol and an
    /// all-zero pool.
    pub fn zero_inputs(&self) -> Self {
        ProbeDataset {
            examples: self
                .examples
                .iter()
                .map(|e| ProbeExample {
                    transcript: vec![0],
                    pool: [0; N_ITEMS],
                    labels: e.labels,
                })
                .collect(),
        }
    }

    /// Same inputs with label vectors permuted across games.
    pub fn shuffled_labels<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut labels: Vec<[usize; N_TARGETS]> = self.examples.iter().map(|e| e.labels).collect();
        labels.shuffle(rng);
        ProbeDataset {
            examples: self
                .examples
                .iter()
                .zip(labels)
                .map(|(e, labels)| ProbeExample { labels, ..e.clone() })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            embed_dim: 32,
            hidden_dim: 32,
            epochs: 200,
            batch_size: 32,
            folds: 10,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Held-out accuracy per target averaged over folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub games: usize,
    pub per_target: [f64; N_TARGETS],
}

impl ProbeReport {
    fn mean(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len() as f64;
        self.per_target[range].iter().sum::<f64>() / n
    }

    pub fn utilities_a(&self) -> f64 {
        self.mean(0..N_ITEMS)
    }

    pub fn utilities_b(&self) -> f64 {
        self.mean(N_ITEMS..2 * N_ITEMS)
    }

    pub fn proposal(&self) -> f64 {
        self.mean(2 * N_ITEMS..N_TARGETS)
    }
}

/// The probe and both of its reference points on the same folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSuite {
    pub probe: ProbeReport,
    pub zero_input: ProbeReport,
    pub shuffled_labels: ProbeReport,
}

pub fn probe_suite(dataset: &ProbeDataset, config: &ProbeConfig) -> Result<ProbeSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    Ok(ProbeSuite {
        probe: train_probe(dataset, config)?,
        zero_input: train_probe(&dataset.zero_inputs(), config)?,
        shuffled_labels: train_probe(&dataset.shuffled_labels(&mut rng), config)?,
    })
}

/// Transcript and pool LSTMs whose final states feed one linear softmax
/// classifier per target.
#[derive(Clone, Debug)]
struct ProbeModel<T> {
    transcript_embedding: Embedding<T>,
    transcript_encoder: Lstm<T>,
    pool_embedding: Embedding<T>,
    pool_encoder: Lstm<T>,
    heads: Vec<Linear<T>>,
}

impl<T: Real> ProbeModel<T> {
    fn new<R: Rng + ?Sized>(config: &ProbeConfig, rng: &mut R) -> Self {
        let (e, h) = (config.embed_dim, config.hidden_dim);
        ProbeModel {
            transcript_embedding: Embedding::new(TRANSCRIPT_VOCAB, e, rng),
            transcript_encoder: Lstm::new(e, h, rng),
            pool_embedding: Embedding::new(POOL_VOCAB, e, rng),
            pool_encoder: Lstm::new(e, h, rng),
            heads: (0..N_TARGETS).map(|k| Linear::new(2 * h, target_classes(k), rng)).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for ProbeModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        let p = |n: &str| crate::diffcore::join(prefix, n);
        self.transcript_embedding.visit(&p("embed_transcript"), f);
        self.transcript_encoder.visit(&p("encoder_transcript"), f);
        self.pool_embedding.visit(&p("embed_pool"), f);
        self.pool_encoder.visit(&p("encoder_pool"), f);
        for (k, head) in self.heads.iter().enumerate() {
            head.visit(&p(&format!("head_{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let p = |n: &str| crate::diffcore::join(prefix, n);
        self.transcript_embedding.visit_mut(&p("embed_transcript"), f);
        self.transcript_encoder.visit_mut(&p("encoder_transcript"), f);
        self.pool_embedding.visit_mut(&p("embed_pool"), f);
        self.pool_encoder.visit_mut(&p("encoder_pool"), f);
        for (k, head) in self.heads.iter_mut().enumerate() {
            head.visit_mut(&p(&format!("head_{k}")), f);
        }
    }

    fn zeros_like(&self) -> Self {
        ProbeModel {
            transcript_embedding: self.transcript_embedding.zeros_like(),
            transcript_encoder: self.transcript_encoder.zeros_like(),
            pool_embedding: self.pool_embedding.zeros_like(),
            pool_encoder: self.pool_encoder.zeros_like(),
            heads: self.heads.iter().map(Linear::zeros_like).collect(),
        }
    }
}

/// `tokens[position][row]`, left-padded to the longest row.
fn batch_tokens(seqs: &[&[usize]]) -> Vec<Vec<usize>> {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    (0..len)
        .map(|k| {
            seqs.iter()
                .map(|s| {
                    let pad = len - s.len();
                    if k < pad {
                        PAD
                    } else {
                        s[k - pad]
                    }
                })
                .collect()
        })
        .collect()
}

struct Forward<T> {
    transcript_tokens: Vec<Vec<usize>>,
    transcript_steps: Vec<crate::diffcore::LstmStep<T>>,
    pool_tokens: Vec<Vec<usize>>,
    pool_steps: Vec<crate::diffcore::LstmStep<T>>,
    features: Tensor<T>,
    dists: Vec<Vec<Categorical<T>>>,
}

impl<T: Real> ProbeModel<T> {
    fn forward(&self, batch: &[&ProbeExample]) -> Forward<T> {
        let transcripts: Vec<&[usize]> = batch.iter().map(|e| e.transcript.as_slice()).collect();
        let pools: Vec<&[usize]> = batch.iter().map(|e| e.pool.as_slice()).collect();
        let transcript_tokens = batch_tokens(&transcripts);
        let pool_tokens = batch_tokens(&pools);
        let transcript_steps = self
            .transcript_encoder
            .encode_tokens(&self.transcript_encoder.project_table(&self.transcript_embedding), &transcript_tokens);
        let pool_steps = self.pool_encoder.encode_tokens(&self.pool_encoder.project_table(&self.pool_embedding), &pool_tokens);
        let features = Tensor::concat_cols(&[
            transcript_steps.last().expect("non-empty transcript").h(),
            pool_steps.last().expect("non-empty pool").h(),
        ]);
        let dists = self
            .heads
            .iter()
            .map(|head| {
                let logits = head.forward(&features);
                (0..batch.len()).map(|r| Categorical::from_logits(logits.row(r))).collect()
            })
            .collect();
        Forward {
            transcript_tokens,
            transcript_steps,
            pool_tokens,
            pool_steps,
            features,
            dists,
        }
    }

    /// Gradient of the summed mean cross-entropy of every head.
    fn backward(&self, fwd: &Forward<T>, batch: &[&ProbeExample], grad: &mut ProbeModel<T>) {
        let b = batch.len();
        let coef = T::lit(-1.0 / b as f64);
        let mut dfeatures = Tensor::zeros(&[b, fwd.features.cols()]);
        for (k, head) in self.heads.iter().enumerate() {
            let mut dlogits = Tensor::zeros(&[b, head.output_dim()]);
            for (r, ex) in batch.iter().enumerate() {
                fwd.dists[k][r].backward(ex.labels[k], coef, T::zero(), dlogits.row_mut(r));
            }
            dfeatures.add_assign(&head.backward(&fwd.features, &dlogits, &mut grad.heads[k]));
        }
        let h = self.transcript_encoder.hidden();
        let parts = dfeatures.split_cols(&[h, self.pool_encoder.hidden()]);
        let g = self
            .transcript_encoder
            .backward_final(&fwd.transcript_steps, &parts[0], &mut grad.transcript_encoder);
        self.transcript_encoder.backward_tokens(
            &self.transcript_embedding,
            &fwd.transcript_tokens,
            &g.dgates,
            &mut grad.transcript_encoder,
            &mut grad.transcript_embedding,
        );
        let g = self.pool_encoder.backward_final(&fwd.pool_steps, &parts[1], &mut grad.pool_encoder);
        self.pool_encoder
            .backward_tokens(&self.pool_embedding, &fwd.pool_tokens, &g.dgates, &mut grad.pool_encoder, &mut grad.pool_embedding);
    }

    fn correct(&self, batch: &[&ProbeExample]) -> [usize; N_TARGETS] {
        let fwd = self.forward(batch);
        let mut out = [0; N_TARGETS];
        for (k, dists) in fwd.dists.iter().enumerate() {
            out[k] = dists.iter().zip(batch).filter(|(d, e)| d.argmax() == e.labels[k]).count();
        }
        out
    }
}

/// Fold of each example: a seeded shuffle cut into near-equal parts.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos * folds / n;
    }
    out
}

/// Trains one probe per fold on the rest and reports accuracy on the fold,
/// averaged over folds.
pub fn train_probe(dataset: &ProbeDataset, config: &ProbeConfig) -> Result<ProbeReport> {
    if dataset.len() < MIN_GAMES.max(config.folds) {
        return Err(Error::InsufficientData(format!(
            "probe needs at least {} games that ended in agreement, got {}",
            MIN_GAMES.max(config.folds),
            dataset.len()
        )));
    }
    if config.folds < 2 || config.batch_size == 0 {
        return Err(Error::Config("probe needs at least 2 folds and a positive batch size".into()));
    }
    let assignment = fold_assignment(dataset.len(), config.folds, config.seed);
    let per_fold: Vec<[f64; N_TARGETS]> = (0..config.folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<&ProbeExample> = dataset.examples.iter().zip(&assignment).filter(|(_, f)| **f != fold).map(|(e, _)| e).collect();
            let test: Vec<&ProbeExample> = dataset.examples.iter().zip(&assignment).filter(|(_, f)| **f == fold).map(|(e, _)| e).collect();
            let model = fit_fold::<f32>(&train, config, config.seed.wrapping_add(fold as u64 + 1));
            let mut correct = [0; N_TARGETS];
            for chunk in test.chunks(256) {
                for (c, n) in correct.iter_mut().zip(model.correct(chunk)) {
                    *c += n;
                }
            }
            correct.map(|c| c as f64 / test.len() as f64)
        })
        .collect();
    let mut per_target = [0.0; N_TARGETS];
    for acc in &per_fold {
        for (p, a) in per_target.iter_mut().zip(acc) {
            *p += a / config.folds as f64;
        }
    }
    Ok(ProbeReport {
        games: dataset.len(),
        per_target,
    })
}

fn fit_fold<T: Real>(train: &[&ProbeExample], config: &ProbeConfig, seed: u64) -> ProbeModel<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ProbeModel::<T>::new(config, &mut rng);
    let mut grad = model.zeros_like();
    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ProbeExample> = chunk.iter().map(|&i| train[i]).collect();
            let fwd = model.forward(&batch);
            grad.zero();
            model.backward(&fwd, &batch, &mut grad);
            adam.step(&mut model, &grad);
        }
    }
    model
}
