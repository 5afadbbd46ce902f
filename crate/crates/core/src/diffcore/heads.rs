//! Stochastic policy heads: categorical over logits and Bernoulli over a
//! single logit. Each head exposes the quantities REINFORCE needs (sample,
//! log-probability, entropy) and the gradient of
//! `coef_lp * log p(a) + coef_ent * H` with respect to its logits.

use rand::Rng;

use super::ops::sigmoid;
use super::Real;

#[derive(Clone, Debug)]
pub struct Categorical<T> {
    probs: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Real> Categorical<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        Self::from_logits_masked(logits, None)
    }

    /// Entries with `allowed[k] == false` get probability exactly zero.
    pub fn from_logits_masked(logits: &[T], allowed: Option<&[bool]>) -> Self {
        let ok = |k: usize| allowed.map_or(true, |a| a[k]);
        let max = logits
            .iter()
            .enumerate()
            .filter(|(k, _)| ok(*k))
            .map(|(_, v)| *v)
            .fold(T::neg_infinity(), T::max);
        let sum: T = logits
            .iter()
            .enumerate()
            .filter(|(k, _)| ok(*k))
            .map(|(_, v)| (*v - max).exp())
            .sum();
        let lse = max + sum.ln();
        let mut probs = Vec::with_capacity(logits.len());
        let mut log_probs = Vec::with_capacity(logits.len());
        for (k, v) in logits.iter().enumerate() {
            if ok(k) {
                let lp = *v - lse;
                log_probs.push(lp);
                probs.push(lp.exp());
            } else {
                log_probs.push(T::neg_infinity());
                probs.push(T::zero());
            }
        }
        Categorical { probs, log_probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn log_prob(&self, a: usize) -> T {
        self.log_probs[a]
    }

    /// `-Σ p ln p`, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> T {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > T::zero())
            .map(|(p, lp)| *p * *lp)
            .sum::<T>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, p) in self.probs.iter().enumerate() {
            let p = p.as_f64();
            if p > 0.0 {
                last = k;
                acc += p;
                if u < acc {
                    return k;
                }
            }
        }
        last
    }

    /// Most probable index; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Adds `d(coef_lp * log p_a + coef_ent * H) / d logits` into `out`.
    pub fn backward(&self, action: usize, coef_lp: T, coef_ent: T, out: &mut [T]) {
        let h = self.entropy();
        for (k, o) in out.iter_mut().enumerate() {
            let p = self.probs[k];
            if p <= T::zero() {
                continue;
            }
            let onehot = if k == action { T::one() } else { T::zero() };
            *o += coef_lp * (onehot - p) - coef_ent * p * (self.log_probs[k] + h);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Bernoulli<T> {
    logit: T,
    p: T,
}

impl<T: Real> Bernoulli<T> {
    pub fn from_logit(logit: T) -> Self {
        Bernoulli {
            logit,
            p: sigmoid(logit),
        }
    }

    pub fn p(&self) -> T {
        self.p
    }

    pub fn log_prob(&self, e: bool) -> T {
        // log σ(z) = -softplus(-z), log(1 - σ(z)) = -softplus(z)
        let z = if e { self.logit } else { -self.logit };
        -softplus(-z)
    }

    pub fn entropy(&self) -> T {
        let q = T::one() - self.p;
        let mut h = T::zero();
        if self.p > T::zero() {
            h -= self.p * self.log_prob(true);
        }
        if q > T::zero() {
            h -= q * self.log_prob(false);
        }
        h
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        rng.gen::<f64>() < self.p.as_f64()
    }

    pub fn argmax(&self) -> bool {
        self.p > T::lit(0.5)
    }

    /// `d(coef_lp * log p(e) + coef_ent * H) / d logit`.
    pub fn backward(&self, e: bool, coef_lp: T, coef_ent: T) -> T {
        let target = if e { T::one() } else { T::zero() };
        let dh = -self.logit * self.p * (T::one() - self.p);
        coef_lp * (target - self.p) + coef_ent * dh
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Output of [`categorical_head`].
#[derive(Clone, Debug)]
pub struct HeadSample<T> {
    pub probs: Vec<T>,
    pub sample: usize,
    pub log_prob: T,
    pub entropy: T,
}

/// Softmax head: probabilities, a sample from `rng`, its log-probability and
/// the distribution entropy.
pub fn categorical_head<T: Real, R: Rng + ?Sized>(logits: &[T], rng: &mut R) -> HeadSample<T> {
    let dist = Categorical::from_logits(logits);
    let sample = dist.sample(rng);
    HeadSample {
        log_prob: dist.log_prob(sample),
        entropy: dist.entropy(),
        probs: dist.probs,
        sample,
    }
}

/// Sigmoid head: `(p, sample, log_prob, entropy)`.
pub fn bernoulli_head<T: Real, R: Rng + ?Sized>(logit: T, rng: &mut R) -> (T, bool, T, T) {
    let dist = Bernoulli::from_logit(logit);
    let e = dist.sample(rng);
    (dist.p(), e, dist.log_prob(e), dist.entropy())
}
