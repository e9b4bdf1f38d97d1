use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use crate::error::{Error, Result};

/// Markov chain of some order over a small byte alphabet, used to produce
/// synthetic text whose entropy rate is known exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSource {
    pub alphabet: Vec<u8>,
    /// Number of preceding symbols the next one depends on.
    pub order: usize,
    /// Next-symbol distribution per context. A context of symbols
    /// `s_1 .. s_k` (oldest first) has index `sum s_i * n^(k - i)`.
    pub transitions: Vec<Vec<f64>>,
}

impl MarkovSource {
    /// Random first-order chain over `states` symbols. Every state moves to
    /// its two successors (which makes the chain irreducible and aperiodic)
    /// plus up to `extra` other random states, with random weights.
    pub fn random(states: usize, extra: usize, seed: u64) -> Result<Self> {
        Self::random_order(states, 1, extra, seed)
    }

    /// Random chain where the next symbol depends on the last `order`
    /// symbols. Successors follow the first-order rule applied to the
    /// newest symbol, with weights and extra successors drawn per context.
    pub fn random_order(states: usize, order: usize, extra: usize, seed: u64) -> Result<Self> {
        if !(3..=26).contains(&states) {
            return Err(Error::invalid("states must be between 3 and 26"));
        }
        if order == 0 || states.pow(order as u32) > 1 << 16 {
            return Err(Error::invalid("order must be at least 1 with at most 65536 contexts"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alphabet = (b'a'..).take(states).collect();
        let contexts = states.pow(order as u32);
        let mut transitions = Vec::with_capacity(contexts);
        for ctx in 0..contexts {
            let i = ctx % states;
            let mut row = vec![0.0; states];
            row[(i + 1) % states] = rng.random_range(0.5..2.0);
            row[(i + 2) % states] = rng.random_range(0.5..2.0);
            for _ in 0..extra {
                let j = rng.random_range(0..states);
                row[j] += rng.random_range(0.1..1.0);
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
            transitions.push(row);
        }
        Ok(Self {
            alphabet,
            order,
            transitions,
        })
    }

    pub fn states(&self) -> usize {
        self.alphabet.len()
    }

    fn contexts(&self) -> usize {
        self.transitions.len()
    }

    fn advance(&self, ctx: usize, symbol: usize) -> usize {
        (ctx * self.states() + symbol) % self.contexts()
    }

    /// Stationary distribution over contexts by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.contexts();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (i, row) in self.transitions.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[self.advance(i, j)] += pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate `sum_i pi_i H(P_i)` in nats per symbol.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary()
            .iter()
            .zip(&self.transitions)
            .map(|(&pi, row)| pi * row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
            .sum()
    }

    fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// One document of `len` bytes, starting from the stationary distribution.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        self.sample_from(&self.stationary(), len, rng)
    }

    fn sample_from(&self, pi: &[f64], len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let n = self.states();
        let mut ctx = Self::draw(rng, pi);
        for k in (0..self.order).rev() {
            out.push(self.alphabet[ctx / n.pow(k as u32) % n]);
        }
        out.truncate(len);
        while out.len() < len {
            let s = Self::draw(rng, &self.transitions[ctx]);
            out.push(self.alphabet[s]);
            ctx = self.advance(ctx, s);
        }
        out
    }

    pub fn corpus(&self, docs: usize, doc_len: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = self.stationary();
        let documents = (0..docs).map(|_| self.sample_from(&pi, doc_len, &mut rng)).collect();
        Corpus::new(
            documents,
            format!("markov(states={}, order={}, seed={seed})", self.states(), self.order),
        )
    }
}
