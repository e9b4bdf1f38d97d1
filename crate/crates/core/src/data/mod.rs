//! Byte tokenization, corpora, calibration sampling and perplexity.

mod cache;
mod corpus;
mod markov;
mod tokenizer;

pub use cache::{decode_batch_cache, encode_batch_cache, load_batch_cache, save_batch_cache};
pub use corpus::Corpus;
pub use markov::MarkovSource;
pub use tokenizer::{detokenize, tokenize, BOS, EOS, NUM_SPECIAL, VOCAB_SIZE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{forward_graph, Checkpoint, ForwardOptions, TokenBatch};

/// Calibration set size used when a config does not name one.
pub const DEFAULT_CALIB_SAMPLES: usize = 64;
pub const DEFAULT_CALIB_SEQ_LEN: usize = 256;

/// Where one calibration row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOffset {
    pub document: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationBatch {
    pub tokens: TokenBatch,
    pub seed: u64,
    pub offsets: Vec<WindowOffset>,
}

/// Number of length-`seq_len` windows each document contributes. Documents
/// shorter than `seq_len` contribute one left-padded window; empty ones none.
fn window_counts(corpus: &Corpus, seq_len: usize) -> Vec<usize> {
    corpus
        .documents
        .iter()
        .map(|d| match d.len() {
            0 => 0,
            n if n < seq_len => 1,
            n => n - seq_len + 1,
        })
        .collect()
}

/// The tokens of one window, left-padded with BOS when the document is short.
pub fn window_tokens(doc: &[u8], start: usize, seq_len: usize) -> Vec<u32> {
    let end = (start + seq_len).min(doc.len());
    let body = tokenize(&doc[start..end]);
    let mut row = vec![BOS; seq_len - body.len()];
    row.extend(body);
    row
}

/// Draws `n` windows uniformly from all valid windows of the corpus.
pub fn sample_calibration(corpus: &Corpus, n: usize, seq_len: usize, seed: u64) -> Result<CalibrationBatch> {
    corpus.require_text()?;
    if n == 0 || seq_len == 0 {
        return Err(Error::invalid("calibration needs n >= 1 and seq_len >= 1"));
    }
    let counts = window_counts(corpus, seq_len);
    let mut cum = Vec::with_capacity(counts.len());
    let mut total = 0usize;
    for c in &counts {
        total += c;
        cum.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(n * seq_len);
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..total);
        let document = cum.partition_point(|&c| c <= k);
        let start = k - (cum[document] - counts[document]);
        ids.extend(window_tokens(&corpus.documents[document], start, seq_len));
        offsets.push(WindowOffset { document, start });
    }
    Ok(CalibrationBatch {
        tokens: TokenBatch::new(n, seq_len, ids)?,
        seed,
        offsets,
    })
}

/// Summed next-token negative log-likelihood (nats) over positions
/// `1..S-1` of every row, and the number of predicted positions.
pub fn nll_sum(ckpt: &Checkpoint, tokens: &TokenBatch) -> Result<(f64, usize)> {
    // Bounded chunk size keeps the attention buffers small.
    const ROWS: usize = 8;
    let mut total = 0.0;
    let mut count = 0;
    let mut r = 0;
    while r < tokens.batch() {
        let end = (r + ROWS).min(tokens.batch());
        let chunk = tokens.slice_rows(r, end)?;
        let mut g = Graph::new();
        let out = forward_graph(&mut g, ckpt, &chunk, &ForwardOptions::default(), false)?;
        let loss = g.cross_entropy(out.logits, &chunk.shifted_targets())?;
        let n = chunk.batch() * chunk.seq_len().saturating_sub(1);
        total += g.scalar_f64(loss)? * n as f64;
        count += n;
        r = end;
    }
    Ok((total, count))
}

/// `exp` of the mean next-token cross-entropy under teacher forcing.
pub fn perplexity(ckpt: &Checkpoint, batch: &CalibrationBatch) -> Result<f64> {
    let (total, count) = nll_sum(ckpt, &batch.tokens)?;
    if count == 0 {
        return Err(Error::invalid("perplexity needs sequences of length >= 2"));
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::numeric("perplexity is not finite"));
    }
    Ok(ppl)
}
