use compresslab::model::{generate, Checkpoint};
use compresslab::{Error, Result};
use serde::{Deserialize, Serialize};

/// Timings of one generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSample {
    pub ttft_ms: f64,
    /// Gaps between consecutive output tokens, first token excluded.
    pub gaps_ms: Vec<f64>,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub tokens_per_second: f64,
    pub median_ttft_ms: f64,
    pub median_tpot_ms: f64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub repetitions: usize,
    pub samples: Vec<BenchSample>,
}

/// Median of a non-empty list; the mean of the two middle values for even
/// lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl BenchReport {
    /// Summary statistics from raw samples.
    pub fn from_samples(prompt_len: usize, gen_len: usize, samples: Vec<BenchSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no bench samples"));
        }
        let ttft: Vec<f64> = samples.iter().map(|s| s.ttft_ms).collect();
        // Per-request TPOT first, then the median across requests, the same
        // way throughput is aggregated; pooling all gaps lets the two
        // medians land on different requests when the host speed drifts.
        let tpots: Vec<f64> = samples
            .iter()
            .filter(|s| !s.gaps_ms.is_empty())
            .map(|s| median(&s.gaps_ms))
            .collect();
        let rates: Vec<f64> = samples.iter().map(|s| gen_len as f64 / (s.total_ms / 1e3)).collect();
        Ok(Self {
            tokens_per_second: median(&rates),
            median_ttft_ms: median(&ttft),
            median_tpot_ms: if tpots.is_empty() { 0.0 } else { median(&tpots) },
            prompt_len,
            gen_len,
            repetitions: samples.len(),
            samples,
        })
    }

    /// Recomputes the summary from the retained samples.
    pub fn recomputed(&self) -> Result<Self> {
        Self::from_samples(self.prompt_len, self.gen_len, self.samples.clone())
    }
}

/// Deterministic prompt of `len` byte tokens.
pub fn bench_prompt(len: usize) -> Vec<u32> {
    let text: Vec<u8> = b"the quick brown fox jumps over the lazy dog "
        .iter()
        .copied()
        .cycle()
        .take(len)
        .collect();
    compresslab::data::tokenize(&text)
}

/// Single-stream greedy generation, `warmup` discarded runs then `reps`
/// timed ones.
pub fn cmd_bench(
    ckpt: &Checkpoint,
    prompt_len: usize,
    gen_len: usize,
    reps: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if reps < 5 {
        return Err(Error::invalid(format!(
            "bench needs at least 5 repetitions, got {reps}"
        )));
    }
    if prompt_len == 0 || gen_len == 0 {
        return Err(Error::invalid("prompt_len and gen_len must be positive"));
    }
    let prompt = bench_prompt(prompt_len);
    for _ in 0..warmup {
        generate(ckpt, &prompt, gen_len, 0)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let g = generate(ckpt, &prompt, gen_len, 0)?;
        let ms: Vec<f64> = g.timestamps.iter().map(|t| t.as_secs_f64() * 1e3).collect();
        samples.push(BenchSample {
            ttft_ms: ms[0],
            gaps_ms: ms.windows(2).map(|w| w[1] - w[0]).collect(),
            total_ms: *ms.last().expect("at least one token"),
        });
    }
    BenchReport::from_samples(prompt_len, gen_len, samples)
}
