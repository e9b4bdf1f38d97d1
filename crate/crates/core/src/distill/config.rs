use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::invalid("AdamW betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "AdamW eps must be positive and weight decay non-negative",
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `floor_lr` at
/// `total_steps`. Steps run `0..=total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::invalid("peak_lr must be positive"));
        }
        if !(self.floor_lr >= 0.0) || self.floor_lr > self.peak_lr {
            return Err(Error::invalid("floor_lr must be in [0, peak_lr]"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        let (peak, floor) = (self.peak_lr, self.floor_lr);
        if step < self.warmup_steps {
            return Ok(peak * step as f64 / self.warmup_steps as f64);
        }
        // The endpoints are returned verbatim so the trace hits them exactly.
        if step == self.warmup_steps {
            return Ok(peak);
        }
        if step == self.total_steps {
            return Ok(floor);
        }
        let t = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

fn default_warmup(total: usize) -> usize {
    total / 100
}

/// Logit distillation settings. Omitted fields take their defaults when
/// deserialized; an omitted `warmup_steps` follows `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "DistillRepr")]
pub struct DistillConfig {
    pub temperature: f32,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// `false` in config files disables clipping.
    #[serde(serialize_with = "clip::serialize")]
    pub grad_clip_norm: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::with_steps(2000)
    }
}

impl DistillConfig {
    /// Defaults with `total_steps` steps and 1% warmup.
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            temperature: 2.0,
            peak_lr: 1.5e-4,
            floor_lr: 1.5e-5,
            total_steps,
            warmup_steps: default_warmup(total_steps),
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            adamw: AdamWConfig::default(),
            grad_clip_norm: Some(1.0),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            floor_lr: self.floor_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.schedule().validate()?;
        validate_common(self.batch_size, self.seq_len, self.grad_clip_norm)?;
        self.adamw.validate()
    }
}

/// Next-token training settings for the teacher; same optimizer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrainRepr")]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// `false` in config files disables clipping.
    #[serde(serialize_with = "clip::serialize")]
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_steps(1000)
    }
}

impl TrainConfig {
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            peak_lr: 3e-3,
            floor_lr: 3e-4,
            total_steps,
            warmup_steps: (total_steps / 20).max(1).min(total_steps.saturating_sub(1)),
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            adamw: AdamWConfig::default(),
            grad_clip_norm: Some(1.0),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            floor_lr: self.floor_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        validate_common(self.batch_size, self.seq_len, self.grad_clip_norm)?;
        self.adamw.validate()
    }
}

fn validate_common(batch: usize, seq_len: usize, clip: Option<f64>) -> Result<()> {
    if batch == 0 || seq_len < 2 {
        return Err(Error::invalid("batch_size must be >= 1 and seq_len >= 2"));
    }
    if let Some(c) = clip {
        if !(c > 0.0) {
            return Err(Error::invalid("grad_clip_norm must be positive"));
        }
    }
    Ok(())
}

/// Learning rate at `step` for a distillation run.
pub fn cosine_lr(step: usize, cfg: &DistillConfig) -> Result<f64> {
    cfg.schedule().lr(step)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DistillRepr {
    temperature: Option<f32>,
    peak_lr: Option<f64>,
    floor_lr: Option<f64>,
    total_steps: Option<usize>,
    warmup_steps: Option<usize>,
    batch_size: Option<usize>,
    seq_len: Option<usize>,
    seed: Option<u64>,
    adamw: Option<AdamWConfig>,
    #[serde(default, with = "clip")]
    grad_clip_norm: Option<Option<f64>>,
}

impl From<DistillRepr> for DistillConfig {
    fn from(r: DistillRepr) -> Self {
        let d = match r.total_steps {
            Some(t) => Self::with_steps(t),
            None => Self::default(),
        };
        Self {
            temperature: r.temperature.unwrap_or(d.temperature),
            peak_lr: r.peak_lr.unwrap_or(d.peak_lr),
            floor_lr: r.floor_lr.unwrap_or(d.floor_lr),
            warmup_steps: r.warmup_steps.unwrap_or(d.warmup_steps),
            batch_size: r.batch_size.unwrap_or(d.batch_size),
            seq_len: r.seq_len.unwrap_or(d.seq_len),
            seed: r.seed.unwrap_or(d.seed),
            adamw: r.adamw.unwrap_or(d.adamw),
            grad_clip_norm: r.grad_clip_norm.unwrap_or(d.grad_clip_norm),
            ..d
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRepr {
    peak_lr: Option<f64>,
    floor_lr: Option<f64>,
    total_steps: Option<usize>,
    warmup_steps: Option<usize>,
    batch_size: Option<usize>,
    seq_len: Option<usize>,
    seed: Option<u64>,
    adamw: Option<AdamWConfig>,
    #[serde(default, with = "clip")]
    grad_clip_norm: Option<Option<f64>>,
}

impl From<TrainRepr> for TrainConfig {
    fn from(r: TrainRepr) -> Self {
        let d = match r.total_steps {
            Some(t) => Self::with_steps(t),
            None => Self::default(),
        };
        Self {
            peak_lr: r.peak_lr.unwrap_or(d.peak_lr),
            floor_lr: r.floor_lr.unwrap_or(d.floor_lr),
            warmup_steps: r.warmup_steps.unwrap_or(d.warmup_steps),
            batch_size: r.batch_size.unwrap_or(d.batch_size),
            seq_len: r.seq_len.unwrap_or(d.seq_len),
            seed: r.seed.unwrap_or(d.seed),
            adamw: r.adamw.unwrap_or(d.adamw),
            grad_clip_norm: r.grad_clip_norm.unwrap_or(d.grad_clip_norm),
            ..d
        }
    }
}

mod clip {
    use serde::de::{self, Deserializer};
    use serde::{Deserialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Flag(bool),
        Norm(f64),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => s.serialize_f64(*c),
            None => s.serialize_bool(false),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<f64>>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Flag(false) => Ok(Some(None)),
            Repr::Flag(true) => Err(de::Error::custom("grad_clip_norm takes a number or false")),
            Repr::Norm(c) => Ok(Some(Some(c))),
        }
    }
}
