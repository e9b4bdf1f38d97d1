use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use super::config::{DistillConfig, TrainConfig};
use super::optim::AdamW;
use super::telemetry::{StepRecord, Telemetry};
use crate::autograd::Graph;
use crate::data::{sample_calibration, Corpus};
use crate::error::{Error, Result};
use crate::format;
use crate::model::*;
use crate::tensor::Tensor;

const RUN_STATE_KIND: &str = "run_state";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Seed of the training batch drawn at `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Teacher logits `[B * S, V]` from a gradient-free forward pass.
pub fn teacher_logits(teacher: &Checkpoint, batch: &TokenBatch) -> Result<Tensor> {
    let out = forward_with(teacher, batch, &ForwardOptions::default())?;
    let v = teacher.config.vocab_size;
    out.logits.reshape(vec![batch.batch() * batch.seq_len(), v])
}

fn collect_grads(g: &Graph, params: &[(String, crate::autograd::Var)]) -> BTreeMap<String, Vec<f32>> {
    params
        .iter()
        .map(|(name, v)| (name.clone(), g.grad(*v).expect("parameter gradient").to_vec()))
        .collect()
}

/// One distillation update of `student` toward `teacher` on `batch`:
/// forward KL between temperature-scaled teacher and student logits,
/// backward through the student only, AdamW at `cosine_lr(step)`.
pub fn distill_step(
    teacher: &Checkpoint,
    student: &mut Checkpoint,
    opt: &mut AdamW,
    batch: &TokenBatch,
    cfg: &DistillConfig,
    step: usize,
) -> Result<StepRecord> {
    let start = Instant::now();
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::invalid(format!(
            "teacher vocabulary {} differs from student vocabulary {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    let lr = cfg.schedule().lr(step)?;
    let target = teacher_logits(teacher, batch)?;
    let mut g = Graph::new();
    let out = forward_graph(&mut g, student, batch, &ForwardOptions::default(), true)?;
    let loss = g.kl_div(&target, out.logits, cfg.temperature)?;
    let value = g.scalar_f64(loss)?;
    if !value.is_finite() {
        return Err(Error::numeric(format!("distillation loss is {value} at step {step}")));
    }
    g.backward(loss)?;
    let grads = collect_grads(&g, &out.params);
    drop(g);
    let grad_norm = opt
        .step(&mut student.tensors, &grads, lr, cfg.grad_clip_norm)
        .map_err(|e| Error::numeric(format!("step {step}: {e}")))?;
    Ok(StepRecord {
        step,
        lr,
        loss: value,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One next-token cross-entropy update.
pub fn train_step(
    ckpt: &mut Checkpoint,
    opt: &mut AdamW,
    batch: &TokenBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let start = Instant::now();
    let lr = cfg.schedule().lr(step)?;
    let mut g = Graph::new();
    let out = forward_graph(&mut g, ckpt, batch, &ForwardOptions::default(), true)?;
    let loss = g.cross_entropy(out.logits, &batch.shifted_targets())?;
    let value = g.scalar_f64(loss)?;
    if !value.is_finite() {
        return Err(Error::numeric(format!("training loss is {value} at step {step}")));
    }
    g.backward(loss)?;
    let grads = collect_grads(&g, &out.params);
    drop(g);
    let grad_norm = opt
        .step(&mut ckpt.tensors, &grads, lr, cfg.grad_clip_norm)
        .map_err(|e| Error::numeric(format!("step {step}: {e}")))?;
    Ok(StepRecord {
        step,
        lr,
        loss: value,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Trains a freshly initialized model of `model` geometry on `corpus`.
pub fn train_teacher(model: &ModelConfig, corpus: &Corpus, cfg: &TrainConfig) -> Result<(Checkpoint, Telemetry)> {
    cfg.validate()?;
    if cfg.seq_len > model.max_seq_len {
        return Err(Error::invalid("seq_len exceeds the model's max_seq_len"));
    }
    let mut ckpt = build_model(model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.adamw);
    let mut telemetry = Telemetry::default();
    for step in 0..=cfg.total_steps {
        let batch = sample_calibration(corpus, cfg.batch_size, cfg.seq_len, batch_seed(cfg.seed, step))?;
        telemetry.push(train_step(&mut ckpt, &mut opt, &batch.tokens, cfg, step)?)?;
    }
    Ok((ckpt, telemetry))
}

/// Resumable distillation state: student weights, optimizer moments and
/// the next step to run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub student: Checkpoint,
    pub optimizer: AdamW,
    pub next_step: usize,
}

impl RunState {
    pub fn new(student: Checkpoint, cfg: &DistillConfig) -> Self {
        Self {
            student,
            optimizer: AdamW::new(cfg.adamw),
            next_step: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.student.ordered() {
            named.push((name.to_string(), t.clone()));
        }
        for (prefix, moments) in [(M_PREFIX, &self.optimizer.m), (V_PREFIX, &self.optimizer.v)] {
            for (name, v) in moments {
                named.push((format!("{prefix}{name}"), Tensor::from_vec(v.clone())));
            }
        }
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut meta = self.student.meta.clone();
        meta.insert("run.next_step".into(), self.next_step.to_string());
        meta.insert("run.adam_t".into(), self.optimizer.t.to_string());
        meta.insert("run.adamw".into(), serde_json::to_string(&self.optimizer.config)?);
        format::encode(
            RUN_STATE_KIND,
            &serde_json::to_value(&self.student.config)?,
            &refs,
            &meta,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = format::decode(bytes)?;
        if c.kind != RUN_STATE_KIND {
            return Err(Error::format(format!(
                "expected a {RUN_STATE_KIND} file, found {}",
                c.kind
            )));
        }
        let take = |meta: &mut BTreeMap<String, String>, key: &str| {
            meta.remove(key)
                .ok_or_else(|| Error::format(format!("run state is missing {key}")))
        };
        let next_step = take(&mut c.meta, "run.next_step")?
            .parse()
            .map_err(|_| Error::format("bad run.next_step"))?;
        let t = take(&mut c.meta, "run.adam_t")?
            .parse()
            .map_err(|_| Error::format("bad run.adam_t"))?;
        let config = serde_json::from_str(&take(&mut c.meta, "run.adamw")?)?;
        let mut optimizer = AdamW::new(config);
        optimizer.t = t;
        let mut weights = Vec::new();
        for (name, tensor) in std::mem::take(&mut c.tensors) {
            if let Some(n) = name.strip_prefix(M_PREFIX) {
                optimizer.m.insert(n.to_string(), tensor.into_data());
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                optimizer.v.insert(n.to_string(), tensor.into_data());
            } else {
                weights.push((name, tensor));
            }
        }
        c.tensors = weights;
        c.kind = KIND.to_string();
        let student = Checkpoint::from_container(c, KIND)?;
        student.ensure_valid()?;
        for (name, m) in optimizer.m.iter().chain(&optimizer.v) {
            let t = student
                .tensors
                .get(name)
                .ok_or_else(|| Error::format(format!("moments for unknown tensor {name}")))?;
            if t.numel() != m.len() {
                return Err(Error::format(format!("moment size mismatch for {name}")));
            }
        }
        Ok(Self {
            student,
            optimizer,
            next_step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Runs distillation steps `state.next_step..=until` (capped at
/// `total_steps`), appending to `telemetry`.
pub fn distill_until(
    teacher: &Checkpoint,
    state: &mut RunState,
    corpus: &Corpus,
    cfg: &DistillConfig,
    until: usize,
    telemetry: &mut Telemetry,
) -> Result<()> {
    cfg.validate()?;
    if cfg.seq_len > state.student.config.max_seq_len || cfg.seq_len > teacher.config.max_seq_len {
        return Err(Error::invalid("seq_len exceeds a model's max_seq_len"));
    }
    let end = until.min(cfg.total_steps);
    while state.next_step <= end {
        let step = state.next_step;
        let batch = sample_calibration(corpus, cfg.batch_size, cfg.seq_len, batch_seed(cfg.seed, step))?;
        let rec = distill_step(
            teacher,
            &mut state.student,
            &mut state.optimizer,
            &batch.tokens,
            cfg,
            step,
        )?;
        telemetry.push(rec)?;
        state.next_step += 1;
    }
    Ok(())
}

/// Full distillation run from a freshly pruned student.
pub fn distill(
    teacher: &Checkpoint,
    student: Checkpoint,
    corpus: &Corpus,
    cfg: &DistillConfig,
) -> Result<(Checkpoint, Telemetry)> {
    let mut state = RunState::new(student, cfg);
    let mut telemetry = Telemetry::default();
    distill_until(teacher, &mut state, corpus, cfg, cfg.total_steps, &mut telemetry)?;
    Ok((state.student, telemetry))
}
