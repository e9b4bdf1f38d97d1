use std::path::Path;

use compresslab::data::perplexity;
use compresslab::distill::{distill, Telemetry};
use compresslab::importance::config_digest;
use compresslab::model::{count_params, Checkpoint};
use compresslab::surgery::{apply_spec, plan_prune, row_config, PruneSpec};
use compresslab::{Error, Result};

use crate::bench::cmd_bench;
use crate::config::HarnessConfig;
use crate::record::*;

/// Fraction of the run within which the loss has to fall.
pub const UNSTABLE_WINDOW: f64 = 0.2;
/// Required relative drop from the step-0 loss inside that window.
pub const UNSTABLE_DROP: f64 = 0.05;

/// A run is unstable when its loss is ever non-finite or never falls 5%
/// below the step-0 loss within the first 20% of steps.
pub fn is_unstable(telemetry: &Telemetry, total_steps: usize) -> bool {
    let losses = telemetry.losses();
    if losses.is_empty() || losses.iter().any(|l| !l.is_finite()) {
        return true;
    }
    let horizon = ((total_steps as f64 * UNSTABLE_WINDOW).floor() as usize).max(1);
    let target = (1.0 - UNSTABLE_DROP) * losses[0];
    !losses.iter().take(horizon + 1).any(|&l| l <= target)
}

fn failure(stage: &str, e: &Error) -> StageFailure {
    StageFailure {
        stage: stage.to_string(),
        numeric: e.is_numeric(),
        message: e.to_string(),
    }
}

/// Chooses the prune spec for `cfg`, writing any importance reports to
/// `out_dir/scores`.
pub fn choose_spec(cfg: &HarnessConfig, teacher: &Checkpoint, out_dir: &Path) -> Result<PruneSpec> {
    if let Some(path) = &cfg.prune.spec {
        return PruneSpec::load(path);
    }
    let target = row_config(&teacher.config, &cfg.prune.row(&cfg.id))?;
    if target == teacher.config {
        return Ok(PruneSpec::default());
    }
    let corpus = cfg.corpus.train()?;
    let calib = cfg.calibration.draw(&corpus)?;
    let plan = plan_prune(teacher, &calib.tokens, &target, &cfg.prune.options)?;
    let dir = out_dir.join("scores");
    std::fs::create_dir_all(&dir)?;
    for r in &plan.reports {
        let name = serde_json::to_value(r.method)?;
        r.save(&dir.join(format!("{}.json", name.as_str().unwrap_or("scores"))))?;
    }
    Ok(plan.spec)
}

/// Runs score, prune, eval, distill, eval (and bench outside strict mode)
/// for one teacher. Stage failures end up in the record, never as `Err`;
/// artifacts written before the failure stay on disk.
pub fn run_pipeline(cfg: &HarnessConfig, teacher: &Checkpoint, out_dir: &Path, strict: bool) -> ExperimentRecord {
    let params_before = teacher.num_params();
    let mut record = ExperimentRecord::new(cfg.id.clone(), config_digest(&teacher.config), params_before);
    if let Err((stage, e)) = stages(cfg, teacher, out_dir, strict, &mut record) {
        record.failure = Some(failure(stage, &e));
        record.status = Status::Unstable;
    }
    record
}

fn at<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, (&'static str, Error)> {
    r.map_err(|e| (stage, e))
}

fn stages(
    cfg: &HarnessConfig,
    teacher: &Checkpoint,
    out_dir: &Path,
    strict: bool,
    record: &mut ExperimentRecord,
) -> std::result::Result<(), (&'static str, Error)> {
    at("setup", std::fs::create_dir_all(out_dir).map_err(Error::from))?;
    at("setup", cfg.validate())?;

    let spec = at("score", choose_spec(cfg, teacher, out_dir))?;
    at("score", spec.save(&out_dir.join("spec.toml")))?;
    record.spec = Some(spec.clone());

    let pruned = at("prune", apply_spec(teacher, &spec))?;
    at("prune", pruned.save(&out_dir.join("pruned.ckpt")))?;
    let after = at("prune", count_params(&pruned.config))?;
    record.params_after = Some(after);
    record.reduction_pct = Some(reduction_percent(record.params_before, after));

    let held_out = at("eval", cfg.corpus.held_out())?;
    let eval = at("eval", cfg.eval.draw(&held_out))?;
    let teacher_ppl = at("eval", perplexity(teacher, &eval))?;
    record.metrics.teacher_ppl = Some(teacher_ppl);
    let pruned_ppl = at("eval", perplexity(&pruned, &eval))?;
    record.metrics.pruned_ppl = Some(pruned_ppl);

    let student = if spec.is_identity() {
        record.status = Status::Baseline;
        pruned
    } else {
        let corpus = at("distill", cfg.corpus.train())?;
        let (student, mut telemetry) = at("distill", distill(teacher, pruned, &corpus, &cfg.distill))?;
        if strict {
            telemetry.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
        }
        at("distill", telemetry.save(&out_dir.join("telemetry.csv")))?;
        at("distill", student.save(&out_dir.join("student.ckpt")))?;
        record.distill_steps = cfg.distill.total_steps;
        record.telemetry_digest = Some(telemetry.digest());
        record.status = if is_unstable(&telemetry, cfg.distill.total_steps) {
            Status::Unstable
        } else {
            Status::Selected
        };
        student
    };
    record.student_digest = Some(at("distill", student.weights_digest())?);
    let distilled_ppl = at("eval", perplexity(&student, &eval))?;
    record.metrics.distilled_ppl = Some(distilled_ppl);
    record.recovery_pct = Some(at(
        "eval",
        recovery_percent(teacher_ppl, distilled_ppl, Direction::LowerBetter),
    )?);

    if !strict && cfg.bench.in_pipeline {
        let b = &cfg.bench;
        let teacher_bench = at("bench", cmd_bench(teacher, b.prompt_len, b.gen_len, b.reps, b.warmup))?;
        let student_bench = at("bench", cmd_bench(&student, b.prompt_len, b.gen_len, b.reps, b.warmup))?;
        record.bench = Some(BenchPair {
            teacher: teacher_bench,
            student: student_bench,
        });
    }
    Ok(())
}

/// Loads the configured teacher, runs the pipeline and writes
/// `record.json` into `out_dir`.
pub fn cmd_pipeline(cfg: &HarnessConfig, out_dir: &Path, strict: bool) -> Result<ExperimentRecord> {
    let path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::invalid("config names no teacher checkpoint"))?;
    let teacher = Checkpoint::load(path)?;
    teacher.ensure_valid()?;
    let record = run_pipeline(cfg, &teacher, out_dir, strict);
    std::fs::create_dir_all(out_dir)?;
    record.save(&out_dir.join("record.json"))?;
    Ok(record)
}
