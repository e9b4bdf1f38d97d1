use std::path::Path;

use compresslab::surgery::PruneSpec;
use compresslab::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::bench::BenchReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Student metric as a percentage of the teacher's, direction-aware.
pub fn recovery_percent(teacher: f64, student: f64, direction: Direction) -> Result<f64> {
    if !(teacher > 0.0) || !teacher.is_finite() {
        return Err(Error::invalid(format!(
            "teacher metric must be positive, got {teacher}"
        )));
    }
    if !(student >= 0.0) || !student.is_finite() {
        return Err(Error::invalid(format!(
            "student metric must be non-negative, got {student}"
        )));
    }
    if teacher == student {
        return Ok(100.0);
    }
    match direction {
        Direction::HigherBetter => Ok(100.0 * student / teacher),
        Direction::LowerBetter if student == 0.0 => Err(Error::invalid("student perplexity is zero")),
        Direction::LowerBetter => Ok(100.0 * teacher / student),
    }
}

/// `100 * (1 - after / before)`.
pub fn reduction_percent(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    100.0 * (1.0 - after as f64 / before as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Selected,
    SubOptimal,
    Unstable,
    Baseline,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Selected => "selected",
            Status::SubOptimal => "sub_optimal",
            Status::Unstable => "unstable",
            Status::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    pub teacher_ppl: Option<f64>,
    pub pruned_ppl: Option<f64>,
    pub distilled_ppl: Option<f64>,
}

/// The stage a pipeline failed in and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFailure {
    pub stage: String,
    pub numeric: bool,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPair {
    pub teacher: BenchReport,
    pub student: BenchReport,
}

/// One pipeline run: what was pruned, how much it shrank, how well it
/// recovered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    pub id: String,
    pub base_config_digest: String,
    pub spec: Option<PruneSpec>,
    pub params_before: u64,
    pub params_after: Option<u64>,
    /// Grid prediction for the row, when the record came from a search.
    pub predicted_params: Option<f64>,
    pub reduction_pct: Option<f64>,
    pub metrics: EvalMetrics,
    /// Perplexity-based; see [`recovery_percent`].
    pub recovery_pct: Option<f64>,
    pub distill_steps: usize,
    pub telemetry_digest: Option<String>,
    pub student_digest: Option<String>,
    pub bench: Option<BenchPair>,
    pub status: Status,
    pub failure: Option<StageFailure>,
}

impl ExperimentRecord {
    pub fn new(id: impl Into<String>, base_config_digest: String, params_before: u64) -> Self {
        Self {
            id: id.into(),
            base_config_digest,
            spec: None,
            params_before,
            params_after: None,
            predicted_params: None,
            reduction_pct: None,
            metrics: EvalMetrics::default(),
            recovery_pct: None,
            distill_steps: 0,
            telemetry_digest: None,
            student_digest: None,
            bench: None,
            status: Status::Unstable,
            failure: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Records from a file holding either one record or a list of them.
pub fn load_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}
