use std::path::Path;

use compresslab::distill::DistillConfig;
use compresslab::model::Checkpoint;
use compresslab::surgery::{enumerate_candidates, CandidateGrid};
use compresslab::{Error, Result};

use crate::config::{HarnessConfig, PruneSection};
use crate::pipeline::run_pipeline;
use crate::record::{ExperimentRecord, Status};

/// Orders records by recovery, best first; failed and unstable runs go
/// last. The best stable pruned candidate becomes `selected`, the other
/// stable ones `sub_optimal`.
pub fn rank(records: &mut [ExperimentRecord]) {
    let key = |r: &ExperimentRecord| {
        let usable = r.status != Status::Unstable && r.failure.is_none();
        (!usable, -r.recovery_pct.unwrap_or(f64::NEG_INFINITY))
    };
    records.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    let mut chosen = false;
    for r in records.iter_mut() {
        if matches!(r.status, Status::Selected | Status::SubOptimal) {
            r.status = if chosen { Status::SubOptimal } else { Status::Selected };
            chosen = true;
        }
    }
}

/// Pipeline config for one grid row with a `steps`-step distillation.
pub fn row_pipeline_config(cfg: &HarnessConfig, row: &compresslab::surgery::GridRow, steps: usize) -> HarnessConfig {
    let mut c = cfg.clone();
    c.id = row.id.clone();
    c.prune = PruneSection {
        options: cfg.prune.options.clone(),
        ..PruneSection::from_row(row)
    };
    let d = DistillConfig::with_steps(steps);
    c.distill = DistillConfig {
        total_steps: steps,
        warmup_steps: d.warmup_steps,
        ..cfg.distill.clone()
    };
    c
}

/// Runs the pipeline for every grid row under `out_dir/<row id>` and
/// returns the ranked records. A failing row is recorded as unstable and
/// the search moves on.
pub fn cmd_search(
    cfg: &HarnessConfig,
    teacher: &Checkpoint,
    grid: &CandidateGrid,
    out_dir: &Path,
    strict: bool,
) -> Result<Vec<ExperimentRecord>> {
    if grid.base != teacher.config {
        return Err(Error::invalid("grid base geometry differs from the teacher's"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for row in &grid.rows {
        if row.id.is_empty() || row.id.contains(['/', '\\']) || row.id.starts_with('.') || !seen.insert(&row.id) {
            return Err(Error::invalid(format!("bad or duplicate grid row id {:?}", row.id)));
        }
    }
    let mut records = Vec::with_capacity(grid.rows.len());
    for row in &grid.rows {
        let single = CandidateGrid {
            rows: vec![row.clone()],
            ..grid.clone()
        };
        let c = row_pipeline_config(cfg, row, cfg.search_steps);
        let dir = out_dir.join(&row.id);
        let mut r = run_pipeline(&c, teacher, &dir, strict);
        r.predicted_params = enumerate_candidates(&grid.base, &single)
            .ok()
            .map(|p| p[0].predicted_params);
        std::fs::create_dir_all(&dir)?;
        r.save(&dir.join("record.json"))?;
        records.push(r);
    }
    rank(&mut records);
    Ok(records)
}
