use std::fmt::Write as _;

use compresslab::{Error, Result};

use crate::record::ExperimentRecord;

/// Printed under every report table.
pub const RECOVERY_NOTE: &str = "recovery % is teacher ppl / student ppl on held-out text; \
it is not comparable with recovery figures averaged over external benchmarks";

/// Report outputs: a text table for people, two delimited tables and the
/// records themselves as JSON.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub comparison_csv: String,
    pub stages_csv: String,
    pub json: String,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Sorts by recovery (best first, missing last) without reordering ties.
pub fn sort_by_recovery(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| match (a.recovery_pct, b.recovery_pct) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

pub fn cmd_report(records: &[ExperimentRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::invalid("report needs at least one record"));
    }
    let mut sorted = records.to_vec();
    sort_by_recovery(&mut sorted);

    let csv_err = |e: csv::Error| Error::format(e.to_string());
    let mut cmp = csv::Writer::from_writer(Vec::new());
    cmp.write_record([
        "id",
        "params_before",
        "params_after",
        "predicted_params",
        "reduction_pct",
        "teacher_ppl",
        "pruned_ppl",
        "distilled_ppl",
        "recovery_pct",
        "status",
        "failed_stage",
    ])
    .map_err(csv_err)?;
    let mut stages = csv::Writer::from_writer(Vec::new());
    stages
        .write_record(["id", "stage", "metric", "value"])
        .map_err(csv_err)?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<16} {:>12} {:>12} {:>9} {:>10} {:>10} {:>10} {:>9}  status",
        "id", "params", "after", "red. %", "teacher", "pruned", "distilled", "recov. %"
    );
    for r in &sorted {
        let m = &r.metrics;
        let after = r.params_after.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
        let failed = r.failure.as_ref().map(|f| f.stage.as_str()).unwrap_or("");
        cmp.write_record([
            r.id.clone(),
            r.params_before.to_string(),
            after.clone(),
            opt(r.predicted_params, 0),
            opt(r.reduction_pct, 4),
            opt(m.teacher_ppl, 6),
            opt(m.pruned_ppl, 6),
            opt(m.distilled_ppl, 6),
            opt(r.recovery_pct, 4),
            r.status.label().to_string(),
            failed.to_string(),
        ])
        .map_err(csv_err)?;
        for (stage, v) in [
            ("teacher", m.teacher_ppl),
            ("pruned", m.pruned_ppl),
            ("distilled", m.distilled_ppl),
        ] {
            if let Some(v) = v {
                stages
                    .write_record([r.id.as_str(), stage, "perplexity", &format!("{v:.6}")])
                    .map_err(csv_err)?;
            }
        }
        if let Some(b) = &r.bench {
            for (stage, rep) in [("teacher", &b.teacher), ("distilled", &b.student)] {
                for (metric, v) in [
                    ("tokens_per_second", rep.tokens_per_second),
                    ("median_ttft_ms", rep.median_ttft_ms),
                    ("median_tpot_ms", rep.median_tpot_ms),
                ] {
                    stages
                        .write_record([r.id.as_str(), stage, metric, &format!("{v:.4}")])
                        .map_err(csv_err)?;
                }
            }
        }
        let status = match &r.failure {
            Some(f) => format!("{} ({} failed)", r.status.label(), f.stage),
            None => r.status.label().to_string(),
        };
        let _ = writeln!(
            text,
            "{:<16} {:>12} {:>12} {:>9} {:>10} {:>10} {:>10} {:>9}  {}",
            r.id,
            r.params_before,
            after,
            opt(r.reduction_pct, 2),
            opt(m.teacher_ppl, 3),
            opt(m.pruned_ppl, 3),
            opt(m.distilled_ppl, 3),
            opt(r.recovery_pct, 1),
            status
        );
    }
    let _ = writeln!(text, "\nnote: {RECOVERY_NOTE}");
    let into = |w: csv::Writer<Vec<u8>>| -> Result<String> {
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))
    };
    Ok(Report {
        text,
        comparison_csv: into(cmp)?,
        stages_csv: into(stages)?,
        json: serde_json::to_string_pretty(&sorted)?,
    })
}

/// Records back from a report's JSON output.
pub fn parse_report(json: &str) -> Result<Vec<ExperimentRecord>> {
    Ok(serde_json::from_str(json)?)
}
