use serde::{Deserialize, Serialize};

use super::ops::{prune_depth, select_topk};
use super::spec::{Keep, PerLayer, PruneSpec};
use crate::error::{Error, Result};
use crate::importance::*;
use crate::model::{Checkpoint, HookSite, ModelConfig, NormTap, TokenBatch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnScoring {
    /// Each layer's channels ranked on their own statistics.
    #[default]
    PerLayer,
    /// One ranking from statistics summed over layers.
    Summed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOptions {
    /// Recollect width statistics on the depth-pruned model. When false,
    /// scores from the original model are indexed by surviving layer.
    #[serde(default = "yes")]
    pub rescore_after_depth: bool,
    #[serde(default)]
    pub ffn_scoring: FfnScoring,
    #[serde(default)]
    pub norm_tap: NormTap,
}

fn yes() -> bool {
    true
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            rescore_after_depth: true,
            ffn_scoring: FfnScoring::PerLayer,
            norm_tap: NormTap::Attention,
        }
    }
}

/// A spec chosen from importance scores plus the reports it was built from.
#[derive(Clone, Debug)]
pub struct Plan {
    pub spec: PruneSpec,
    pub reports: Vec<ImportanceReport>,
}

/// Drops the lowest-BI layers, then keeps the top FFN channels (per layer)
/// and top hidden channels by activation importance until `target`'s
/// layer, intermediate and hidden sizes are met. Head counts are not
/// changed by the planner.
pub fn plan_prune(ckpt: &Checkpoint, calib: &TokenBatch, target: &ModelConfig, opts: &PlanOptions) -> Result<Plan> {
    let cfg = &ckpt.config;
    if target.num_layers > cfg.num_layers
        || target.intermediate_size > cfg.intermediate_size
        || target.hidden_size > cfg.hidden_size
    {
        return Err(Error::invalid("target is larger than the model along some axis"));
    }
    if target.num_layers == 0 && cfg.num_layers > 0 {
        return Err(Error::invalid("cannot drop every layer"));
    }
    let calib_digest = tokens_digest(calib);
    let mut reports = Vec::new();
    let mut spec = PruneSpec::default();
    let mut original_ffn = None;

    if target.num_layers < cfg.num_layers {
        let bi = block_influence(ckpt, calib)?;
        let kept = select_topk(&bi, target.num_layers)?;
        spec.drop_layers = (0..cfg.num_layers).filter(|l| kept.binary_search(l).is_err()).collect();
        reports.push(ImportanceReport::new(
            Method::BlockInfluence,
            Axis::Layer,
            table(&[bi])?.reshape(vec![cfg.num_layers])?,
            calib_digest.clone(),
            config_digest(cfg),
        )?);
        if !opts.rescore_after_depth && target.intermediate_size < cfg.intermediate_size {
            original_ffn = Some(ffn_scores(ckpt, calib, opts.ffn_scoring)?);
        }
    }
    let reduced = prune_depth(ckpt, &spec.drop_layers)?;
    let layers = reduced.config.num_layers;

    if target.intermediate_size < cfg.intermediate_size {
        let scores = match original_ffn {
            Some(all) => {
                let survivors: Vec<usize> = (0..cfg.num_layers)
                    .filter(|l| spec.drop_layers.binary_search(l).is_err())
                    .collect();
                survivors.iter().map(|&l| all[l].clone()).collect()
            }
            None => ffn_scores(&reduced, calib, opts.ffn_scoring)?,
        };
        let keep = scores
            .iter()
            .map(|s| select_topk(s, target.intermediate_size).map(Keep::Indices))
            .collect::<Result<Vec<_>>>()?;
        spec.keep_ffn = PerLayer::Layers(keep);
        reports.push(ImportanceReport::new(
            Method::MinitronFfn,
            Axis::Neuron,
            table(&scores)?,
            calib_digest.clone(),
            config_digest(&reduced.config),
        )?);
    }
    if target.hidden_size < cfg.hidden_size && layers > 0 {
        let stats = collect_stats(
            &reduced,
            calib,
            HookSite::PostNormHidden,
            Aggregation::AbsMeanThenSquareSum,
            opts.norm_tap,
        )?;
        let scores = minitron_hidden_importance(&stats)?;
        spec.keep_hidden = Keep::Indices(select_topk(&scores, target.hidden_size)?);
        reports.push(ImportanceReport::new(
            Method::MinitronHidden,
            Axis::Neuron,
            table(&[scores])?.reshape(vec![cfg.hidden_size])?,
            calib_digest.clone(),
            config_digest(&reduced.config),
        )?);
    }
    spec.provenance.insert("calib_digest".into(), calib_digest);
    for r in &reports {
        spec.provenance
            .insert(format!("{:?}", r.method).to_lowercase(), r.config_digest.clone());
    }
    Ok(Plan { spec, reports })
}

fn ffn_scores(ckpt: &Checkpoint, calib: &TokenBatch, mode: FfnScoring) -> Result<Vec<Vec<f64>>> {
    let stats = collect_stats(
        ckpt,
        calib,
        HookSite::FfnIntermediate,
        Aggregation::AbsMeanThenSquareSum,
        NormTap::Attention,
    )?;
    match mode {
        FfnScoring::PerLayer => minitron_ffn_importance(&stats),
        FfnScoring::Summed => minitron_ffn_importance_summed(&stats),
    }
}
