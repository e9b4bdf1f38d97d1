//! The checked-in fuzz seeds must decode, and no decoder may panic on
//! mutated seeds or arbitrary bytes.

use std::path::PathBuf;

use compresslab::distill::{RunState, Telemetry};
use compresslab::importance::ImportanceReport;
use compresslab::model::Checkpoint;
use compresslab::surgery::{CandidateGrid, PruneSpec};
use harness::{parse_report, HarnessConfig};
use proptest::prelude::*;

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

/// Runs the decoder for `target` and says whether it accepted the input.
fn decode(target: &str, data: &[u8]) -> bool {
    match target {
        "container" => compresslab::format::decode(data).is_ok(),
        "checkpoint" => Checkpoint::from_bytes(data).is_ok(),
        "run_state" => RunState::from_bytes(data).is_ok(),
        "batch_cache" => compresslab::data::decode_batch_cache(data).is_ok(),
        "prune_spec" => text(data).is_some_and(|t| PruneSpec::from_toml(t).is_ok()),
        "grid" => text(data).is_some_and(|t| CandidateGrid::from_toml(t).is_ok()),
        "harness_config" => text(data).is_some_and(|t| HarnessConfig::from_toml(t).is_ok()),
        "importance_report" => text(data).is_some_and(|t| ImportanceReport::from_json(t).is_ok()),
        "report" => text(data).is_some_and(|t| parse_report(t).is_ok()),
        "telemetry" => text(data).is_some_and(|t| Telemetry::from_csv(t).is_ok()),
        "detokenize" => {
            let ids: Vec<u32> = data
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect();
            compresslab::data::detokenize(&ids).is_ok()
        }
        other => panic!("unknown fuzz target {other}"),
    }
}

const TARGETS: &[&str] = &[
    "container",
    "checkpoint",
    "run_state",
    "batch_cache",
    "prune_spec",
    "grid",
    "harness_config",
    "importance_report",
    "report",
    "telemetry",
    "detokenize",
];

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus")
}

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(corpus_dir().join(target))
        .unwrap_or_else(|e| panic!("{target}: {e}"))
        .map(|e| {
            let p = e.unwrap().path();
            (p.display().to_string(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_target_has_seeds_that_decode() {
    for target in TARGETS {
        let s = seeds(target);
        assert!(!s.is_empty(), "{target} has no seeds");
        for (path, data) in s {
            assert!(decode(target, &data), "{path} does not decode");
        }
    }
}

#[test]
fn every_fuzz_target_has_a_corpus() {
    let manifest = std::fs::read_to_string(corpus_dir().join("../Cargo.toml")).unwrap();
    let listed = manifest.matches("[[bin]]").count();
    assert_eq!(listed, TARGETS.len());
    for t in TARGETS {
        assert!(
            manifest.contains(&format!("name = \"{t}\"")),
            "{t} missing from fuzz manifest"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoders_survive_mutated_seeds(
        which in 0..TARGETS.len(),
        pick in any::<prop::sample::Index>(),
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..8),
        cut in any::<prop::sample::Index>(),
    ) {
        let target = TARGETS[which];
        let s = seeds(target);
        let mut data = s[pick.index(s.len())].1.clone();
        if !data.is_empty() {
            for (at, byte) in edits {
                let i = at.index(data.len());
                data[i] = byte;
            }
            data.truncate(cut.index(data.len() + 1));
        }
        decode(target, &data);
    }

    #[test]
    fn decoders_survive_arbitrary_bytes(data in prop::collection::vec(any::<u8>(), 0..512)) {
        for t in TARGETS {
            decode(t, &data);
        }
    }
}
