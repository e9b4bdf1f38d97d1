use std::path::{Path, PathBuf};

use compresslab::data::{sample_calibration, CalibrationBatch, Corpus, MarkovSource};
use compresslab::distill::{DistillConfig, TrainConfig};
use compresslab::model::ModelConfig;
use compresslab::surgery::{GridRow, PlanOptions};
use compresslab::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where training and held-out text come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    /// Synthetic Markov text of the given order. Held-out text is a fresh sample
    /// of the same chain.
    Markov {
        states: usize,
        #[serde(default = "one")]
        order: usize,
        extra: usize,
        chain_seed: u64,
        docs: usize,
        doc_len: usize,
        sample_seed: u64,
    },
    /// A directory of text files; `held_out` defaults to the same directory.
    Dir { path: PathBuf, held_out: Option<PathBuf> },
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::Markov {
            states: 12,
            order: 2,
            extra: 2,
            chain_seed: 7,
            docs: 64,
            doc_len: 2048,
            sample_seed: 1,
        }
    }
}

fn one() -> usize {
    1
}

const HELD_OUT_SALT: u64 = 0x6865_6c64_6f75_7421;

impl CorpusSpec {
    pub fn markov_source(&self) -> Result<Option<MarkovSource>> {
        match self {
            CorpusSpec::Markov {
                states,
                order,
                extra,
                chain_seed,
                ..
            } => MarkovSource::random_order(*states, *order, *extra, *chain_seed).map(Some),
            CorpusSpec::Dir { .. } => Ok(None),
        }
    }

    pub fn train(&self) -> Result<Corpus> {
        match self {
            CorpusSpec::Markov {
                docs,
                doc_len,
                sample_seed,
                ..
            } => Ok(self.source()?.corpus(*docs, *doc_len, *sample_seed)),
            CorpusSpec::Dir { path, .. } => Corpus::from_dir(path),
        }
    }

    pub fn held_out(&self) -> Result<Corpus> {
        match self {
            CorpusSpec::Markov {
                docs,
                doc_len,
                sample_seed,
                ..
            } => Ok(self
                .source()?
                .corpus((*docs / 4).max(1), *doc_len, sample_seed ^ HELD_OUT_SALT)),
            CorpusSpec::Dir { path, held_out } => Corpus::from_dir(held_out.as_ref().unwrap_or(path)),
        }
    }

    fn source(&self) -> Result<MarkovSource> {
        self.markov_source()?
            .ok_or_else(|| Error::invalid("not a Markov corpus"))
    }
}

/// `samples` windows of `seq_len` tokens drawn with `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn draw(&self, corpus: &Corpus) -> Result<CalibrationBatch> {
        sample_calibration(corpus, self.samples, self.seq_len, self.seed)
    }
}

/// How the pruned student is chosen: an explicit spec file, or target
/// sizes handed to the importance-driven planner.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub spec: Option<PathBuf>,
    pub layers: Option<usize>,
    pub intermediate: Option<usize>,
    pub hidden: Option<usize>,
    pub options: PlanOptions,
}

impl PruneSection {
    pub fn from_row(row: &GridRow) -> Self {
        Self {
            spec: None,
            layers: row.layers,
            intermediate: row.intermediate,
            hidden: row.hidden,
            options: PlanOptions::default(),
        }
    }

    pub fn row(&self, id: &str) -> GridRow {
        GridRow {
            id: id.to_string(),
            hidden: self.hidden,
            intermediate: self.intermediate,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Bench the teacher and student at the end of a pipeline run. Skipped
    /// in strict mode, where records must not carry timings.
    pub in_pipeline: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            prompt_len: 16,
            gen_len: 128,
            reps: 5,
            warmup: 2,
            in_pipeline: true,
        }
    }
}

/// Everything a harness command may need. Every section is optional in the
/// file; subcommands read only what they use.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub id: String,
    /// Teacher checkpoint; relative paths resolve against the config file.
    pub teacher: Option<PathBuf>,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub calibration: SampleSpec,
    pub eval: SampleSpec,
    pub prune: PruneSection,
    pub distill: DistillConfig,
    pub bench: BenchSection,
    /// Distillation budget for each search candidate.
    pub search_steps: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            id: "run".into(),
            teacher: None,
            model: ModelConfig::toy_teacher(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            calibration: SampleSpec {
                samples: 32,
                seq_len: 64,
                seed: 11,
            },
            eval: SampleSpec {
                samples: 64,
                seq_len: 64,
                seed: 12,
            },
            prune: PruneSection::default(),
            distill: DistillConfig::default(),
            bench: BenchSection::default(),
            search_steps: 1000,
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads a config file and resolves relative paths inside it against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(t) = cfg.teacher.as_mut() {
            fix(t);
        }
        if let Some(s) = cfg.prune.spec.as_mut() {
            fix(s);
        }
        if let CorpusSpec::Dir { path, held_out } = &mut cfg.corpus {
            fix(path);
            if let Some(h) = held_out.as_mut() {
                fix(h);
            }
        }
        Ok(cfg)
    }

    /// Sets every training and sampling seed except the held-out one.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.distill.seed = seed;
        self.calibration.seed = seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        if self.calibration.samples == 0 || self.eval.samples == 0 || self.eval.seq_len < 2 {
            return Err(Error::invalid(
                "calibration and eval need samples >= 1 and eval seq_len >= 2",
            ));
        }
        if self.bench.reps < 5 {
            return Err(Error::invalid("bench needs at least 5 repetitions"));
        }
        if self.search_steps < 2 {
            return Err(Error::invalid("search_steps must be at least 2"));
        }
        Ok(())
    }
}
