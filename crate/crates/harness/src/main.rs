use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use compresslab::distill::{distill_until, train_teacher, RunState, Telemetry};
use compresslab::importance::*;
use compresslab::model::{Checkpoint, HookSite};
use compresslab::surgery::{apply_spec, enumerate_candidates, CandidateGrid};
use compresslab::{Error, Result, Tensor};
use harness::config::HarnessConfig;
use harness::pipeline::choose_spec;
use harness::record::load_records;
use harness::*;

#[derive(Parser)]
#[command(
    name = "compresslab",
    version,
    about = "Prune, distill, evaluate and benchmark small transformers"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Overrides every training and sampling seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bitwise-reproducible outputs: no timings in records or telemetry.
    #[arg(long, global = true)]
    strict: bool,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher from scratch on the configured corpus.
    TrainTeacher {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compute importance scores for a checkpoint.
    Score {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: ScoreMethod,
        /// Weight tensor for weight-level methods.
        #[arg(long)]
        weight: Option<String>,
    },
    /// Prune a checkpoint with a spec file or the configured targets.
    Prune {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        intermediate: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Distill a student from a teacher.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a saved run state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        save_every: usize,
    },
    /// Held-out perplexity, and recovery against a teacher when given.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score, prune, distill and evaluate in one go.
    Pipeline,
    /// Run the pipeline for every row of a candidate grid.
    Search {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Only print predicted sizes.
        #[arg(long)]
        predict_only: bool,
    },
    /// Single-stream generation latency and throughput.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long)]
        gen_len: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Tables from one or more record files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreMethod {
    BlockInfluence,
    MinitronHidden,
    MinitronFfn,
    MinitronHead,
    TaylorFfn,
    TaylorHead,
    Magnitude,
    Wanda,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn load_config(g: &Global) -> Result<HarnessConfig> {
    let mut cfg = match &g.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.reseed(s);
    }
    Ok(cfg)
}

fn teacher_path(flag: Option<PathBuf>, cfg: &HarnessConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.teacher.clone())
        .ok_or_else(|| Error::invalid("no teacher checkpoint given (--teacher or `teacher` in the config)"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    let mut cfg = load_config(g)?;
    let out = &g.out_dir;
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::TrainTeacher { steps } => {
            if let Some(s) = steps {
                cfg.train = compresslab::distill::TrainConfig {
                    seed: cfg.train.seed,
                    batch_size: cfg.train.batch_size,
                    seq_len: cfg.train.seq_len,
                    ..compresslab::distill::TrainConfig::with_steps(s)
                };
            }
            let corpus = cfg.corpus.train()?;
            let (teacher, mut tel) = train_teacher(&cfg.model, &corpus, &cfg.train)?;
            if g.strict {
                tel.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
            }
            teacher.save(&out.join("teacher.ckpt"))?;
            tel.save(&out.join("teacher_telemetry.csv"))?;
            let eval = cfg.eval.draw(&cfg.corpus.held_out()?)?;
            let ppl = compresslab::data::perplexity(&teacher, &eval)?;
            println!("teacher held-out ppl {ppl:.4}");
            if let Some(src) = cfg.corpus.markov_source()? {
                println!("generator entropy-rate ppl {:.4}", src.entropy_rate().exp());
            }
        }
        Command::Score { ckpt, method, weight } => {
            let ck = Checkpoint::load(&teacher_path(ckpt, &cfg)?)?;
            let calib = cfg.calibration.draw(&cfg.corpus.train()?)?;
            let report = score(&ck, &calib.tokens, method, weight.as_deref())?;
            let name = serde_json::to_value(report.method)?;
            let path = out
                .join("scores")
                .join(format!("{}.json", name.as_str().unwrap_or("scores")));
            write(&path, &report.to_json()?)?;
            println!("{}", path.display());
        }
        Command::Prune {
            ckpt,
            spec,
            layers,
            intermediate,
            hidden,
        } => {
            let ck = Checkpoint::load(&teacher_path(ckpt, &cfg)?)?;
            if spec.is_some() {
                cfg.prune.spec = spec;
            }
            cfg.prune.layers = layers.or(cfg.prune.layers);
            cfg.prune.intermediate = intermediate.or(cfg.prune.intermediate);
            cfg.prune.hidden = hidden.or(cfg.prune.hidden);
            let spec = choose_spec(&cfg, &ck, out)?;
            let pruned = apply_spec(&ck, &spec)?;
            spec.save(&out.join("spec.toml"))?;
            pruned.save(&out.join("pruned.ckpt"))?;
            println!(
                "params {} -> {} ({:.2}% reduction)",
                ck.num_params(),
                pruned.num_params(),
                reduction_percent(ck.num_params(), pruned.num_params())
            );
        }
        Command::Distill {
            teacher,
            student,
            steps,
            resume,
            save_every,
        } => {
            if let Some(s) = steps {
                let d = compresslab::distill::DistillConfig::with_steps(s);
                cfg.distill.total_steps = s;
                cfg.distill.warmup_steps = d.warmup_steps;
            }
            cfg.distill.validate()?;
            let teacher = Checkpoint::load(&teacher_path(teacher, &cfg)?)?;
            let tel_path = out.join("telemetry.csv");
            let state_path = out.join("run.state");
            let (mut state, mut tel) = match resume {
                Some(p) => (RunState::load(&p)?, Telemetry::load(&tel_path)?),
                None => (
                    RunState::new(Checkpoint::load(&student)?, &cfg.distill),
                    Telemetry::default(),
                ),
            };
            if tel.records.len() != state.next_step {
                return Err(Error::InvalidState("telemetry does not match the run state".into()));
            }
            let corpus = cfg.corpus.train()?;
            let every = save_every.max(1);
            while state.next_step <= cfg.distill.total_steps {
                let until = state.next_step + every - 1;
                distill_until(&teacher, &mut state, &corpus, &cfg.distill, until, &mut tel)?;
                if g.strict {
                    tel.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
                }
                state.save(&state_path)?;
                tel.save(&tel_path)?;
            }
            state.student.save(&out.join("student.ckpt"))?;
            if let Some(last) = tel.records.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
        }
        Command::Eval { ckpt, teacher } => {
            let eval = cfg.eval.draw(&cfg.corpus.held_out()?)?;
            let ppl = compresslab::data::perplexity(&Checkpoint::load(&ckpt)?, &eval)?;
            let mut summary = serde_json::json!({ "perplexity": ppl });
            println!("ppl {ppl:.4}");
            if let Some(t) = teacher {
                let tp = compresslab::data::perplexity(&Checkpoint::load(&t)?, &eval)?;
                let rec = recovery_percent(tp, ppl, Direction::LowerBetter)?;
                summary["teacher_perplexity"] = tp.into();
                summary["recovery_pct"] = rec.into();
                println!("teacher ppl {tp:.4}, recovery {rec:.2}%");
            }
            write(&out.join("eval.json"), &serde_json::to_string_pretty(&summary)?)?;
        }
        Command::Pipeline => {
            let record = cmd_pipeline(&cfg, out, g.strict)?;
            print!("{}", cmd_report(std::slice::from_ref(&record))?.text);
            if let Some(f) = &record.failure {
                eprintln!("stage {} failed: {}", f.stage, f.message);
                return Ok(ExitCode::from(if f.numeric { 3 } else { 2 }));
            }
        }
        Command::Search {
            grid,
            steps,
            predict_only,
        } => {
            let grid = CandidateGrid::load(&grid)?;
            if predict_only {
                println!("{:<12} {:>16} {:>10}", "id", "params", "red. %");
                for c in enumerate_candidates(&grid.base, &grid)? {
                    println!("{:<12} {:>16.0} {:>10.2}", c.id, c.predicted_params, c.reduction_pct);
                }
                return Ok(ExitCode::SUCCESS);
            }
            if let Some(s) = steps {
                cfg.search_steps = s;
            }
            let teacher = Checkpoint::load(&teacher_path(None, &cfg)?)?;
            let records = cmd_search(&cfg, &teacher, &grid, out, g.strict)?;
            write(&out.join("records.json"), &serde_json::to_string_pretty(&records)?)?;
            emit_report(&records, out)?;
        }
        Command::Bench {
            ckpt,
            prompt_len,
            gen_len,
            reps,
        } => {
            let b = &cfg.bench;
            let report = cmd_bench(
                &Checkpoint::load(&ckpt)?,
                prompt_len.unwrap_or(b.prompt_len),
                gen_len.unwrap_or(b.gen_len),
                reps.unwrap_or(b.reps),
                b.warmup,
            )?;
            write(&out.join("bench.json"), &serde_json::to_string_pretty(&report)?)?;
            println!(
                "{:.1} tok/s, TTFT {:.3} ms, TPOT {:.3} ms over {} reps",
                report.tokens_per_second, report.median_ttft_ms, report.median_tpot_ms, report.repetitions
            );
        }
        Command::Report { records } => {
            let mut all = Vec::new();
            for p in &records {
                all.extend(load_records(p)?);
            }
            emit_report(&all, out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn emit_report(records: &[ExperimentRecord], out: &Path) -> Result<()> {
    let r = cmd_report(records)?;
    write(&out.join("report.txt"), &r.text)?;
    write(&out.join("comparison.csv"), &r.comparison_csv)?;
    write(&out.join("stages.csv"), &r.stages_csv)?;
    write(&out.join("report.json"), &r.json)?;
    print!("{}", r.text);
    Ok(())
}

fn score(
    ck: &Checkpoint,
    tokens: &compresslab::model::TokenBatch,
    method: ScoreMethod,
    weight: Option<&str>,
) -> Result<ImportanceReport> {
    let cfg = &ck.config;
    let calib = tokens_digest(tokens);
    let digest = config_digest(cfg);
    let report = |m, axis, t: Tensor| ImportanceReport::new(m, axis, t, calib.clone(), digest.clone());
    let agg = Aggregation::AbsMeanThenSquareSum;
    let tap = compresslab::model::NormTap::Attention;
    match method {
        ScoreMethod::BlockInfluence => {
            let bi = block_influence(ck, tokens)?;
            report(
                Method::BlockInfluence,
                Axis::Layer,
                table(&[bi])?.reshape(vec![cfg.num_layers])?,
            )
        }
        ScoreMethod::MinitronHidden => {
            let s = minitron_hidden_importance(&collect_stats(ck, tokens, HookSite::PostNormHidden, agg, tap)?)?;
            report(
                Method::MinitronHidden,
                Axis::Neuron,
                table(&[s])?.reshape(vec![cfg.hidden_size])?,
            )
        }
        ScoreMethod::MinitronFfn => {
            let s = minitron_ffn_importance(&collect_stats(ck, tokens, HookSite::FfnIntermediate, agg, tap)?)?;
            report(Method::MinitronFfn, Axis::Neuron, table(&s)?)
        }
        ScoreMethod::MinitronHead => {
            let s = minitron_head_importance(&collect_stats(
                ck,
                tokens,
                HookSite::HeadOutput,
                Aggregation::L2BatchMeanSeq,
                tap,
            )?)?;
            report(Method::MinitronHead, Axis::Head, table(&s)?)
        }
        ScoreMethod::TaylorFfn | ScoreMethod::TaylorHead => {
            let heads = matches!(method, ScoreMethod::TaylorHead);
            let rows = (0..cfg.num_layers)
                .map(|l| {
                    let groups = if heads {
                        head_groups(cfg, l)
                    } else {
                        ffn_channel_groups(cfg, l)
                    };
                    taylor_group_importance(ck, tokens, &groups)
                })
                .collect::<Result<Vec<_>>>()?;
            report(
                Method::Taylor,
                if heads { Axis::Head } else { Axis::Neuron },
                table(&rows)?,
            )
        }
        ScoreMethod::Magnitude | ScoreMethod::Wanda => {
            let name = weight.ok_or_else(|| Error::invalid("--weight is required for weight-level methods"))?;
            let w = ck.get(name)?;
            if w.ndim() != 2 {
                return Err(Error::invalid(format!("{name} is not a matrix")));
            }
            if matches!(method, ScoreMethod::Magnitude) {
                report(Method::Magnitude, Axis::Weight, score_magnitude(w))
            } else {
                let norms = compute_activation_norms(ck, tokens)?;
                let x = norms
                    .get(name)
                    .ok_or_else(|| Error::invalid(format!("no activation norms for {name}")))?;
                report(Method::Wanda, Axis::Weight, score_wanda(w, x)?)
            }
        }
    }
}
