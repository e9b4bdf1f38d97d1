use std::time::Instant;

use compresslab::data::*;
use compresslab::distill::*;
use compresslab::model::*;
use proptest::prelude::*;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        hidden_size: 16,
        intermediate_size: 32,
        num_layers: layers,
        num_heads: 2,
        num_kv_heads: 1,
        head_dim: 8,
        max_seq_len: 32,
        rope_base: 10000.0,
        norm_eps: 1e-5,
        tie_embeddings: false,
    }
}

fn markov() -> Corpus {
    MarkovSource::random(6, 2, 11).unwrap().corpus(16, 400, 3)
}

fn quick(steps: usize) -> DistillConfig {
    DistillConfig {
        batch_size: 4,
        seq_len: 16,
        seed: 5,
        ..DistillConfig::with_steps(steps)
    }
}

#[test]
fn cosine_examples() {
    let cfg = DistillConfig::with_steps(2000);
    assert_eq!(cfg.warmup_steps, 20);
    assert_eq!(cosine_lr(0, &cfg).unwrap(), 0.0);
    assert!((cosine_lr(10, &cfg).unwrap() - 7.5e-5).abs() < 1e-12);
    assert_eq!(cosine_lr(20, &cfg).unwrap(), 1.5e-4);
    assert_eq!(cosine_lr(2000, &cfg).unwrap(), 1.5e-5);
    let mid = cosine_lr(1010, &cfg).unwrap();
    assert!((mid - 8.25e-5).abs() < 1e-12, "{mid}");
    assert!(cosine_lr(2001, &cfg).is_err());
}

proptest! {
    #[test]
    fn cosine_is_bounded_and_decays(total in 2usize..5000, frac in 0.0f64..0.5) {
        let mut cfg = DistillConfig::with_steps(total);
        cfg.warmup_steps = ((total as f64 * frac) as usize).min(total - 1);
        let mut prev = f64::INFINITY;
        for s in cfg.warmup_steps..=total {
            let lr = cosine_lr(s, &cfg).unwrap();
            prop_assert!(lr >= cfg.floor_lr && lr <= cfg.peak_lr);
            prop_assert!(lr <= prev);
            prev = lr;
        }
        for s in 0..cfg.warmup_steps {
            prop_assert!(cosine_lr(s, &cfg).unwrap() < cfg.peak_lr);
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = quick(10);
    c.temperature = 0.0;
    assert!(c.validate().is_err());
    let mut c = quick(10);
    c.warmup_steps = 10;
    assert!(c.validate().is_err());
    let mut c = quick(10);
    c.floor_lr = 1.0;
    assert!(c.validate().is_err());
    let mut c = quick(10);
    c.adamw.beta2 = 1.0;
    assert!(c.validate().is_err());
    let mut c = quick(10);
    c.seq_len = 1;
    assert!(c.validate().is_err());
}

#[test]
fn identical_student_has_zero_loss_and_stays_put() {
    let teacher = build_model(&tiny(2), 1).unwrap();
    let mut student = teacher.clone();
    let mut cfg = quick(10);
    cfg.adamw.weight_decay = 0.0;
    let mut opt = AdamW::new(cfg.adamw);
    let batch = sample_calibration(&markov(), 4, 16, 0).unwrap();
    for step in 0..3 {
        let rec = distill_step(&teacher, &mut student, &mut opt, &batch.tokens, &cfg, step).unwrap();
        assert!(rec.loss.abs() < 1e-6, "{}", rec.loss);
        assert!(rec.grad_norm < 1e-6, "{}", rec.grad_norm);
    }
    for (name, t) in &teacher.tensors {
        let s = &student.tensors[name];
        let diff = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "{name} moved by {diff}");
    }
}

#[test]
fn teacher_is_never_modified() {
    let teacher = build_model(&tiny(2), 1).unwrap();
    let before = teacher.weights_digest().unwrap();
    let student = build_model(&tiny(1), 2).unwrap();
    let (_, tel) = distill(&teacher, student, &markov(), &quick(100)).unwrap();
    assert_eq!(tel.records.len(), 101);
    assert_eq!(teacher.weights_digest().unwrap(), before);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let teacher = build_model(&tiny(1), 1).unwrap();
    let mut other = tiny(1);
    other.vocab_size = 300;
    let mut student = build_model(&other, 1).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let batch = sample_calibration(&markov(), 2, 8, 0).unwrap();
    assert!(distill_step(&teacher, &mut student, &mut opt, &batch.tokens, &quick(10), 0).is_err());
}

#[test]
fn non_finite_teacher_is_a_numeric_error() {
    let mut teacher = build_model(&tiny(1), 1).unwrap();
    teacher.tensors.get_mut("lm_head.weight").unwrap().data_mut()[0] = f32::NAN;
    let mut student = build_model(&tiny(1), 2).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let batch = sample_calibration(&markov(), 2, 8, 0).unwrap();
    let err = distill_step(&teacher, &mut student, &mut opt, &batch.tokens, &quick(10), 3).unwrap_err();
    assert!(matches!(err, compresslab::Error::Numeric(_)), "{err}");
}

#[test]
fn distillation_is_deterministic_and_reduces_loss() {
    let corpus = markov();
    let teacher = train_teacher(
        &tiny(2),
        &corpus,
        &TrainConfig {
            batch_size: 4,
            seq_len: 16,
            ..TrainConfig::with_steps(60)
        },
    )
    .unwrap()
    .0;
    let student = build_model(&tiny(1), 9).unwrap();
    let mut cfg = quick(150);
    cfg.peak_lr = 3e-3;
    cfg.floor_lr = 3e-4;
    let (a, ta) = distill(&teacher, student.clone(), &corpus, &cfg).unwrap();
    let (b, tb) = distill(&teacher, student, &corpus, &cfg).unwrap();
    assert_eq!(a.weights_digest().unwrap(), b.weights_digest().unwrap());
    assert_eq!(ta.digest(), tb.digest());
    let s = ta.smoothed(25, usize::MAX);
    assert!(s.last().unwrap() < &(0.7 * s[0]), "{s:?}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let corpus = markov();
    let teacher = build_model(&tiny(2), 1).unwrap();
    let student = build_model(&tiny(1), 2).unwrap();
    let cfg = quick(30);
    let (full, full_tel) = distill(&teacher, student.clone(), &corpus, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.state");
    let mut state = RunState::new(student, &cfg);
    let mut tel = Telemetry::default();
    distill_until(&teacher, &mut state, &corpus, &cfg, 12, &mut tel).unwrap();
    assert_eq!(state.next_step, 13);
    state.save(&path).unwrap();
    tel.save(&dir.path().join("tel.csv")).unwrap();
    drop(state);

    let mut state = RunState::load(&path).unwrap();
    let mut tel = Telemetry::load(&dir.path().join("tel.csv")).unwrap();
    distill_until(&teacher, &mut state, &corpus, &cfg, usize::MAX, &mut tel).unwrap();
    assert_eq!(state.student.weights_digest().unwrap(), full.weights_digest().unwrap());
    assert_eq!(tel.digest(), full_tel.digest());
}

#[test]
fn run_state_rejects_plain_checkpoints() {
    let ck = build_model(&tiny(1), 1).unwrap();
    assert!(RunState::from_bytes(&ck.to_bytes().unwrap()).is_err());
    let state = RunState::new(ck.clone(), &quick(10));
    assert!(Checkpoint::from_bytes(&state.to_bytes().unwrap()).is_err());
    assert_eq!(RunState::from_bytes(&state.to_bytes().unwrap()).unwrap(), state);
}

#[test]
fn telemetry_csv_round_trip() {
    let mut t = Telemetry::default();
    assert_eq!(Telemetry::from_csv(&t.to_csv().unwrap()).unwrap(), t);
    for step in 0..5 {
        t.push(StepRecord {
            step,
            lr: 1e-4 / (step + 1) as f64,
            loss: 3.0 - step as f64 * 0.123456789,
            grad_norm: 0.1 * step as f64,
            wall_ms: 12.5,
        })
        .unwrap();
    }
    let back = Telemetry::from_csv(&t.to_csv().unwrap()).unwrap();
    assert_eq!(back, t);
    assert!(t
        .clone()
        .push(StepRecord {
            step: 9,
            lr: 0.0,
            loss: 0.0,
            grad_norm: 0.0,
            wall_ms: 0.0
        })
        .is_err());
    assert!(Telemetry::from_csv("step,lr\n0,1\n").is_err());
}

#[test]
fn teacher_training_beats_initialization() {
    let corpus = markov();
    let cfg = TrainConfig {
        batch_size: 4,
        seq_len: 16,
        ..TrainConfig::with_steps(80)
    };
    let (trained, tel) = train_teacher(&tiny(2), &corpus, &cfg).unwrap();
    let fresh = build_model(&tiny(2), cfg.seed).unwrap();
    let eval = sample_calibration(&corpus, 16, 16, 999).unwrap();
    let (p0, p1) = (perplexity(&fresh, &eval).unwrap(), perplexity(&trained, &eval).unwrap());
    assert!(p1 < 0.5 * p0, "{p0} -> {p1}");
    assert_eq!(tel.records.len(), 81);
}

#[test]
fn constant_corpus_drives_perplexity_to_one() {
    let corpus = Corpus::new(vec![vec![b'a'; 200]], "const");
    let cfg = TrainConfig {
        batch_size: 4,
        seq_len: 16,
        ..TrainConfig::with_steps(400)
    };
    let (trained, _) = train_teacher(&tiny(1), &corpus, &cfg).unwrap();
    let eval = sample_calibration(&corpus, 4, 16, 1).unwrap();
    let ppl = perplexity(&trained, &eval).unwrap();
    assert!(ppl < 1.05, "{ppl}");
}

#[test]
#[ignore = "timing probe for the toy teacher"]
fn toy_step_time() {
    let corpus = markov();
    let teacher = build_model(&ModelConfig::toy_teacher(), 1).unwrap();
    let mut student = teacher.clone();
    let cfg = DistillConfig::default();
    let mut opt = AdamW::new(cfg.adamw);
    let batch = sample_calibration(&corpus, cfg.batch_size, cfg.seq_len, 0).unwrap();
    let t = Instant::now();
    for s in 0..5 {
        distill_step(&teacher, &mut student, &mut opt, &batch.tokens, &cfg, s).unwrap();
    }
    eprintln!("{:.1} ms/step", t.elapsed().as_secs_f64() * 200.0);
}

#[test]
fn frozen_forward_allocates_no_gradients() {
    use compresslab::autograd::Graph;
    let teacher = build_model(&tiny(2), 1).unwrap();
    let batch = sample_calibration(&markov(), 2, 8, 0).unwrap();
    let mut g = Graph::new();
    let out = forward_graph(&mut g, &teacher, &batch.tokens, &ForwardOptions::default(), false).unwrap();
    let loss = g.mean(out.logits);
    g.backward(loss).unwrap();
    assert_eq!(g.grad_buffers(), 0);
    assert!(out.params.iter().all(|(_, v)| g.grad(*v).is_none()));
}

#[test]
fn partial_configs_fill_defaults() {
    let c: DistillConfig = toml::from_str("total_steps = 500").unwrap();
    assert_eq!(c, DistillConfig::with_steps(500));
    let c: DistillConfig = toml::from_str("grad_clip_norm = false\nseed = 3").unwrap();
    assert_eq!(c.grad_clip_norm, None);
    assert_eq!(c.seed, 3);
    assert!(toml::from_str::<DistillConfig>("tempreature = 2.0").is_err());
    for c in [DistillConfig::with_steps(77), c] {
        let back: DistillConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let back: DistillConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
    let t: TrainConfig = toml::from_str("total_steps = 40\nbatch_size = 2").unwrap();
    assert_eq!(t.warmup_steps, 2);
    assert_eq!(t.batch_size, 2);
}
