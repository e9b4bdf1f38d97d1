//! Central-difference checks of every differentiable primitive and of the
//! distillation loss through a whole model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::central;
use super::{finite_diff_check, softmax_t, Graph, Var};
use crate::error::Result;
use crate::model::{build_model, forward_graph, Checkpoint, ForwardOptions, ModelConfig, TokenBatch};
use crate::tensor::Tensor;

/// Step used by the suite. Smaller steps drown tiny gradients in f32
/// rounding noise; the fourth-order stencil keeps truncation error small.
pub const SUITE_EPS: f32 = 0.1;
/// Step for the whole-model cases, whose loss bends much faster in each
/// weight than a single primitive does.
pub const MODEL_EPS: f32 = 1e-3;

/// How a case's error is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorMetric {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over elements.
    Elementwise,
    /// `||a - n|| / max(||a||, ||n||)` over the whole tensor. Used for the
    /// model cases, where some elements have gradients near the f32
    /// rounding floor of the loss.
    TensorNorm,
}

/// Worst relative gradient error of one case over all seeds.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub elements: usize,
    pub metric: ErrorMetric,
    pub worst: f64,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], std: f32, seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), std, &mut rng(seed))
}

/// Projects `y` onto fixed random weights so every output element matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut r = rng(seed ^ 0x9e37);
    let n = shape.iter().product::<usize>();
    let w = (0..n)
        .map(|_| r.random_range(0.5..1.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type CaseFn = Box<dyn Fn(&mut Graph, Var, u64) -> Result<Var>>;

fn primitive_cases() -> Vec<(String, Vec<usize>, CaseFn)> {
    let mut cases: Vec<(String, Vec<usize>, CaseFn)> = Vec::new();
    let mut add = |name: &str, shape: &[usize], f: CaseFn| cases.push((name.to_string(), shape.to_vec(), f));

    add(
        "matmul lhs",
        &[3, 4],
        Box::new(|g, x, s| {
            let b = g.constant(randn(&[4, 5], 1.0, s + 100));
            let y = g.matmul(x, b)?;
            probe(g, y, s)
        }),
    );
    add(
        "matmul rhs",
        &[4, 5],
        Box::new(|g, x, s| {
            let a = g.constant(randn(&[3, 4], 1.0, s + 100));
            let y = g.matmul(a, x)?;
            probe(g, y, s)
        }),
    );
    add(
        "linear weight",
        &[5, 4],
        Box::new(|g, w, s| {
            let a = g.constant(randn(&[3, 4], 1.0, s + 100));
            let y = g.linear(a, w)?;
            probe(g, y, s)
        }),
    );
    add(
        "matmul transposed lhs",
        &[4, 3],
        Box::new(|g, x, s| {
            let b = g.constant(randn(&[4, 2], 1.0, s + 100));
            let y = g.matmul_t(x, b, true, false)?;
            probe(g, y, s)
        }),
    );
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        add(
            &format!("bmm lhs ta={ta} tb={tb}"),
            &[2, 3, 4],
            Box::new(move |g, x, s| {
                let sh = if ta { [2, 3, 3] } else { [2, 4, 3] };
                let b_shape = if tb { vec![2, sh[2], sh[1]] } else { sh.to_vec() };
                let b = g.constant(randn(&b_shape, 1.0, s + 7));
                let y = g.bmm(x, b, ta, tb)?;
                probe(g, y, s)
            }),
        );
        add(
            &format!("bmm rhs ta={ta} tb={tb}"),
            &[2, 3, 4],
            Box::new(move |g, x, s| {
                let k = if tb { 4 } else { 3 };
                let a_shape = if ta { vec![2, k, 2] } else { vec![2, 2, k] };
                let a = g.constant(randn(&a_shape, 1.0, s + 7));
                let y = g.bmm(a, x, ta, tb)?;
                probe(g, y, s)
            }),
        );
    }
    add(
        "add",
        &[4, 4],
        Box::new(|g, x, s| {
            let c = g.constant(randn(&[4, 4], 1.0, s + 1));
            let y = g.add(x, c)?;
            probe(g, y, s)
        }),
    );
    add(
        "sub",
        &[4, 4],
        Box::new(|g, x, s| {
            let c = g.constant(randn(&[4, 4], 1.0, s + 1));
            let y = g.sub(c, x)?;
            probe(g, y, s)
        }),
    );
    add(
        "mul",
        &[4, 4],
        Box::new(|g, x, s| {
            let c = g.constant(randn(&[4, 4], 1.0, s + 1));
            let y = g.mul(x, c)?;
            probe(g, y, s)
        }),
    );
    add(
        "scale",
        &[4, 4],
        Box::new(|g, x, s| {
            let y = g.scale(x, -1.7);
            probe(g, y, s)
        }),
    );
    add(
        "silu",
        &[4, 4],
        Box::new(|g, x, s| {
            let y = g.silu(x);
            probe(g, y, s)
        }),
    );
    add(
        "log",
        &[4, 4],
        Box::new(|g, x, s| {
            let sq = g.mul(x, x)?;
            let one = g.constant(Tensor::full(vec![4, 4], 1.0));
            let pos = g.add(sq, one)?;
            let y = g.log(pos);
            probe(g, y, s)
        }),
    );
    add(
        "sum",
        &[8],
        Box::new(|g, x, s| {
            let c = g.constant(randn(&[8], 1.0, s + 1));
            let sq = g.mul(x, x)?;
            let y = g.mul(sq, c)?;
            Ok(g.sum(y))
        }),
    );
    add(
        "mean",
        &[8],
        Box::new(|g, x, s| {
            let c = g.constant(randn(&[8], 1.0, s + 1));
            let sq = g.mul(x, x)?;
            let y = g.mul(sq, c)?;
            Ok(g.mean(y))
        }),
    );
    add(
        "rms_norm input",
        &[3, 8],
        Box::new(|g, x, s| {
            let w = g.constant(randn(&[8], 1.0, s + 3));
            let y = g.rms_norm(x, w, 1e-5)?;
            probe(g, y, s)
        }),
    );
    add(
        "rms_norm weight",
        &[8],
        Box::new(|g, w, s| {
            let x = g.constant(randn(&[3, 8], 1.0, s + 3));
            let y = g.rms_norm(x, w, 1e-5)?;
            probe(g, y, s)
        }),
    );
    add(
        "embedding",
        &[5, 3],
        Box::new(|g, t, s| {
            let y = g.embedding(t, &[4, 0, 4, 2])?;
            probe(g, y, s)
        }),
    );
    add(
        "softmax",
        &[3, 6],
        Box::new(|g, x, s| {
            let y = g.softmax(x);
            probe(g, y, s)
        }),
    );
    add(
        "rope",
        &[1, 3, 2, 4],
        Box::new(|g, x, s| {
            let y = g.rope(x, 2, 10000.0)?;
            probe(g, y, s)
        }),
    );
    add(
        "causal mask + softmax",
        &[2, 4, 4],
        Box::new(|g, x, s| {
            let m = g.causal_mask(x)?;
            let y = g.softmax(m);
            probe(g, y, s)
        }),
    );
    add(
        "swap axes",
        &[2, 3, 2, 2],
        Box::new(|g, x, s| {
            let y = g.swap_axes12(x)?;
            probe(g, y, s)
        }),
    );
    add(
        "repeat kv",
        &[1, 2, 3, 2],
        Box::new(|g, x, s| {
            let y = g.repeat_kv(x, 3)?;
            probe(g, y, s)
        }),
    );
    add(
        "reshape",
        &[2, 6],
        Box::new(|g, x, s| {
            let y = g.reshape(x, &[3, 4])?;
            probe(g, y, s)
        }),
    );
    add(
        "cross entropy",
        &[4, 7],
        Box::new(|g, x, _| g.cross_entropy(x, &[0, 6, 3, 3])),
    );
    add(
        "kl forward",
        &[4, 7],
        Box::new(|g, x, s| {
            let t = randn(&[4, 7], 2.0, s + 50);
            g.kl_div(&t, x, 2.0)
        }),
    );
    // KL assembled from softmax/log/mul/sum instead of the fused node.
    add(
        "kl composed",
        &[4, 7],
        Box::new(|g, x, s| {
            let t = randn(&[4, 7], 2.0, s + 50);
            let p = softmax_t(&t, 2.0)?;
            let logp = p.data().iter().map(|v| v.ln()).collect();
            let p_v = g.constant(p.clone());
            let logp = g.constant(Tensor::new(vec![4, 7], logp)?);
            let zs = g.scale(x, 0.5);
            let q = g.softmax(zs);
            let logq = g.log(q);
            let diff = g.sub(logp, logq)?;
            let terms = g.mul(p_v, diff)?;
            let total = g.sum(terms);
            Ok(g.scale(total, 0.25))
        }),
    );
    cases
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        hidden_size: 4,
        intermediate_size: 6,
        num_layers: 1,
        num_heads: 2,
        num_kv_heads: 1,
        head_dim: 2,
        max_seq_len: 8,
        rope_base: 10000.0,
        norm_eps: 1e-5,
        tie_embeddings: false,
    }
}

fn randomized(cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let mut ck = build_model(cfg, seed)?;
    let mut r = rng(seed ^ 0x51);
    for (name, t) in ck.tensors.iter_mut() {
        let std = if name.ends_with("norm.weight") { 0.2 } else { 0.6 };
        let noise = Tensor::randn(t.shape().to_vec(), std, &mut r);
        if name.ends_with("norm.weight") {
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(w, n)| *w = 1.0 + n);
        } else {
            *t = noise;
        }
    }
    Ok(ck)
}

fn distill_loss(teacher_logits: &Tensor, student: &Checkpoint, batch: &TokenBatch, temperature: f32) -> Result<f64> {
    let mut g = Graph::new();
    let out = forward_graph(&mut g, student, batch, &ForwardOptions::default(), false)?;
    let loss = g.kl_div(teacher_logits, out.logits, temperature)?;
    g.scalar_f64(loss)
}

/// Checks the gradient of the temperature-scaled KL loss through a whole
/// one-layer model against central differences, for every weight tensor.
fn model_cases(seeds: u64, eps: f32) -> Result<Vec<GradCase>> {
    let cfg = tiny_model();
    let mut worst: std::collections::BTreeMap<String, (usize, f64)> = Default::default();
    for seed in 0..seeds {
        let teacher = randomized(&cfg, seed + 1000)?;
        let student = randomized(&cfg, seed)?;
        let mut r = rng(seed ^ 0x70);
        let ids = (0..8).map(|_| r.random_range(0..cfg.vocab_size as u32)).collect();
        let batch = TokenBatch::new(2, 4, ids)?;
        let t_logits = {
            let mut g = Graph::new();
            let out = forward_graph(&mut g, &teacher, &batch, &ForwardOptions::default(), false)?;
            g.value(out.logits).clone()
        };
        let mut g = Graph::new();
        let out = forward_graph(&mut g, &student, &batch, &ForwardOptions::default(), true)?;
        let loss = g.kl_div(&t_logits, out.logits, 2.0)?;
        g.backward(loss)?;
        for (name, v) in &out.params {
            let analytic = g.grad(*v).expect("parameter gradient");
            let point = student.tensors[name].clone();
            let eval = |p: Tensor| -> Result<f64> {
                let mut s = student.clone();
                s.tensors.insert(name.clone(), p);
                distill_loss(&t_logits, &s, &batch, 2.0)
            };
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for (i, &a) in analytic.iter().enumerate() {
                let numeric = central(&eval, &point, i, eps)?;
                let a = a as f64;
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
            }
            let err = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12);
            let e = worst.entry(format!("model kl: {name}")).or_insert((point.numel(), 0.0));
            e.1 = e.1.max(err);
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, (elements, worst))| GradCase {
            name,
            elements,
            metric: ErrorMetric::TensorNorm,
            worst,
        })
        .collect())
}

/// Runs every case for seeds `0..seeds` and reports the worst error of each.
pub fn gradient_suite(seeds: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (name, shape, f) in primitive_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let x = randn(&shape, 1.0, seed);
            worst = worst.max(finite_diff_check(|g, v| f(g, v, seed), &x, SUITE_EPS)?);
        }
        out.push(GradCase {
            name,
            elements: shape.iter().product(),
            metric: ErrorMetric::Elementwise,
            worst,
        });
    }
    out.extend(model_cases(seeds, MODEL_EPS)?);
    Ok(out)
}
