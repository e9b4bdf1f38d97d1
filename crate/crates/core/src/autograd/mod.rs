//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value
//! and a local backward rule. Nodes are appended in evaluation order, so the
//! node list is already topologically sorted and [`Graph::backward`] walks it
//! once in reverse. Gradients of a value consumed by several nodes are summed.

mod check;
mod loss;
mod suite;

pub use check::finite_diff_check;
pub use loss::{kl_forward, softmax_t, KL_PROB_FLOOR};
pub use suite::{gradient_suite, ErrorMetric, GradCase, MODEL_EPS, SUITE_EPS};

use crate::error::{Error, Result};
use crate::kernels::{self, MASK_VALUE};
use crate::tensor::Tensor;

/// Target value that [`Graph::cross_entropy`] skips.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Rope {
        x: Var,
        offset: usize,
        inv_freq: Vec<f64>,
    },
    CausalMask(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
        counted: usize,
    },
    KlDiv {
        student: Var,
        teacher_probs: Vec<f32>,
        student_probs: Vec<f32>,
        temperature: f32,
    },
    Reshape(Var),
    SwapAxes12(Var),
    RepeatKv {
        x: Var,
        n_rep: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Unrounded accumulator for scalar reductions and losses.
    exact: Option<f64>,
    numel: usize,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            exact: None,
            numel: value.numel(),
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of `v` before rounding to `f32`, when the producing op
    /// accumulated in higher precision.
    pub fn scalar_f64(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        match node.exact {
            Some(x) => Ok(x),
            None => Ok(node.value.item()? as f64),
        }
    }

    fn set_exact(&mut self, v: Var, x: f64) -> Var {
        self.nodes[v.0].exact = Some(x);
        v
    }

    fn exact_of(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].exact
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Number of nodes currently holding a gradient buffer.
    pub fn grad_buffers(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ` for `x: [rows, in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_t(x, w, false, true)
    }

    /// 2-D product `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::invalid(format!("matmul inner dimensions differ: {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            ta,
            tb,
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb, m, k, n }, rg))
    }

    /// Batched product over the leading axis of two 3-D tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::invalid(format!("bmm shapes {sa:?} x {sb:?}")));
        }
        let groups = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::invalid(format!("bmm inner dimensions differ: {k} vs {k2}")));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                kernels::gemm(
                    ta,
                    tb,
                    m,
                    k,
                    n,
                    1.0,
                    &av[g * m * k..(g + 1) * m * k],
                    &bv[g * k * n..(g + 1) * k * n],
                    0.0,
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![groups, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                groups,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        let exact = self.exact_of(a).zip(self.exact_of(b)).map(|(x, y)| x + y);
        let out = self.push(t, Op::Add(a, b), rg);
        Ok(match exact {
            Some(x) => self.set_exact(out, x),
            None => out,
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        let exact = self.exact_of(a).zip(self.exact_of(b)).map(|(x, y)| x - y);
        let out = self.push(t, Op::Sub(a, b), rg);
        Ok(match exact {
            Some(x) => self.set_exact(out, x),
            None => out,
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(a);
        let exact = self.exact_of(a).map(|x| x * c as f64);
        let out = self.push(t, Op::Scale(a, c), rg);
        match exact {
            Some(x) => self.set_exact(out, x),
            None => out,
        }
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, kernels::silu);
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, f32::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    // ---- normalization / lookup ----------------------------------------

    /// RMS normalization over the last axis, scaled by `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let d = self.value(w).numel();
        let xs = self.shape(x);
        if self.value(w).ndim() != 1 || xs.last() != Some(&d) {
            return Err(Error::invalid(format!(
                "rms_norm: input {xs:?} vs weight of length {d}"
            )));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        let inv_rms = kernels::rms_norm(self.value(x).data(), self.value(w).data(), eps, &mut out);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// Gathers rows of `table: [vocab, dim]`; output is `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.clear_grad();
        t.set_requires_grad(false);
        let d = *t.shape().last().unwrap_or(&1);
        kernels::softmax_rows(t.data_mut(), d);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        let rg = self.rg(x);
        let out = self.push(Tensor::scalar(s as f32), Op::Sum(x), rg);
        self.set_exact(out, s)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let rg = self.rg(x);
        let out = self.push(Tensor::scalar(s as f32), Op::Mean(x), rg);
        self.set_exact(out, s)
    }

    // ---- attention helpers ---------------------------------------------

    /// Rotary position embedding over `[batch, seq, heads, head_dim]`,
    /// positions starting at `offset`.
    pub fn rope(&mut self, x: Var, offset: usize, base: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[3] % 2 != 0 {
            return Err(Error::invalid(format!(
                "rope expects [b, s, h, even head_dim], got {s:?}"
            )));
        }
        let inv_freq = kernels::rope_inv_freq(s[3], base);
        let mut t = Tensor::new(s.clone(), self.value(x).data().to_vec())?;
        let hd = s[3];
        for (idx, v) in t.data_mut().chunks_exact_mut(hd).enumerate() {
            let pos = (idx / s[2]) % s[1] + offset;
            kernels::rope_apply(v, pos, &inv_freq, 1.0);
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::Rope { x, offset, inv_freq }, rg))
    }

    /// Masks entries above the diagonal of each `[seq, seq]` slice.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::invalid(format!("causal_mask expects [g, s, s], got {s:?}")));
        }
        let n = s[1];
        let mut t = Tensor::new(s.clone(), self.value(x).data().to_vec())?;
        for m in t.data_mut().chunks_exact_mut(n * n) {
            for i in 0..n {
                for v in &mut m[i * n + i + 1..(i + 1) * n] {
                    *v = MASK_VALUE;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::CausalMask(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        let exact = self.exact_of(x);
        let out = self.push(t, Op::Reshape(x), rg);
        Ok(match exact {
            Some(v) => self.set_exact(out, v),
            None => out,
        })
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [a, b, c, d] = s[..] else {
            return Err(Error::invalid(format!("swap_axes12 expects 4-D, got {s:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        swap12(src, &mut out, a, b, c, d);
        let t = Tensor::new(vec![a, c, b, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SwapAxes12(x), rg))
    }

    /// `[b, kv, s, d] -> [b, kv * n_rep, s, d]`, each kv head repeated
    /// `n_rep` times consecutively.
    pub fn repeat_kv(&mut self, x: Var, n_rep: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || n_rep == 0 {
            return Err(Error::invalid(format!("repeat_kv expects 4-D, got {s:?}")));
        }
        if n_rep == 1 {
            return Ok(x);
        }
        let block = s[2] * s[3];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * n_rep);
        for head in src.chunks_exact(block) {
            for _ in 0..n_rep {
                out.extend_from_slice(head);
            }
        }
        let t = Tensor::new(vec![s[0], s[1] * n_rep, s[2], s[3]], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::RepeatKv { x, n_rep }, rg))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean cross-entropy of `logits: [n, vocab]` against `targets`. Rows
    /// whose target is [`IGNORE_INDEX`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::invalid(format!(
                "cross_entropy: {n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v && t != IGNORE_INDEX) {
            return Err(Error::invalid(format!("target {bad} out of range {v}")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * v];
        let mut row = vec![0.0f64; v];
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for i in 0..n {
            if targets[i] == IGNORE_INDEX {
                continue;
            }
            kernels::log_softmax_row(&z[i * v..(i + 1) * v], &mut row);
            total -= row[targets[i]];
            counted += 1;
            for (p, &lp) in probs[i * v..(i + 1) * v].iter_mut().zip(&row) {
                *p = lp.exp() as f32;
            }
        }
        let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
        if !loss.is_finite() {
            return Err(Error::numeric("cross-entropy is not finite"));
        }
        let rg = self.rg(logits);
        let out = self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                counted,
            },
            rg,
        );
        Ok(self.set_exact(out, loss))
    }

    /// Logit-only forward KL `KL(softmax(t/T) || softmax(s/T))`, averaged
    /// over rows. The teacher side is a plain tensor and never enters the
    /// graph.
    pub fn kl_div(&mut self, teacher_logits: &Tensor, student: Var, temperature: f32) -> Result<Var> {
        let out = loss::kl_rows(teacher_logits, self.value(student), temperature)?;
        let rg = self.rg(student);
        let loss = out.loss;
        let node = self.push(
            Tensor::scalar(out.loss as f32),
            Op::KlDiv {
                student,
                teacher_probs: out.teacher_probs,
                student_probs: out.student_probs,
                temperature,
            },
            rg,
        );
        Ok(self.set_exact(node, loss))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar `loss`. Every leaf that requires a
    /// gradient ends up holding one (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if self.rg(loss) {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.numel]);
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].numel;
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&mut self, v: Var, f: impl Fn(usize) -> f32) {
        if let Some(buf) = self.grad_buf(v) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        // Detach the op so input values can be read while grads are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let buf = self.grad_buf(a).unwrap();
                    if ta {
                        kernels::gemm(tb, true, k, n, m, 1.0, bv.data(), g, 1.0, buf);
                    } else {
                        kernels::gemm(false, !tb, m, n, k, 1.0, g, bv.data(), 1.0, buf);
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let buf = self.grad_buf(b).unwrap();
                    if tb {
                        kernels::gemm(true, ta, n, m, k, 1.0, g, av.data(), 1.0, buf);
                    } else {
                        kernels::gemm(!ta, false, k, m, n, 1.0, av.data(), g, 1.0, buf);
                    }
                    self.nodes[a.0].value = av;
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                groups,
                m,
                k,
                n,
            } => {
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let buf = self.grad_buf(a).unwrap();
                    for q in 0..groups {
                        let (gq, bq) = (&g[q * mn..(q + 1) * mn], &bv.data()[q * kn..(q + 1) * kn]);
                        let out = &mut buf[q * mk..(q + 1) * mk];
                        if ta {
                            kernels::gemm(tb, true, k, n, m, 1.0, bq, gq, 1.0, out);
                        } else {
                            kernels::gemm(false, !tb, m, n, k, 1.0, gq, bq, 1.0, out);
                        }
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let buf = self.grad_buf(b).unwrap();
                    for q in 0..groups {
                        let (gq, aq) = (&g[q * mn..(q + 1) * mn], &av.data()[q * mk..(q + 1) * mk]);
                        let out = &mut buf[q * kn..(q + 1) * kn];
                        if tb {
                            kernels::gemm(true, ta, n, m, k, 1.0, gq, aq, 1.0, out);
                        } else {
                            kernels::gemm(!ta, false, k, m, n, 1.0, aq, gq, 1.0, out);
                        }
                    }
                    self.nodes[a.0].value = av;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |j| g[j]);
                self.accumulate(b, |j| g[j]);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, |j| g[j]);
                self.accumulate(b, |j| -g[j]);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    self.accumulate(a, |j| g[j] * bv.data()[j]);
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    self.accumulate(b, |j| g[j] * av.data()[j]);
                    self.nodes[a.0].value = av;
                }
            }
            &Op::Scale(a, c) => self.accumulate(a, |j| g[j] * c),
            &Op::Silu(a) => {
                let av = std::mem::take(&mut self.nodes[a.0].value);
                self.accumulate(a, |j| {
                    let x = av.data()[j];
                    let s = kernels::sigmoid(x);
                    g[j] * (s + x * s * (1.0 - s))
                });
                self.nodes[a.0].value = av;
            }
            &Op::Log(a) => {
                let av = std::mem::take(&mut self.nodes[a.0].value);
                self.accumulate(a, |j| g[j] / av.data()[j]);
                self.nodes[a.0].value = av;
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let wv = std::mem::take(&mut self.nodes[w.0].value);
                let d = wv.numel();
                if self.rg(w) {
                    let buf = self.grad_buf(w).unwrap();
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let (xr, gr) = (&xv.data()[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        for j in 0..d {
                            buf[j] += gr[j] * xr[j] * ir;
                        }
                    }
                }
                if self.rg(x) {
                    let buf = self.grad_buf(x).unwrap();
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let (xr, gr) = (&xv.data()[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dotp: f32 = (0..d).map(|j| gr[j] * wv.data()[j] * xr[j]).sum();
                        let c = ir * ir * ir * dotp / d as f32;
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += ir * gr[j] * wv.data()[j] - xr[j] * c;
                        }
                    }
                }
                self.nodes[x.0].value = xv;
                self.nodes[w.0].value = wv;
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let dim = self.shape(table)[1];
                if let Some(buf) = self.grad_buf(table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            buf[id * dim + j] += g[r * dim + j];
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = std::mem::take(&mut self.nodes[i].value);
                let d = *y.shape().last().unwrap_or(&1);
                if let Some(buf) = self.grad_buf(x) {
                    for r in 0..y.numel() / d.max(1) {
                        let (yr, gr) = (&y.data()[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let s: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            buf[r * d + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                self.nodes[i].value = y;
            }
            &Op::Sum(x) => self.accumulate(x, |_| g[0]),
            &Op::Mean(x) => {
                let n = self.value(x).numel().max(1) as f32;
                self.accumulate(x, |_| g[0] / n)
            }
            Op::Rope { x, offset, inv_freq } => {
                let x = *x;
                let s = self.shape(x).to_vec();
                let hd = s[3];
                let mut back = g.to_vec();
                for (idx, v) in back.chunks_exact_mut(hd).enumerate() {
                    let pos = (idx / s[2]) % s[1] + offset;
                    kernels::rope_apply(v, pos, inv_freq, -1.0);
                }
                self.accumulate(x, |j| back[j]);
            }
            &Op::CausalMask(x) => {
                let n = self.shape(x)[1];
                self.accumulate(x, |j| {
                    let (r, c) = ((j / n) % n, j % n);
                    if c > r {
                        0.0
                    } else {
                        g[j]
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                counted,
            } => {
                let logits = *logits;
                let v = self.shape(logits)[1];
                let scale = g[0] / (*counted).max(1) as f32;
                self.accumulate(logits, |j| {
                    let t = targets[j / v];
                    if t == IGNORE_INDEX {
                        return 0.0;
                    }
                    let hit = if t == j % v { 1.0 } else { 0.0 };
                    (probs[j] - hit) * scale
                });
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let student = *student;
                let rows = self.value(student).numel() / self.shape(student).last().copied().unwrap_or(1).max(1);
                let scale = g[0] / (temperature * rows.max(1) as f32);
                self.accumulate(student, |j| (student_probs[j] - teacher_probs[j]) * scale);
            }
            &Op::Reshape(x) => self.accumulate(x, |j| g[j]),
            &Op::SwapAxes12(x) => {
                let s = self.shape(x).to_vec();
                // Output was [a, c, b, d]; swapping back lands in x's layout.
                let mut back = vec![0.0; g.len()];
                swap12(g, &mut back, s[0], s[2], s[1], s[3]);
                self.accumulate(x, |j| back[j]);
            }
            &Op::RepeatKv { x, n_rep } => {
                let s = self.shape(x).to_vec();
                let block = s[2] * s[3];
                self.accumulate(x, |j| {
                    let (head, off) = (j / block, j % block);
                    (0..n_rep).map(|r| g[(head * n_rep + r) * block + off]).sum()
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn swap12(src: &[f32], dst: &mut [f32], a: usize, b: usize, c: usize, d: usize) {
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let from = ((ia * b + ib) * c + ic) * d;
                let to = ((ia * c + ic) * b + ib) * d;
                dst[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::zeros(vec![0])
    }
}

#[cfg(test)]
mod tests;
