//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every op pushes a node holding its output value and whatever it saved for
//! backward. Nodes are only ever appended, so node ids are already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Ops check their output for NaN/Inf and fail with [`Error::NonFinite`]
//! instead of letting a bad value propagate.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    /// `x[r] + y[r mod period]`
    AddTiled { x: Var, y: Var, period: usize },
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
        probs: Vec<f64>,
        n_valid: usize,
    },
    MixRows { a: Var, b: Var, take_b: Vec<bool> },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to a leaf.
    ///
    /// `None` for leaves that do not require grad and for leaves the loss
    /// does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn emit(&mut self, name: &'static str, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = tensor::matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.emit("matmul", &[m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("add", &shape, out, Op::Add(a, b), &[a, b])
    }

    /// Adds `y` (`period × d`, or a bare `d` vector) to every block of
    /// `period` rows of `x`. Covers bias addition and positional embeddings.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let xv = self.value(x);
        let yv = self.value(y);
        let (rows, d) = (xv.rows(), xv.cols());
        let mismatch = || Error::Shape {
            op: "add_tiled",
            lhs: xv.shape().to_vec(),
            rhs: yv.shape().to_vec(),
        };
        if yv.cols() != d {
            return Err(mismatch());
        }
        let period = yv.rows();
        if rows % period != 0 {
            return Err(mismatch());
        }
        let yd = yv.data();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_exact_mut(d).enumerate() {
            let src = &yd[(r % period) * d..(r % period + 1) * d];
            row.iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        let shape = xv.shape().to_vec();
        self.emit("add_tiled", &shape, out, Op::AddTiled { x, y, period }, &[x, y])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("mul", &shape, out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.emit("scale", &shape, out, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.emit("sum", &[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| tensor::gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit("gelu", &shape, out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = tensor::softmax_rows(xv.data(), xv.cols());
        let shape = xv.shape().to_vec();
        self.emit("softmax", &shape, out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis, population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = vec![0.0; xv.numel()];
        for ((src, xh), dst) in xv
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(out.chunks_exact_mut(d))
        {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for i in 0..d {
                xh[i] = (src[i] - mean) * r;
                dst[i] = xh[i] * g[i] + b[i];
            }
        }
        let shape = xv.shape().to_vec();
        self.emit(
            "layer_norm",
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(batch·seq) × 3d`, columns laid out as `[q | k | v]`, each
    /// split into `heads` contiguous groups. Attention runs within each block
    /// of `seq` rows. Output is `(batch·seq) × d`.
    pub fn attention(&mut self, qkv: Var, heads: usize, seq: usize) -> Result<Var> {
        let (rows, width) = self.matrix_dims("attention", qkv)?;
        if heads == 0 || seq == 0 || width % (3 * heads) != 0 || rows % seq != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![rows, width],
                rhs: vec![heads, seq],
            });
        }
        let d = width / 3;
        let dh = d / heads;
        let batch = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut q = vec![0.0; seq * dh];
        let mut k = vec![0.0; seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let row = &src[(b * seq + t) * width..(b * seq + t + 1) * width];
                    q[t * dh..(t + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                    k[t * dh..(t + 1) * dh].copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
                }
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    for j in 0..seq {
                        p[i * seq + j] = tensor::dot(&q[i * dh..(i + 1) * dh], &k[j * dh..(j + 1) * dh]) * scale;
                    }
                }
                let sm = tensor::softmax_rows(p, seq);
                p.copy_from_slice(&sm);
                for i in 0..seq {
                    let o = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for j in 0..seq {
                        let w = p[i * seq + j];
                        let v_row = &src[(b * seq + j) * width + 2 * d + h * dh..];
                        for (o_c, &v_c) in o.iter_mut().zip(&v_row[..dh]) {
                            *o_c += w * v_c;
                        }
                    }
                }
            }
        }
        self.emit(
            "attention",
            &[rows, d],
            out,
            Op::Attention {
                qkv,
                heads,
                seq,
                probs,
            },
            &[qkv],
        )
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// `batch × heads × seq × seq`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean of `-log softmax(logits)[target]` over rows with `valid` set.
    ///
    /// Returns exactly 0 with zero gradient when no row is valid.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let (n, c) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n || valid.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![n, c],
                rhs: vec![targets.len(), valid.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: t,
                limit: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let mut n_valid = 0;
        for r in 0..n {
            if !valid[r] {
                continue;
            }
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            n_valid += 1;
        }
        let loss = if n_valid == 0 { 0.0 } else { total / n_valid as f64 };
        self.emit(
            "cross_entropy",
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                probs,
                n_valid,
            },
            &[logits],
        )
    }

    /// Row `r` of the output is `b[r]` where `take_b[r]`, else `a[r]`.
    pub fn mix_rows(&mut self, a: Var, b: Var, take_b: &[bool]) -> Result<Var> {
        self.same_shape("mix_rows", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if take_b.len() != av.rows() {
            return Err(Error::Shape {
                op: "mix_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![take_b.len()],
            });
        }
        let d = av.cols();
        let mut out = av.data().to_vec();
        for (r, &t) in take_b.iter().enumerate() {
            if t {
                out[r * d..(r + 1) * d].copy_from_slice(bv.row(r));
            }
        }
        let shape = av.shape().to_vec();
        self.emit(
            "mix_rows",
            &shape,
            out,
            Op::MixRows {
                a,
                b,
                take_b: take_b.to_vec(),
            },
            &[a, b],
        )
    }

    /// Output row `i` is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        self.emit(
            "gather_rows",
            &[index.len(), d],
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Populates [`Tape::grad`] for every grad-requiring leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        self.grads = leaf_grads;
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_nt_acc(&mut da, g, val(*b), m, n, k);
                    add_into(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_tn_acc(&mut db, val(*a), g, m, k, n);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::AddTiled { x, y, period } => {
                if wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if wants(*y) {
                    let d = self.value(*x).cols();
                    let mut dy = vec![0.0; period * d];
                    for (r, row) in g.chunks_exact(d).enumerate() {
                        let dst = &mut dy[(r % period) * d..(r % period + 1) * d];
                        dst.iter_mut().zip(row).for_each(|(o, s)| *o += s);
                    }
                    add_into(&mut grads[y.0], &dy);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let da: Vec<f64> = g.iter().zip(val(*b)).map(|(g, b)| g * b).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let db: Vec<f64> = g.iter().zip(val(*a)).map(|(g, a)| g * a).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = g.iter().map(|g| g * s).collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                add_into(&mut grads[x.0], &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| g * tensor::gelu_grad_scalar(x))
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let s = tensor::dot(yr, gr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gam = val(*gamma);
                if wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, ((xh, gr), dr)) in xhat
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for i in 0..d {
                            let dxh = gr[i] * gam[i];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[i];
                        }
                        let k = rstd[r] / d as f64;
                        for i in 0..d {
                            let dxh = gr[i] * gam[i];
                            dr[i] = k * (d as f64 * dxh - sum_dxh - xh[i] * sum_dxh_xh);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (xh, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * xh[i];
                        }
                    }
                    add_into(&mut grads[gamma.0], &dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(o, s)| *o += s);
                    }
                    add_into(&mut grads[beta.0], &db);
                }
            }
            Op::Attention {
                qkv,
                heads,
                seq,
                probs,
            } => {
                let (heads, seq) = (*heads, *seq);
                let src = val(*qkv);
                let width = self.value(*qkv).cols();
                let d = width / 3;
                let dh = d / heads;
                let batch = self.value(*qkv).rows() / seq;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; src.len()];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let row_of = |t: usize| (b * seq + t) * width;
                        let q_at = |t: usize| row_of(t) + h * dh;
                        let k_at = |t: usize| row_of(t) + d + h * dh;
                        let v_at = |t: usize| row_of(t) + 2 * d + h * dh;
                        let go_at = |t: usize| (b * seq + t) * d + h * dh;
                        // dP = dO · Vᵀ ; dV = Pᵀ · dO
                        for i in 0..seq {
                            let go = &g[go_at(i)..go_at(i) + dh];
                            for j in 0..seq {
                                dp[i * seq + j] = tensor::dot(go, &src[v_at(j)..v_at(j) + dh]);
                                let w = p[i * seq + j];
                                let dv = &mut dqkv[v_at(j)..v_at(j) + dh];
                                dv.iter_mut().zip(go).for_each(|(o, s)| *o += w * s);
                            }
                        }
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-multiplied by the score scale
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let s = tensor::dot(pr, dr);
                            for j in 0..seq {
                                dr[j] = pr[j] * (dr[j] - s) * scale;
                            }
                        }
                        // dQ = dS · K ; dK = dSᵀ · Q
                        for i in 0..seq {
                            for j in 0..seq {
                                let w = dp[i * seq + j];
                                for c in 0..dh {
                                    dqkv[q_at(i) + c] += w * src[k_at(j) + c];
                                    dqkv[k_at(j) + c] += w * src[q_at(i) + c];
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[qkv.0], &dqkv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                probs,
                n_valid,
            } => {
                let c = self.value(*logits).cols();
                let mut dx = vec![0.0; probs.len()];
                if *n_valid > 0 {
                    let w = g[0] / *n_valid as f64;
                    for (r, &ok) in valid.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        for j in 0..c {
                            dx[r * c + j] = w * probs[r * c + j];
                        }
                        dx[r * c + targets[r]] -= w;
                    }
                }
                add_into(&mut grads[logits.0], &dx);
            }
            Op::MixRows { a, b, take_b } => {
                let d = node.value.cols();
                for (v, pick) in [(a, false), (b, true)] {
                    if !wants(*v) {
                        continue;
                    }
                    let mut dv = vec![0.0; g.len()];
                    for (r, &t) in take_b.iter().enumerate() {
                        if t == pick {
                            dv[r * d..(r + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                        }
                    }
                    add_into(&mut grads[v.0], &dv);
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (i, &src) in index.iter().enumerate() {
                    let dst = &mut dx[src * d..(src + 1) * d];
                    dst.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(o, s)| *o += s);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(sel, m).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_slice_and_zero_gamma() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, ones, zeros, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 3.5, -1.0]));
        let beta = tape.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.layer_norm(x, zeros, beta, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn gelu_zero_and_asymptote() {
        assert_eq!(tensor::gelu_scalar(0.0), 0.0);
        for x in [6.0, 7.5, 10.0, 40.0] {
            assert!((tensor::gelu_scalar(x) - x).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[5, 4]));
        let l = tape.cross_entropy(uniform, &[0, 1, 2, 3, 0], &[true; 5]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let mut peaked = Tensor::zeros(&[2, 4]);
        peaked.data_mut()[2] = 20.0;
        peaked.data_mut()[4 + 1] = 20.0;
        let peaked = tape.constant(peaked);
        let l = tape.cross_entropy(peaked, &[2, 1], &[true, true]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-8);
    }

    #[test]
    fn cross_entropy_empty_gate_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.1]));
        let l = tape.cross_entropy(x, &[0, 2], &[false, false]).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.cross_entropy(x, &[0, 3], &[true, true]),
            Err(Error::Index { index: 3, limit: 3, .. })
        ));
    }

    #[test]
    fn backward_of_sum_and_dot() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite { op: "scale" })));
    }
}
