//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable op appends one node holding its output value plus
//! whatever it needs for the backward pass. `backward` walks the nodes in
//! reverse insertion order, so each node is visited exactly once and
//! gradients for values used more than once are summed.

use super::tensor::{gemm, Element, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `y` matches the trailing dims of `x` and is repeated over the rest.
    AddBroadcast {
        x: Var,
        y: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Gelu {
        x: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    KlTopK {
        logits: Var,
        k: usize,
        indices: Vec<usize>,
        teacher: Vec<T>,
        student: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `var`, or `None` when `var`
    /// does not require gradients (or the loss does not depend on it).
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Single-threaded computation tape.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Registers a leaf; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// `[.., m, k] · [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let value = self.value(a).add(self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("add", value, Op::Add { a, b }, rg)
    }

    /// Adds `y` to every trailing block of `x` whose shape equals `y`'s.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ys = self.value(y).shape();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(self.shape_err("add_broadcast", x, y));
        }
        let block = self.value(y).numel();
        let yd = self.value(y).data();
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        if block > 0 {
            for chunk in out.data_mut().chunks_mut(block) {
                for (o, &v) in chunk.iter_mut().zip(yd) {
                    *o += v;
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(y);
        self.push_checked("add_broadcast", out, Op::AddBroadcast { x, y }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("mul", value, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).scale(s);
        let rg = self.requires_grad(x);
        self.push_checked("scale", value, Op::Scale { x, s }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        let rg = self.requires_grad(x);
        self.push_checked("gelu", value, Op::Gelu { x }, rg)
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gain).shape() != [c] {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let rows = xv.leading();
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        let eps = T::of(eps);
        let cf = T::of(c as f64);
        for (xr, or) in xv.data().chunks(c).zip(out.chunks_mut(c)).take(rows) {
            let ms = xr.iter().map(|&v| v * v).sum::<T>() / cf;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gk) in or.iter_mut().zip(xr).zip(g) {
                *o = v * inv * gk;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gain);
        self.push_checked("rms_norm", value, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// Gathers rows of `table` (`[V, C]`); output has shape `shape ++ [C]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::contract("embedding table must be a matrix"));
        }
        let (v, c) = (t.shape()[0], t.shape()[1]);
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::input(format!(
                    "token id {id} out of range for vocabulary of {v}"
                )));
            }
            out.extend_from_slice(&t.data()[id * c..(id + 1) * c]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(c);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(table);
        self.push_checked(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[B, L, 3C]` with queries, keys and values concatenated along
    /// the last axis; head `h` owns columns `h*C/H..(h+1)*C/H` of each part.
    /// Returns the concatenated head outputs, `[B, L, C]`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let s = qv.shape();
        if s.len() != 3 || s[2] % 3 != 0 || heads == 0 || (s[2] / 3) % heads != 0 {
            return Err(Error::contract(format!(
                "causal_attention: bad qkv shape {s:?} for {heads} heads"
            )));
        }
        let (b, l, c3) = (s[0], s[1], s[2]);
        let c = c3 / 3;
        let dh = c / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let data = qv.data();
        let mut out = vec![T::zero(); b * l * c];
        let mut probs = vec![T::zero(); b * heads * l * l];
        for bi in 0..b {
            let base = bi * l * c3;
            for h in 0..heads {
                let q = MatRef::strided(&data[base + h * dh..], l, dh, c3);
                let k = MatRef::strided(&data[base + c + h * dh..], l, dh, c3);
                let v = MatRef::strided(&data[base + 2 * c + h * dh..], l, dh, c3);
                let p = &mut probs[(bi * heads + h) * l * l..(bi * heads + h + 1) * l * l];
                gemm(scale, q, k.t(), T::zero(), p, l);
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for e in &mut row[..=i] {
                        *e = (*e - max).exp();
                        total += *e;
                    }
                    for e in &mut row[..=i] {
                        *e /= total;
                    }
                    for e in &mut row[i + 1..] {
                        *e = T::zero();
                    }
                }
                let pm = MatRef::new(&*p, l, l);
                gemm(
                    T::one(),
                    pm,
                    v,
                    T::zero(),
                    &mut out[bi * l * c + h * dh..],
                    c,
                );
            }
        }
        let value = Tensor::new([b, l, c], out)?;
        let rg = self.requires_grad(qkv);
        self.push_checked(
            "causal_attention",
            value,
            Op::Attention {
                qkv,
                batch: b,
                seq: l,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.softmax(xv.rank().saturating_sub(1))?;
        let rg = self.requires_grad(x);
        self.push_checked("softmax", value, Op::Softmax { x }, rg)
    }

    /// Mean next-token cross-entropy; `logits` is `[.., V]`, one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.leading();
        if rows != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if rows == 0 {
            return Err(Error::input("cross_entropy over zero rows"));
        }
        let probs_t = lv.softmax(lv.rank() - 1)?;
        let probs = probs_t.into_data();
        let mut nll = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::input(format!("target {t} out of range for {v} classes")));
            }
            // log-softmax recomputed in f64 so tiny probabilities do not underflow
            let row = &lv.data()[r * v..(r + 1) * v];
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[t].as_f64();
        }
        let value = Tensor::scalar(T::of(nll / rows as f64));
        let rg = self.requires_grad(logits);
        self.push_checked(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of KL(teacher || student) restricted to `k` gathered
    /// vocabulary entries per row.
    ///
    /// `indices` and `teacher` are row-major `[rows, k]`. The teacher slice is
    /// renormalized to sum to one; the student distribution is the softmax of
    /// its logits gathered at the same indices.
    pub fn kl_topk(
        &mut self,
        logits: Var,
        indices: &[usize],
        teacher: &[T],
        k: usize,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.leading();
        if k == 0 || indices.len() != rows * k || teacher.len() != rows * k {
            return Err(Error::Shape {
                op: "kl_topk",
                lhs: lv.shape().to_vec(),
                rhs: vec![indices.len(), teacher.len(), k],
            });
        }
        if rows == 0 {
            return Err(Error::input("kl_topk over zero rows"));
        }
        let mut t_norm = Vec::with_capacity(rows * k);
        let mut student = Vec::with_capacity(rows * k);
        let mut total = 0.0f64;
        for r in 0..rows {
            let idx = &indices[r * k..(r + 1) * k];
            let tp = &teacher[r * k..(r + 1) * k];
            let mass: f64 = tp.iter().map(|p| p.as_f64()).sum();
            if !(mass > 0.0) || !mass.is_finite() {
                return Err(Error::contract(format!(
                    "teacher slice for row {r} has non-positive mass"
                )));
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let mut z = Vec::with_capacity(k);
            for &i in idx {
                if i >= v {
                    return Err(Error::input(format!(
                        "cached index {i} out of range for student vocabulary {v}"
                    )));
                }
                z.push(row[i].as_f64());
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for (j, &p) in tp.iter().enumerate() {
                let p = p.as_f64() / mass;
                let log_q = z[j] - lse;
                if p > 0.0 {
                    total += p * (p.ln() - log_q);
                }
                t_norm.push(T::of(p));
                student.push(T::of(log_q.exp()));
            }
        }
        let value = Tensor::scalar(T::of(total / rows as f64));
        let rg = self.requires_grad(logits);
        self.push_checked(
            "kl_topk",
            value,
            Op::KlTopK {
                logits,
                k,
                indices: indices.to_vec(),
                teacher: t_norm,
                student,
            },
            rg,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mse", a, b));
        }
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::input("mse over empty tensors"));
        }
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::of(total / n as f64));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("mse", value, Op::Mse { a, b }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push_checked("sum", value, Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.last_dim();
                let n = bv.shape()[1];
                let rows = av.leading();
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); rows * k];
                    gemm(
                        T::one(),
                        MatRef::new(gd, rows, n),
                        MatRef::new(bv.data(), k, n).t(),
                        T::zero(),
                        &mut da,
                        k,
                    );
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        MatRef::new(av.data(), rows, k).t(),
                        MatRef::new(gd, rows, n),
                        T::zero(),
                        &mut db,
                        n,
                    );
                    self.accumulate(grads, *b, Tensor::new([k, n], db)?);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast { x, y } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*y) {
                    let ys = self.value(*y).shape().to_vec();
                    let block = self.value(*y).numel();
                    let mut dy = vec![T::zero(); block];
                    if block > 0 {
                        for chunk in gd.chunks(block) {
                            for (d, &v) in dy.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(grads, *y, Tensor::new(ys, dy)?);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.scale(*s));
            }
            Op::Gelu { x } => {
                let dx = self
                    .value(*x)
                    .zip_with(g, "gelu_backward", |xv, gv| gv * gelu_grad(xv))?;
                self.accumulate(grads, *x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gain_v = self.value(*gain).data();
                let c = xv.last_dim();
                let cf = T::of(c as f64);
                let want_x = self.requires_grad(*x);
                let mut dx = if want_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
                let mut dg = vec![T::zero(); c];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xv.data()[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let mut dot = T::zero();
                    for j in 0..c {
                        let xhat = xr[j] * inv;
                        dg[j] += gr[j] * xhat;
                        dot += gr[j] * gain_v[j] * xhat;
                    }
                    if want_x {
                        let mean = dot / cf;
                        let dr = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let xhat = xr[j] * inv;
                            dr[j] = inv * (gr[j] * gain_v[j] - xhat * mean);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gain, Tensor::new([c], dg)?);
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let tv = self.value(*table);
                    let c = tv.shape()[1];
                    let mut dt = vec![T::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &v) in dt[id * c..(id + 1) * c].iter_mut().zip(&gd[r * c..]) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (b, l, heads) = (*batch, *seq, *heads);
                let qv = self.value(*qkv);
                let c3 = qv.last_dim();
                let c = c3 / 3;
                let dh = c / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let data = qv.data();
                let mut dqkv = vec![T::zero(); qv.numel()];
                let mut dp = vec![T::zero(); l * l];
                for bi in 0..b {
                    let base = bi * l * c3;
                    for h in 0..heads {
                        let p = &probs[(bi * heads + h) * l * l..(bi * heads + h + 1) * l * l];
                        let q = MatRef::strided(&data[base + h * dh..], l, dh, c3);
                        let k = MatRef::strided(&data[base + c + h * dh..], l, dh, c3);
                        let v = MatRef::strided(&data[base + 2 * c + h * dh..], l, dh, c3);
                        let d_out = MatRef::strided(&gd[bi * l * c + h * dh..], l, dh, c);
                        // dV = Pᵀ dO
                        gemm(
                            T::one(),
                            MatRef::new(p, l, l).t(),
                            d_out,
                            T::zero(),
                            &mut dqkv[base + 2 * c + h * dh..],
                            c3,
                        );
                        // dP = dO Vᵀ, then through the row softmax
                        gemm(T::one(), d_out, v.t(), T::zero(), &mut dp, l);
                        for i in 0..l {
                            let pr = &p[i * l..(i + 1) * l];
                            let dr = &mut dp[i * l..(i + 1) * l];
                            let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                            for e in &mut dr[i + 1..] {
                                *e = T::zero();
                            }
                        }
                        let ds = MatRef::new(&dp, l, l);
                        gemm(
                            T::one(),
                            ds,
                            k,
                            T::zero(),
                            &mut dqkv[base + h * dh..],
                            c3,
                        );
                        gemm(
                            T::one(),
                            ds.t(),
                            q,
                            T::zero(),
                            &mut dqkv[base + c + h * dh..],
                            c3,
                        );
                    }
                }
                self.accumulate(grads, *qkv, Tensor::new(qv.shape().to_vec(), dqkv)?);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = y.last_dim();
                let mut dx = vec![T::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * v + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
            Op::KlTopK {
                logits,
                k,
                indices,
                teacher,
                student,
            } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let rows = lv.leading();
                let scale = gd[0] / T::of(rows as f64);
                let mut dl = vec![T::zero(); lv.numel()];
                for r in 0..rows {
                    for j in 0..*k {
                        let e = r * k + j;
                        dl[r * v + indices[e]] += (student[e] - teacher[e]) * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let scale = gd[0] * T::of(2.0 / av.numel() as f64);
                let diff = av.sub(bv)?.scale(scale);
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, diff.scale(-T::one()));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), gd[0]));
            }
        }
        Ok(())
    }
}
