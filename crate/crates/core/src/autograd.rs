//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a `requires_grad` leaf. A graph can
//! be differentiated once; build a new one for the next forward pass.

use crate::error::{shape_mismatch, Error, Result};
use crate::spectral;
use crate::tensor::{numel, permute_raw, strides, IdTensor, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SliceRows { input: Var, start: usize },
    Softmax { input: Var, axis: usize },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Square(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Rdft { input: Var, axis: usize, imag: bool },
    Irdft { real: Var, imag: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, or zeros of the right shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// source with shape `in_shape`.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    let pad = r - in_shape.len();
    let in_str = strides(in_shape);
    let src_str: Vec<usize> = (0..r)
        .map(|i| {
            if i < pad || in_shape[i - pad] == 1 {
                0
            } else {
                in_str[i - pad]
            }
        })
        .collect();
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += src_str[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_str[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(in_shape: &[usize], out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    if in_shape == out_shape {
        return g.to_vec();
    }
    let map = broadcast_map(in_shape, out_shape);
    let mut acc = vec![0.0; numel(in_shape)];
    for (o, &i) in map.iter().enumerate() {
        acc[i] += g[o];
    }
    acc
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        None => *slot = Some(g),
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU `x Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_lead: Vec<usize>,
    b_lead: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_mismatch("matmul (rank < 2)", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_mismatch("matmul", a, b));
    }
    let la = &a[..a.len() - 2];
    let lb = &b[..b.len() - 2];
    let lead = broadcast_shape(la, lb).ok_or_else(|| shape_mismatch("matmul", a, b))?;
    let a_lead = broadcast_map(la, &lead);
    let b_lead = broadcast_map(lb, &lead);
    let mut out_shape = lead;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        m,
        k,
        n,
        out_shape,
        a_lead,
        b_lead,
    })
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of `v` with its gradient slot filled from `grads`.
    pub fn leaf_with_grad(&self, v: Var, grads: &Gradients) -> Tensor {
        let mut t = self.value(v).clone();
        t.requires_grad = self.nodes[v.0].requires_grad;
        t.grad = grads.grads[v.0].clone();
        t
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| shape_mismatch(name, sa, sb))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(sa, &out);
            let mb = broadcast_map(sb, &out);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok(Tensor::from_parts(out, data))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).scale(k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    /// Elementwise product with a fixed (non-differentiable) tensor of the
    /// same shape.
    pub fn mul_const(&mut self, a: Var, factor: &Tensor) -> Result<Var> {
        let t = self.value(a).zip_with(factor, |x, y| x * y)?;
        Ok(self.push(t, Op::MulConst(a, factor.data().to_vec()), &[a]))
    }

    /// Batched matrix product over the trailing two axes with broadcasting
    /// leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = plan_matmul(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&plan.out_shape)];
        for (l, (&ia, &ib)) in plan.a_lead.iter().zip(&plan.b_lead).enumerate() {
            let a_blk = &da[ia * m * k..(ia + 1) * m * k];
            let b_blk = &db[ib * k * n..(ib + 1) * k * n];
            let o_blk = &mut out[l * m * n..(l + 1) * m * n];
            for i in 0..m {
                let row = &mut o_blk[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a_blk[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b_blk[p * n..(p + 1) * n];
                    for (r, &bv) in row.iter_mut().zip(brow) {
                        *r += av * bv;
                    }
                }
            }
        }
        let t = Tensor::from_parts(plan.out_shape, out);
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(perm)?;
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Dimension(format!("transpose of rank-{r} tensor")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a);
        if start >= end || end > shape[0] {
            return Err(Error::Index(format!(
                "row range {start}..{end} invalid for shape {shape:?}"
            )));
        }
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = end - start;
        let data = self.value(a).data()[start * row..end * row].to_vec();
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::SliceRows { input: a, start }, &[a]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = spectral::split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let t = Tensor::from_parts(shape, y);
        Ok(self.push(t, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_mismatch("layer_norm", &shape, self.shape(gain)));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let mut normalized = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                normalized[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    /// Gathers rows of a `V × D` table; output shape is `ids.shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &IdTensor) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be rank 2, got {ts:?}")));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some((pos, &bad)) = ids.data().iter().enumerate().find(|(_, &i)| i >= v) {
            return Err(Error::Index(format!(
                "id {bad} at flat position {pos} outside table of {v} rows"
            )));
        }
        let tab = self.value(table).data();
        let mut data = Vec::with_capacity(ids.data().len() * d);
        for &i in ids.data() {
            data.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let mut shape = ids.shape().to_vec();
        shape.push(d);
        let t = Tensor::from_parts(shape, data);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.data().to_vec(),
            },
            &[table],
        ))
    }

    /// Half-spectrum of `x` along `axis` as a `(real, imag)` pair of nodes.
    pub fn rdft(&mut self, x: Var, axis: usize) -> Result<(Var, Var)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("rdft axis {axis} for shape {shape:?}")));
        }
        let (re, im) = spectral::rdft_kernel(&shape, self.value(x).data(), axis);
        let s_shape = spectral::spectrum_shape(&shape, axis);
        let r = self.push(
            Tensor::from_parts(s_shape.clone(), re),
            Op::Rdft { input: x, axis, imag: false },
            &[x],
        );
        let i = self.push(
            Tensor::from_parts(s_shape, im),
            Op::Rdft { input: x, axis, imag: true },
            &[x],
        );
        Ok((r, i))
    }

    /// Inverse half-spectrum transform back to a real signal of length `len`
    /// along `axis`. Imaginary parts at self-conjugate bins are ignored.
    pub fn irdft(&mut self, real: Var, imag: Var, axis: usize, len: usize) -> Result<Var> {
        let shape = self.shape(real).to_vec();
        if shape != self.shape(imag) {
            return Err(shape_mismatch("irdft", &shape, self.shape(imag)));
        }
        if axis >= shape.len() || shape[axis] != spectral::coefficient_count(len) {
            return Err(Error::Dimension(format!(
                "irdft: {shape:?} along axis {axis} cannot produce length {len}"
            )));
        }
        let x = spectral::irdft_kernel(
            &shape,
            self.value(real).data(),
            self.value(imag).data(),
            axis,
            len,
        );
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::from_parts(out_shape, x);
        Ok(self.push(t, Op::Irdft { real, imag, axis }, &[real, imag]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// Mean over masked-in positions of `-log softmax(logits)[target]`, with
    /// the class axis last.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().expect("non-empty shape");
        let rows = numel(&shape) / classes;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {rows} logit rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy over zero valid positions".into()));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            if mask[r] {
                let t = targets[r];
                if t >= classes {
                    return Err(Error::Index(format!(
                        "target {t} at row {r} outside {classes} classes"
                    )));
                }
                total += z.ln() + max - row[t];
            }
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage(
                "graph already differentiated; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce_to(self.shape(*a), out_shape, g));
                send(*b, reduce_to(self.shape(*b), out_shape, g));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(self.shape(*a), out_shape, g));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, reduce_to(self.shape(*b), out_shape, &neg));
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let ma = broadcast_map(sa, out_shape);
                let mb = broadcast_map(sb, out_shape);
                if self.nodes[a.0].requires_grad {
                    let mut acc = vec![0.0; da.len()];
                    for o in 0..g.len() {
                        acc[ma[o]] += g[o] * db[mb[o]];
                    }
                    send(*a, acc);
                }
                if self.nodes[b.0].requires_grad {
                    let mut acc = vec![0.0; db.len()];
                    for o in 0..g.len() {
                        acc[mb[o]] += g[o] * da[ma[o]];
                    }
                    send(*b, acc);
                }
            }
            Op::Scale(a, k) => send(*a, g.iter().map(|v| v * k).collect()),
            Op::MulConst(a, f) => send(*a, g.iter().zip(f).map(|(v, m)| v * m).collect()),
            Op::MatMul(a, b) => {
                let plan = plan_matmul(self.shape(*a), self.shape(*b)).expect("recorded shapes");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let want_a = self.nodes[a.0].requires_grad;
                let want_b = self.nodes[b.0].requires_grad;
                let mut ga = vec![0.0; if want_a { da.len() } else { 0 }];
                let mut gb = vec![0.0; if want_b { db.len() } else { 0 }];
                for (l, (&ia, &ib)) in plan.a_lead.iter().zip(&plan.b_lead).enumerate() {
                    let g_blk = &g[l * m * n..(l + 1) * m * n];
                    if want_a {
                        // dA = G Bᵀ
                        let b_blk = &db[ib * k * n..(ib + 1) * k * n];
                        let ga_blk = &mut ga[ia * m * k..(ia + 1) * m * k];
                        for i in 0..m {
                            let grow = &g_blk[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &b_blk[p * n..(p + 1) * n];
                                ga_blk[i * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if want_b {
                        // dB = Aᵀ G
                        let a_blk = &da[ia * m * k..(ia + 1) * m * k];
                        let gb_blk = &mut gb[ib * k * n..(ib + 1) * k * n];
                        for i in 0..m {
                            let grow = &g_blk[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = a_blk[i * k + p];
                                for (t, &gv) in gb_blk[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *t += av * gv;
                                }
                            }
                        }
                    }
                }
                if want_a {
                    send(*a, ga);
                }
                if want_b {
                    send(*b, gb);
                }
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                send(*a, permute_raw(out_shape, g, &inverse).into_data());
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::SliceRows { input, start } => {
                let in_shape = self.shape(*input);
                let row: usize = in_shape[1..].iter().product();
                let mut acc = vec![0.0; numel(in_shape)];
                acc[start * row..start * row + g.len()].copy_from_slice(g);
                send(*input, acc);
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = spectral::split_axis(out_shape, *axis);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*input, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = *out_shape.last().expect("non-empty");
                let gv = self.value(*gain).data();
                let rows = g.len() / d;
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &normalized[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                send(*input, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv)))
                        .collect(),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv >= 0.0 { *gv } else { gv * slope })
                        .collect(),
                );
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| {
                            if xv > 0.0 {
                                *gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                send(*a, g.iter().zip(x).map(|(gv, &xv)| 2.0 * gv * xv).collect());
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut acc = vec![0.0; ts[0] * d];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        acc[id * d + j] += g[pos * d + j];
                    }
                }
                send(*table, acc);
            }
            Op::Rdft { input, axis, imag } => {
                let zeros = vec![0.0; g.len()];
                let (gr, gi) = if *imag { (&zeros[..], g) } else { (g, &zeros[..]) };
                let len = self.shape(*input)[*axis];
                send(*input, spectral::rdft_adjoint(out_shape, gr, gi, *axis, len));
            }
            Op::Irdft { real, imag, axis } => {
                let (gr, gi) = spectral::irdft_adjoint(out_shape, g, *axis);
                send(*real, gr);
                send(*imag, gi);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let classes = *self.shape(*logits).last().expect("non-empty");
                let scale = g[0] / *count as f64;
                let mut dx = vec![0.0; probs.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for c in 0..classes {
                        dx[r * classes + c] = scale * probs[r * classes + c];
                    }
                    dx[r * classes + t] -= scale;
                }
                send(*logits, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(t(&[2], &[1000.0, 1000.0]));
        let s = g.softmax(b, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_degenerate_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[5.0; 4]));
        let one = g.constant(Tensor::ones(&[4]));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let x = g.constant(t(&[4], &[1.0, -3.0, 2.0, 7.0]));
        let bias = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(x, zero, bias, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_rows_and_bounds() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let ids = IdTensor::new(vec![1, 1], vec![2]).unwrap();
        let e = g.embedding(table, &ids).unwrap();
        assert_eq!(g.value(e).data(), &[4.0, 5.0]);
        let bad = IdTensor::new(vec![1, 2], vec![0, 3]).unwrap();
        let err = g.embedding(table, &bad).unwrap_err();
        assert!(matches!(err, Error::Index(ref m) if m.contains("position 1")), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2, 7]));
        let ce = g.cross_entropy(logits, &[3, 0], &[true, true]).unwrap();
        assert!((g.value(ce).item() - 7f64.ln()).abs() < 1e-14);
        assert!(matches!(
            g.cross_entropy(logits, &[3, 0], &[false, false]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 3]));
        let b = g.param(Tensor::ones(&[3]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
