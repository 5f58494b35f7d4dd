//! Reverse-mode automatic differentiation over an explicit node list.
//!
//! Every operation appends a node holding its output value; `backward` walks
//! the list in reverse. Nodes only ever reference earlier nodes, so the list
//! is always in topological order.

use std::collections::HashMap;

use crate::kernels::{self, AttnDims};
use crate::tensor::{check_shape, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + y` where `y` broadcasts against `x` (numpy rules, `y` rank <= `x` rank).
    AddBroadcast(Var, Var),
    /// `x[.., n] * g[n]`
    MulRow(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Pool(Var, [usize; 3]),
    Upsample(Var, [usize; 3]),
    Concat(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    StraightThrough(Var),
    Unfold(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    no_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for a leaf that requires grad; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    /// All registered parameter gradients, keyed by name.
    pub fn params(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, &v)| (n.clone(), self.wrt(v)))
            .collect()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which no leaf requires gradients; for inference.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<f32>, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, rg)
    }

    /// Leaf that tracks gradients according to the tensor's own flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad() && !self.no_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Registers a named trainable leaf; a second call with the same name returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let rg = !self.no_grad;
        let v = self.push(t.clone().with_requires_grad(rg), Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, data, Op::Mul(a, b), &[a, b]))
    }

    /// `x + y` with `y` broadcast over `x` (trailing-aligned; each `y` dim is 1 or equal).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        let map = BroadcastMap::new(&xs, &ys).ok_or_else(|| shape_err("add_broadcast", &xs, &ys))?;
        let xv = self.value(x).data();
        let yv = self.value(y).data();
        let mut data = xv.to_vec();
        map.for_each(|xi, yi| data[xi] += yv[yi]);
        Ok(self.push_op(&xs, data, Op::AddBroadcast(x, y), &[x, y]))
    }

    /// `x[.., n] * g[n]`
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g).to_vec();
        let n = *xs.last().unwrap();
        if gs != [n] {
            return Err(shape_err("mul_row", &xs, &gs));
        }
        let gv = self.value(g).data();
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(gv).map(|(a, b)| a * b))
            .collect();
        Ok(self.push_op(&xs, data, Op::MulRow(x, g), &[x, g]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(&shape, data, Op::Scale(x, c), &[x]))
    }

    /// `a[.., k] x b[k, n] -> [.., n]`; leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push_op(&shape, data, Op::MatMul(a, b), &[a, b]))
    }

    /// Multi-head scaled dot-product attention over `[batch, seq, dim]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(shape_err("attention", &sq, &sk));
        }
        if heads == 0 || !sq[2].is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "{heads} heads do not divide model dimension {}",
                sq[2]
            )));
        }
        if causal && sq[1] != sk[1] {
            return Err(shape_err("causal attention", &sq, &sk));
        }
        let dims = AttnDims {
            batch: sq[0],
            q_len: sq[1],
            kv_len: sk[1],
            dim: sq[2],
            heads,
            causal,
        };
        let data = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
        );
        Ok(self.push_op(&sq, data, Op::Attention { q, k, v, dims }, &[q, k, v]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let xv = self.value(x).data();
        let rows = xv.len() / n;
        let mut out = vec![0.0f32; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * rs) as f32;
            }
            rstd.push(rs as f32);
        }
        Ok(self.push_op(&shape, out, Op::LayerNorm { x, rstd }, &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(&shape, data, Op::Gelu(x), &[x]))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push_op(&shape, data, Op::Softmax(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push_op(shape, data, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &shape, axes));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        Ok(self.push_op(&out_shape, data, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Mean-pools a `[B, T, H, W, D]` tensor by `factors = [ft, fh, fw]`.
    pub fn avg_pool(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || (0..3).any(|i| factors[i] == 0 || !s[i + 1].is_multiple_of(factors[i])) {
            return Err(shape_err("avg_pool", &s, &factors));
        }
        let out_shape = [s[0], s[1] / factors[0], s[2] / factors[1], s[3] / factors[2], s[4]];
        let mut out = vec![0.0f32; out_shape.iter().product()];
        let inv = 1.0 / (factors.iter().product::<usize>() as f32);
        let xv = self.value(x).data();
        for_pool_pairs(&s, factors, |xi, oi, d| {
            for c in 0..d {
                out[oi + c] += xv[xi + c] * inv;
            }
        });
        Ok(self.push_op(&out_shape, out, Op::Pool(x, factors), &[x]))
    }

    /// Nearest-neighbour repeat of a `[B, T, H, W, D]` tensor by `factors`.
    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || factors.contains(&0) {
            return Err(shape_err("upsample", &s, &factors));
        }
        let big = [s[0], s[1] * factors[0], s[2] * factors[1], s[3] * factors[2], s[4]];
        let mut out = vec![0.0f32; big.iter().product()];
        let xv = self.value(x).data();
        for_pool_pairs(&big, factors, |bi, si, d| {
            out[bi..bi + d].copy_from_slice(&xv[si..si + d]);
        });
        Ok(self.push_op(&big, out, Op::Upsample(x, factors), &[x]))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push_op(&shape, out, Op::Concat(xs.to_vec()), xs))
    }

    /// Gathers rows of `table[V, D]`; output shape is `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &ts, lead));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Contract(format!("embedding id {bad} >= table size {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        Ok(self.push_op(&shape, out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        Ok(self.push_op(&[1], vec![s], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        Ok(self.push_op(&[1], vec![s as f32], Op::Mean(x), &[x]))
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / av.len() as f64;
        Ok(self.push_op(&[1], vec![s as f32], Op::Mse(a, b), &[a, b]))
    }

    /// Mean next-token cross entropy over rows of `logits[.., V]` where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().unwrap();
        let rows = self.value(logits).numel() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err("cross_entropy", &s, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= v) {
            return Err(TensorError::Contract(format!("target {bad} >= vocabulary {v}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Contract("cross entropy over zero positions".into()));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[targets[r]] as f64;
        }
        let loss = (total / count as f64) as f32;
        Ok(self.push_op(
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        ))
    }

    /// Forward value is `replacement`; the backward pass treats the op as identity on `z`.
    pub fn straight_through(&mut self, z: Var, replacement: &Tensor) -> Result<Var> {
        if self.shape(z) != replacement.shape() {
            return Err(shape_err("straight_through", self.shape(z), replacement.shape()));
        }
        let shape = replacement.shape().to_vec();
        Ok(self.push_op(&shape, replacement.data().to_vec(), Op::StraightThrough(z), &[z]))
    }

    /// Zero-padded `k x k` spatial neighbourhood unfold: `[N, H, W, C] -> [N, H, W, k*k*C]`.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k.is_multiple_of(2) {
            return Err(shape_err("unfold", &s, &[k]));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let kc = k * k * c;
        let mut out = vec![0.0f32; n * h * w * kc];
        let xv = self.value(x).data();
        for_unfold(n, h, w, c, k, |src, dst| out[dst..dst + c].copy_from_slice(&xv[src..src + c]));
        Ok(self.push_op(&[n, h, w, kc], out, Op::Unfold(x, k), &[x]))
    }

    /// Populates gradients for every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = grads[i].take().filter(|_| matches!(n.op, Op::Leaf) || i == loss.0);
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, d: Vec<f32>| accumulate(grads, v, d);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.to_vec());
                }
                if self.rg(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.to_vec());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, zip_slices(g, self.value(*b).data(), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, zip_slices(g, self.value(*a).data(), |x, y| x * y));
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.rg(*x) {
                    acc(*x, g.to_vec());
                }
                if self.rg(*y) {
                    let map = BroadcastMap::new(self.shape(*x), self.shape(*y)).unwrap();
                    let mut dy = vec![0.0f32; self.value(*y).numel()];
                    map.for_each(|xi, yi| dy[yi] += g[xi]);
                    acc(*y, dy);
                }
            }
            Op::MulRow(x, gain) => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                if self.rg(*x) {
                    let dx = g
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(gv).map(|(a, b)| a * b))
                        .collect();
                    acc(*x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0f32; n];
                    for (grow, xrow) in g.chunks(n).zip(self.value(*x).data().chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    acc(*gain, dg);
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    acc(*x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k;
                if self.rg(*a) {
                    acc(*a, kernels::matmul_bt(g, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, kernels::matmul_at(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::Attention { q, k, v, dims } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g,
                    *dims,
                );
                if self.rg(*q) {
                    acc(*q, dq);
                }
                if self.rg(*k) {
                    acc(*k, dk);
                }
                if self.rg(*v) {
                    acc(*v, dv);
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut dx = vec![0.0f32; y.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mg = gr.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| (a * b) as f64).sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            dx[r * n + j] =
                                (rs as f64 * (gr[j] as f64 - mg - yr[j] as f64 * mgy)) as f32;
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    acc(*x, zip_slices(g, self.value(*x).data(), |gv, xv| gv * gelu_grad(xv)));
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut dx = vec![0.0f32; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let inner: f64 = yr.iter().zip(gr).map(|(&a, &b)| (a * b) as f64).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - inner as f32);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    acc(*x, g.to_vec());
                }
            }
            Op::Permute(x, axes) => {
                if self.rg(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let (_, dx) = permute_data(g, node.value.shape(), &inv);
                    acc(*x, dx);
                }
            }
            Op::Pool(x, factors) => {
                if self.rg(*x) {
                    let s = self.shape(*x).to_vec();
                    let inv = 1.0 / (factors.iter().product::<usize>() as f32);
                    let mut dx = vec![0.0f32; self.value(*x).numel()];
                    for_pool_pairs(&s, *factors, |xi, oi, d| {
                        for c in 0..d {
                            dx[xi + c] = g[oi + c] * inv;
                        }
                    });
                    acc(*x, dx);
                }
            }
            Op::Upsample(x, factors) => {
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; self.value(*x).numel()];
                    for_pool_pairs(node.value.shape(), *factors, |bi, si, d| {
                        for c in 0..d {
                            dx[si + c] += g[bi + c];
                        }
                    });
                    acc(*x, dx);
                }
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&x| *self.shape(x).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        acc(x, dx);
                    }
                    off += w;
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0f32; self.value(*table).numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                    acc(*table, dt);
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    acc(*x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).numel();
                    acc(*x, vec![g[0] / n as f32; n]);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g[0] / av.len() as f32;
                let d: Vec<f32> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                if self.rg(*b) {
                    acc(*b, d.iter().map(|v| -v).collect());
                }
                if self.rg(*a) {
                    acc(*a, d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                if self.rg(*logits) {
                    let lv = self.value(*logits).data();
                    let v = *self.shape(*logits).last().unwrap();
                    let count = mask.iter().filter(|&&m| m).count() as f32;
                    let scale = g[0] / count;
                    let mut dl = vec![0.0f32; lv.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut dl[r * v..(r + 1) * v];
                        row.copy_from_slice(&lv[r * v..(r + 1) * v]);
                        softmax_in_place(row);
                        row[t] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= scale;
                        }
                    }
                    acc(*logits, dl);
                }
            }
            Op::StraightThrough(z) => {
                if self.rg(*z) {
                    acc(*z, g.to_vec());
                }
            }
            Op::Unfold(x, k) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![0.0f32; self.value(*x).numel()];
                    for_unfold(n, h, w, c, *k, |src, dst| {
                        for j in 0..c {
                            dx[src + j] += g[dst + j];
                        }
                    });
                    acc(*x, dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    zip_slices(a.data(), b.data(), f)
}

fn zip_slices(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_in_place(row: &mut [f32]) {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

fn permute_data(src: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let inner = *out_shape.last().unwrap();
    let inner_stride = *out_strides.last().unwrap();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..rank - 1].iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Visits every `(big_offset, small_offset, channels)` pair for a 5-D pool/upsample.
fn for_pool_pairs(big: &[usize], f: [usize; 3], mut visit: impl FnMut(usize, usize, usize)) {
    let (b, t, h, w, d) = (big[0], big[1], big[2], big[3], big[4]);
    let (st, sh, sw) = (t / f[0], h / f[1], w / f[2]);
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    let bo = (((bi * t + ti) * h + hi) * w + wi) * d;
                    let so = (((bi * st + ti / f[0]) * sh + hi / f[1]) * sw + wi / f[2]) * d;
                    visit(bo, so, d);
                }
            }
        }
    }
}

fn for_unfold(n: usize, h: usize, w: usize, c: usize, k: usize, mut visit: impl FnMut(usize, usize)) {
    let r = (k / 2) as isize;
    let kc = k * k * c;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dst_base = ((ni * h + y) * w + x) * kc;
                let mut slot = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            let src = ((ni * h + sy as usize) * w + sx as usize) * c;
                            visit(src, dst_base + slot * c);
                        }
                        slot += 1;
                    }
                }
            }
        }
    }
}

/// Index map for trailing-aligned broadcasting of `y` against `x`.
struct BroadcastMap {
    x_shape: Vec<usize>,
    y_strides: Vec<usize>,
    suffix_len: Option<usize>,
}

impl BroadcastMap {
    fn new(xs: &[usize], ys: &[usize]) -> Option<Self> {
        if ys.len() > xs.len() {
            return None;
        }
        let pad = xs.len() - ys.len();
        let mut full = vec![1usize; pad];
        full.extend_from_slice(ys);
        for (a, b) in xs.iter().zip(&full) {
            if *b != 1 && b != a {
                return None;
            }
        }
        let mut strides = vec![0usize; xs.len()];
        let mut s = 1;
        for i in (0..xs.len()).rev() {
            if full[i] != 1 {
                strides[i] = s;
                s *= full[i];
            }
        }
        // fast path: y equals a trailing block of x
        let n_y: usize = ys.iter().product();
        let trailing: usize = xs[pad..].iter().product();
        let suffix_len = (n_y == trailing).then_some(n_y);
        Some(Self {
            x_shape: xs.to_vec(),
            y_strides: strides,
            suffix_len,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.x_shape.iter().product();
        if let Some(n) = self.suffix_len {
            for base in (0..total).step_by(n) {
                for j in 0..n {
                    f(base + j, j);
                }
            }
            return;
        }
        let rank = self.x_shape.len();
        let mut idx = vec![0usize; rank];
        let mut yi = 0usize;
        for xi in 0..total {
            f(xi, yi);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                yi += self.y_strides[ax];
                if idx[ax] < self.x_shape[ax] {
                    break;
                }
                yi -= self.y_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let m = t(&[3, 2], &[1., -2., 0.5, 4., 7., 0.]);
        let i = tape.constant(Tensor::eye(3));
        let mv = tape.constant(m.clone());
        let c = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(c), &m);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1., 1., 1.]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 3.5]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2., -4., 7.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., -100., 0., 100.]));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1., 2., 3., 4., -3., 10., 0.5, 7.]));
        let y = tape.layer_norm(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let m: f32 = row.iter().sum::<f32>() / 4.0;
            let v: f32 = row.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / 4.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap());
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).get(&[3, 1, 2]), tape.value(x).get(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn broadcast_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 2]).with_requires_grad(true));
        let y = tape.leaf(t(&[3, 1], &[1., 2., 3.]).with_requires_grad(true));
        let z = tape.add_broadcast(x, y).unwrap();
        assert_eq!(tape.value(z).get(&[1, 2, 1]), 3.0);
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(y).data(), &[4., 4., 4.]);
    }

    #[test]
    fn pool_then_upsample_preserves_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4, 2, 6, 3], 0.25));
        let p = tape.avg_pool(x, [2, 2, 3]).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 1, 2, 3]);
        let u = tape.upsample(p, [2, 2, 3]).unwrap();
        assert!(tape.value(u).max_abs_diff(tape.value(x)) < 1e-7);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(matches!(tape.attention(q, q, q, 4, false), Err(TensorError::Config(_))));
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2], &[0.3, -0.1]).with_requires_grad(true));
        let q = tape.straight_through(z, &t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 2.0]);
        let sq = tape.mul(q, q).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(z).data(), &[2.0, 4.0]);
    }
}
