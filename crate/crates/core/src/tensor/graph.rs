use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, batched: bool },
    TransposeLast2(Var),
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanAxis { a: Var, axis: usize },
    Gather { a: Var, index: Arc<Vec<Vec<usize>>> },
    Scatter { x: Var, fill: Var, index: Arc<Vec<Vec<usize>>> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Every node's parents precede it,
/// so reverse insertion order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    inference: bool,
}

/// Gradients produced by [`Graph::backward`] for every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    /// Adds each bound parameter's gradient into the store's grad slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, var) in &self.params {
            if let Some(g) = self.leaves.get(var) {
                store.tensor_mut(*id).accumulate_grad(g);
            }
        }
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if a == b || b.iter().product::<usize>() == 1 && b.len() <= 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are bound as constants; nothing on it can be
    /// differentiated.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph was consumed by backward; build a new one".into()));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        !self.inference && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Leaf that takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let rg = t.requires_grad() && !self.inference;
        if self.consumed {
            return Err(Error::Graph("graph was consumed by backward; build a new one".into()));
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let v = self.leaf(t)?;
        self.nodes[v.0].requires_grad = false;
        Ok(v)
    }

    pub fn variable(&mut self, t: &Tensor) -> Result<Var> {
        let v = self.leaf(t)?;
        self.nodes[v.0].requires_grad = !self.inference;
        Ok(v)
    }

    /// Binds a stored parameter. Its gradient is routed back to the store via
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.tensor(id);
        let v = self.leaf(t)?;
        if !self.inference {
            self.nodes[v.0].op = Op::Param(id);
        }
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Shape(format!("{name} of {sa:?} and {sb:?}: only trailing-axis or scalar broadcasting is supported")));
        }
        Ok((sa.to_vec(), self.node(b).value.len()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, bn) = self.binary(a, b, "add")?;
        let (x, y) = (self.data(a), self.data(b));
        let out = x.iter().enumerate().map(|(i, v)| v + y[i % bn]).collect();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, bn) = self.binary(a, b, "sub")?;
        let (x, y) = (self.data(a), self.data(b));
        let out = x.iter().enumerate().map(|(i, v)| v - y[i % bn]).collect();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, bn) = self.binary(a, b, "mul")?;
        let (x, y) = (self.data(a), self.data(b));
        let out = x.iter().enumerate().map(|(i, v)| v * y[i % bn]).collect();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Mul(a, b), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, factor), rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a 2-D matrix shared by every leading index of `a`, or has
    /// the same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape(format!("matmul of {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (x, y) = (self.data(a), self.data(b));
        if batched {
            for t in 0..batch {
                gemm_nn(
                    &x[t * m * k..(t + 1) * m * k],
                    &y[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            gemm_nn(x, y, &mut out, batch * m, k, n);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::MatMul { a, b, batched }, rg)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose of {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.data(a).len() / (r * c).max(1);
        let x = self.data(a);
        let mut out = Vec::with_capacity(x.len());
        for t in 0..batch {
            out.extend(kernels::transpose(&x[t * r * c..(t + 1) * r * c], r, c));
        }
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::TransposeLast2(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let out = self.data(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape.to_vec(), out, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..s.len()).collect::<Vec<_>>() {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for {s:?}")));
        }
        let out = kernels::permute(self.data(a), &s, axes);
        let shape = axes.iter().map(|&i| s[i]).collect();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Permute { a, axes: axes.to_vec() }, rg)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let x = self.data(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let (outer, len, inner) = Self::axis_split(&s, axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(s, out, Op::Softmax { a, axis }, rg)
    }

    /// Layer normalization over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {s:?} needs gamma/beta of [{d}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xv, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(s, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Exact GELU, `x·Φ(x)` with the error-function form of Φ.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&v| v * std_normal_cdf(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Gelu(a), rg)
    }

    /// Mean over the batch of `-Σ target · log softmax(logits)`.
    ///
    /// `targets` are soft labels of the same `[B, C]` shape whose rows must
    /// each sum to one.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (b, c) = match s.as_slice() {
            &[b, c] if b > 0 && c > 0 => (b, c),
            _ => return Err(Error::Shape(format!("cross_entropy expects [B, C] logits, got {s:?}"))),
        };
        if targets.shape() != s.as_slice() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {s:?} vs targets {:?}",
                targets.shape()
            )));
        }
        let t = targets.data();
        for (row, chunk) in t.chunks(c).enumerate() {
            let total: f64 = chunk.iter().sum();
            if (total - 1.0).abs() > 1e-6 || chunk.iter().any(|v| *v < 0.0) {
                return Err(Error::Label(format!("target row {row} sums to {total}, expected 1")));
            }
        }
        let x = self.data(logits);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cross_entropy logits contain non-finite values".into()));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                let tj = t[r * c + j];
                if tj != 0.0 {
                    loss -= tj * logp;
                }
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Vec::new(),
            vec![loss / b as f64],
            Op::CrossEntropy { logits, targets: t.to_vec(), probs },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![total], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        if x.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![m], Op::Mean(a), rg)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Shape(format!("mean over axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = Self::axis_split(&s, axis);
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::MeanAxis { a, axis }, rg)
    }

    /// Selects rows per batch element: `out[b, v] = a[idx[b][v]]` for a 2-D
    /// `a` of shape `[N, D]`, or `a[b, idx[b][v]]` for a 3-D `[B, N, D]`.
    pub fn gather_rows(&mut self, a: Var, index: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batched, n, d) = match *s.as_slice() {
            [n, d] => (false, n, d),
            [b, n, d] if b == index.len() => (true, n, d),
            _ => return Err(Error::Shape(format!("gather_rows of {s:?} with {} index rows", index.len()))),
        };
        let v = index.first().map_or(0, Vec::len);
        if index.iter().any(|row| row.len() != v || row.iter().any(|&i| i >= n)) {
            return Err(Error::Shape(format!("gather index out of range or ragged for {n} rows")));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(index.len() * v * d);
        for (b, row) in index.iter().enumerate() {
            let base = if batched { b * n * d } else { 0 };
            for &i in row {
                out.extend_from_slice(&x[base + i * d..base + (i + 1) * d]);
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            vec![index.len(), v, d],
            out,
            Op::Gather { a, index: Arc::new(index.to_vec()) },
            rg,
        )
    }

    /// Inverse of [`Graph::gather_rows`] with a fill row: builds `[B, n, D]`
    /// where row `index[b][v]` holds `x[b, v]` and every other row holds
    /// `fill`.
    pub fn scatter_rows(&mut self, x: Var, fill: Var, index: &[Vec<usize>], n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, v, d) = match s.as_slice() {
            &[b, v, d] if b == index.len() => (b, v, d),
            _ => return Err(Error::Shape(format!("scatter_rows of {s:?} with {} index rows", index.len()))),
        };
        if self.shape(fill) != [d] {
            return Err(Error::Shape(format!("scatter fill {:?} vs width {d}", self.shape(fill))));
        }
        for row in index {
            let mut seen = vec![false; n];
            if row.len() != v {
                return Err(Error::Shape("scatter index row length differs from token count".into()));
            }
            for &i in row {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Shape(format!("scatter index {i} repeated or outside 0..{n}")));
                }
            }
        }
        let (xv, fv) = (self.data(x), self.data(fill));
        let mut out = Vec::with_capacity(b * n * d);
        for _ in 0..b * n {
            out.extend_from_slice(fv);
        }
        for (bi, row) in index.iter().enumerate() {
            for (vi, &i) in row.iter().enumerate() {
                let src = &xv[(bi * v + vi) * d..(bi * v + vi + 1) * d];
                out[(bi * n + i) * d..(bi * n + i + 1) * d].copy_from_slice(src);
            }
        }
        let rg = self.rg(&[x, fill]);
        self.push(vec![b, n, d], out, Op::Scatter { x, fill, index: Arc::new(index.to_vec()) }, rg)
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same graph".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(node.op, Op::Leaf | Op::Param(_)) {
                    out.leaves.insert(Var(idx), vec![0.0; node.value.len()]);
                }
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                out.leaves.insert(Var(idx), g);
            }
        }
        // leaves recorded after the loss never reached it
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param(_)) {
                out.leaves.insert(Var(idx), vec![0.0; node.value.len()]);
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), true) = (&node.op, node.requires_grad) {
                out.params.push((*id, Var(idx)));
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(*b, &mut |gb| {
                    let bn = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % bn] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let bn = xb.len();
                send(*a, &mut |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * xb[i % bn];
                    }
                });
                send(*b, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % bn] += y * xa[i];
                    }
                });
            }
            Op::Scale(a, f) => send(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (xa, xb) = (self.data(*a), self.data(*b));
                if *batched {
                    send(*a, &mut |ga| {
                        for t in 0..batch {
                            gemm_nt(&g[t * m * n..(t + 1) * m * n], &xb[t * k * n..(t + 1) * k * n], &mut ga[t * m * k..(t + 1) * m * k], m, n, k);
                        }
                    });
                    send(*b, &mut |gb| {
                        for t in 0..batch {
                            gemm_tn(&xa[t * m * k..(t + 1) * m * k], &g[t * m * n..(t + 1) * m * n], &mut gb[t * k * n..(t + 1) * k * n], k, m, n);
                        }
                    });
                } else {
                    let rows = batch * m;
                    send(*a, &mut |ga| gemm_nt(g, xb, ga, rows, n, k));
                    send(*b, &mut |gb| gemm_tn(xa, g, gb, k, rows, n));
                }
            }
            Op::TransposeLast2(a) => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c).max(1);
                send(*a, &mut |ga| {
                    for t in 0..batch {
                        let back = kernels::transpose(&g[t * r * c..(t + 1) * r * c], r, c);
                        ga[t * r * c..(t + 1) * r * c].iter_mut().zip(back).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => send(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = kernels::permute(g, &node.shape, &inverse);
                send(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Softmax { a, axis } => {
                let y = &node.value;
                let (outer, len, inner) = Self::axis_split(&node.shape, *axis);
                send(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap_or(&1);
                let rows = g.len() / d;
                let gam = self.data(*gamma);
                send(*x, &mut |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                send(*gamma, &mut |gg| {
                    for (i, y) in g.iter().enumerate() {
                        gg[i % d] += y * xhat[i];
                    }
                });
                send(*beta, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                send(*a, &mut |ga| {
                    for (i, y) in g.iter().enumerate() {
                        let v = x[i];
                        ga[i] += y * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = self.shape(*logits)[0] as f64;
                let c = self.shape(*logits)[1];
                let scale = g[0] / b;
                send(*logits, &mut |gl| {
                    for r in 0..probs.len() / c {
                        let mass: f64 = targets[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            let i = r * c + j;
                            gl[i] += scale * (mass * probs[i] - targets[i]);
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => send(*a, &mut |ga| {
                let f = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += f);
            }),
            Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = Self::axis_split(self.shape(*a), *axis);
                send(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (x, y) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *x += y / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Gather { a, index } => {
                let s = self.shape(*a);
                let (batched, n, d) = if s.len() == 3 { (true, s[1], s[2]) } else { (false, s[0], s[1]) };
                send(*a, &mut |ga| {
                    let v = index.first().map_or(0, Vec::len);
                    for (b, row) in index.iter().enumerate() {
                        let base = if batched { b * n * d } else { 0 };
                        for (vi, &i) in row.iter().enumerate() {
                            let src = &g[(b * v + vi) * d..(b * v + vi + 1) * d];
                            for (x, y) in ga[base + i * d..base + (i + 1) * d].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                });
            }
            Op::Scatter { x, fill, index } => {
                let (n, d) = (node.shape[1], node.shape[2]);
                let v = index.first().map_or(0, Vec::len);
                send(*x, &mut |gx| {
                    for (b, row) in index.iter().enumerate() {
                        for (vi, &i) in row.iter().enumerate() {
                            let src = &g[(b * n + i) * d..(b * n + i + 1) * d];
                            for (xg, y) in gx[(b * v + vi) * d..(b * v + vi + 1) * d].iter_mut().zip(src) {
                                *xg += y;
                            }
                        }
                    }
                });
                send(*fill, &mut |gf| {
                    for (b, row) in index.iter().enumerate() {
                        let mut visible = vec![false; n];
                        row.iter().for_each(|&i| visible[i] = true);
                        for (i, _) in visible.iter().enumerate().filter(|(_, vis)| !**vis) {
                            for (x, y) in gf.iter_mut().zip(&g[(b * n + i) * d..(b * n + i + 1) * d]) {
                                *x += y;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
