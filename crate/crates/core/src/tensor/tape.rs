use rand::Rng;

use super::gemm::{gemm_acc, MatRef};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a fully-masked softmax row turns into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRow {
    Error,
    /// All-zero output row with zero gradient.
    Zero,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Dropout(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    RepeatRows(Var, usize),
    Reshape(Var),
    SelectRows(Vec<bool>, Var, Var),
    Softmax(Var),
    Attend(Var, Var),
    Scatter(Var, Vec<usize>, Vec<bool>),
    Pick(Var, Vec<usize>),
    ScaleRows(Var, Var),
    LogClamped(Var, f64),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Every op pushes a node after its inputs, so node ids are already a
/// topological order. `backward` walks them once, last to first, and adds
/// the result into per-leaf accumulators that persist across calls.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape().len() {
        0 => (1, 1),
        1 => (1, t.shape()[0]),
        _ => (t.rows(), t.cols()),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Softmax of `x` over unmasked entries into `out`. Returns false when every
/// entry is masked (and leaves `out` zeroed).
pub(crate) fn softmax_into(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> bool {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut denom = 0.0;
    for (j, &v) in x.iter().enumerate() {
        out[j] = if keep(j) { (v - max).exp() } else { 0.0 };
        denom += out[j];
    }
    out.iter_mut().for_each(|o| *o /= denom);
    true
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by every `backward` call so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let value = Tensor::constant(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t`. Trainable tensors become gradient leaves.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape(), t.data().to_vec(), Op::Leaf, t.is_trainable())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(&shape, data, Op::Leaf, false)
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims2(ta), dims2(tb));
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(&[m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ` for `x: [n×in]`, `w: [out×in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let ((n, i), (o, i2)) = (dims2(tx), dims2(tw));
        if i != i2 {
            return Err(shape_err("linear", tx, tw));
        }
        let mut out = vec![0.0; n * o];
        gemm_acc(
            MatRef::new(tx.data(), n, i),
            MatRef::new(tw.data(), o, i).t(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(&[n, o], out, Op::Linear(x, w), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y));
            (ta.shape().to_vec(), d.collect())
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(shape_err(name, ta, tb));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(&shape, data, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(shape_err("add_bias", tx, tb));
        }
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(&shape, data, Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(&shape, data, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.shift(neg, 1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, super::sigmoid, Op::Sigmoid(x))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = dims2(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = dims2(t);
            if r != rows {
                return Err(shape_err("concat", first, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(&[rows, total], data, Op::Concat(parts.to_vec()), rg))
    }

    /// Inverted dropout. With `rng == None` (eval mode) or `p == 0` the input
    /// handle is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutRate(p));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(&shape, data, Op::Dropout(x, mask), rg))
    }

    /// Row lookup: `out[r] = table[idx[r]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = dims2(t);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    limit: n,
                });
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(&[idx.len(), c], data, Op::Gather(table, idx.to_vec()), rg))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let t = self.value(x);
        let (n, c) = dims2(t);
        let mut data = Vec::with_capacity(n * times * c);
        for r in 0..n {
            for _ in 0..times {
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(x);
        self.push(&[n * times, c], data, Op::RepeatRows(x, times), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(TensorError::Length {
                shape: shape.to_vec(),
                len: t.len(),
            });
        }
        let data = t.data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Reshape(x), rg))
    }

    /// Row-wise choice: row `r` comes from `a` where `take_a[r]`, else `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rows() != take_a.len() {
            return Err(shape_err("select_rows", ta, tb));
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for (r, &use_a) in take_a.iter().enumerate() {
            let src = if use_a { ta } else { tb };
            data.extend_from_slice(&src.data()[r * c..(r + 1) * c]);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(&shape, data, Op::SelectRows(take_a.to_vec(), a, b), rg))
    }

    /// Row-wise softmax. Masked entries (`mask[i] == false`) are exactly zero
    /// and excluded from each row's denominator.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>, empty: EmptyRow) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = dims2(t);
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(TensorError::Shape {
                    op: "softmax_rows mask",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut data = vec![0.0; n * c];
        for r in 0..n {
            let row_mask = mask.map(|m| &m[r * c..(r + 1) * c]);
            let ok = softmax_into(&t.data()[r * c..(r + 1) * c], row_mask, &mut data[r * c..(r + 1) * c]);
            if !ok && empty == EmptyRow::Error {
                return Err(TensorError::EmptySupport { row: r });
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(&shape, data, Op::Softmax(x), rg))
    }

    /// Blockwise weighted sum: `out[b] = Σ_t weights[b,t] · blocks[b, t·d..(t+1)·d]`.
    pub fn attend(&mut self, weights: Var, blocks: Var) -> Result<Var> {
        let (tw, ts) = (self.value(weights), self.value(blocks));
        let (b, steps) = dims2(tw);
        let (b2, width) = dims2(ts);
        if b != b2 || steps == 0 || width % steps != 0 {
            return Err(shape_err("attend", tw, ts));
        }
        let d = width / steps;
        let mut data = vec![0.0; b * d];
        for r in 0..b {
            let out = &mut data[r * d..(r + 1) * d];
            for t in 0..steps {
                let w = tw.data()[r * steps + t];
                let blk = &ts.data()[r * width + t * d..r * width + (t + 1) * d];
                out.iter_mut().zip(blk).for_each(|(o, h)| *o += w * h);
            }
        }
        let rg = self.rg(weights) || self.rg(blocks);
        Ok(self.push(&[b, d], data, Op::Attend(weights, blocks), rg))
    }

    /// Scatter-adds `x[b,t]` into column `index[b,t]` of a `[B × width]`
    /// output, skipping positions where `valid` is false.
    pub fn scatter_cols(&mut self, x: Var, index: &[usize], valid: &[bool], width: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, steps) = dims2(t);
        if index.len() != t.len() || valid.len() != t.len() {
            return Err(TensorError::Shape {
                op: "scatter_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let mut data = vec![0.0; b * width];
        for r in 0..b {
            for s in 0..steps {
                let k = r * steps + s;
                if !valid[k] {
                    continue;
                }
                if index[k] >= width {
                    return Err(TensorError::Index {
                        op: "scatter_cols",
                        index: index[k],
                        limit: width,
                    });
                }
                data[r * width + index[k]] += t.data()[k];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            &[b, width],
            data,
            Op::Scatter(x, index.to_vec(), valid.to_vec()),
            rg,
        ))
    }

    /// One entry per row: `out[b] = x[b, idx[b]]`, shape `[B × 1]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (b, c) = dims2(t);
        if idx.len() != b {
            return Err(TensorError::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(b);
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(TensorError::Index {
                    op: "pick",
                    index: i,
                    limit: c,
                });
            }
            data.push(t.data()[r * c + i]);
        }
        let rg = self.rg(x);
        Ok(self.push(&[b, 1], data, Op::Pick(x, idx.to_vec()), rg))
    }

    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let b = dims2(self.value(x)).0;
        self.pick(x, &vec![j; b])
    }

    /// Multiplies each row of `x: [B × C]` by the matching entry of `c: [B × 1]`.
    pub fn scale_rows(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        let (b, w) = dims2(tx);
        if tc.len() != b {
            return Err(shape_err("scale_rows", tx, tc));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tc.data()[i / w])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(&shape, data, Op::ScaleRows(x, c), rg))
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, move |v| v.max(floor).ln(), Op::LogClamped(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(&[1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(&[1], vec![s], Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients add onto whatever
    /// earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (dims2(ta), dims2(tb));
                let gm = MatRef::new(g, m, n);
                send(*a, &|s| gemm_acc(gm, MatRef::new(tb.data(), k, n).t(), s));
                send(*b, &|s| gemm_acc(MatRef::new(ta.data(), m, k).t(), gm, s));
            }
            Op::Linear(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let ((n, i), (o, _)) = (dims2(tx), dims2(tw));
                let gm = MatRef::new(g, n, o);
                send(*x, &|s| gemm_acc(gm, MatRef::new(tw.data(), o, i), s));
                send(*w, &|s| gemm_acc(gm.t(), MatRef::new(tx.data(), n, i), s));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, &|s| reduce_into(s, g, 1.0));
                send(*b, &|s| reduce_into(s, g, sign));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, &|s| product_grad(s, g, tb.data()));
                send(*b, &|s| product_grad(s, g, ta.data()));
            }
            Op::AddBias(x, b) => {
                send(*x, &|s| add_into(s, g));
                let c = out.cols();
                send(*b, &|s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % c] += gv;
                    }
                });
            }
            Op::Scale(x, c) => send(*x, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::Shift(x) | Op::Reshape(x) => send(*x, &|s| add_into(s, g)),
            Op::Tanh(x) => send(*x, &|s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => send(*x, &|s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = dims2(self.value(p)).1;
                    send(p, &|s| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut s[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Dropout(x, mask) => send(*x, &|s| {
                for ((s, g), m) in s.iter_mut().zip(g).zip(mask) {
                    *s += g * m;
                }
            }),
            Op::Gather(table, idx) => {
                let c = out.cols();
                send(*table, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::RepeatRows(x, times) => {
                let c = out.cols();
                send(*x, &|s| {
                    for (r, gr) in g.chunks(c).enumerate() {
                        let src = r / times;
                        add_into(&mut s[src * c..(src + 1) * c], gr);
                    }
                });
            }
            Op::SelectRows(take_a, a, b) => {
                let c = out.cols();
                let pass = |s: &mut [f64], want: bool| {
                    for (r, &t) in take_a.iter().enumerate() {
                        if t == want {
                            add_into(&mut s[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    }
                };
                send(*a, &|s| pass(s, true));
                send(*b, &|s| pass(s, false));
            }
            Op::Softmax(x) => {
                let c = out.cols();
                send(*x, &|s| {
                    for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::Attend(w, blocks) => {
                let (tw, ts) = (self.value(*w), self.value(*blocks));
                let (b, steps) = dims2(tw);
                let width = ts.cols();
                let d = width / steps;
                send(*w, &|s| {
                    for r in 0..b {
                        let gr = &g[r * d..(r + 1) * d];
                        for t in 0..steps {
                            let blk = &ts.data()[r * width + t * d..r * width + (t + 1) * d];
                            s[r * steps + t] += gr.iter().zip(blk).map(|(a, h)| a * h).sum::<f64>();
                        }
                    }
                });
                send(*blocks, &|s| {
                    for r in 0..b {
                        let gr = &g[r * d..(r + 1) * d];
                        for t in 0..steps {
                            let wt = tw.data()[r * steps + t];
                            let dst = &mut s[r * width + t * d..r * width + (t + 1) * d];
                            dst.iter_mut().zip(gr).for_each(|(s, g)| *s += wt * g);
                        }
                    }
                });
            }
            Op::Scatter(x, index, valid) => {
                let steps = self.value(*x).cols();
                let width = out.cols();
                send(*x, &|s| {
                    for (k, (&i, &ok)) in index.iter().zip(valid).enumerate() {
                        if ok {
                            s[k] += g[(k / steps) * width + i];
                        }
                    }
                });
            }
            Op::Pick(x, idx) => {
                let c = self.value(*x).cols();
                send(*x, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        s[r * c + i] += g[r];
                    }
                });
            }
            Op::ScaleRows(x, c) => {
                let (tx, tc) = (self.value(*x), self.value(*c));
                let w = tx.cols();
                send(*x, &|s| {
                    for (i, (s, g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g * tc.data()[i / w];
                    }
                });
                send(*c, &|s| {
                    for (i, (g, v)) in g.iter().zip(tx.data()).enumerate() {
                        s[i / w] += g * v;
                    }
                });
            }
            Op::LogClamped(x, floor) => {
                let tx = self.value(*x);
                send(*x, &|s| {
                    for ((s, g), &v) in s.iter_mut().zip(g).zip(tx.data()) {
                        if v > *floor {
                            *s += g / v;
                        }
                    }
                });
            }
            Op::Sum(x) => send(*x, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                send(*x, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Routes an elementwise gradient to an operand that may have been a
/// broadcast scalar.
fn reduce_into(dst: &mut [f64], g: &[f64], sign: f64) {
    if dst.len() == g.len() {
        dst.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
    } else {
        dst[0] += sign * g.iter().sum::<f64>();
    }
}

fn product_grad(dst: &mut [f64], g: &[f64], other: &[f64]) {
    let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    if dst.len() == g.len() {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += g[i] * at(other, i);
        }
    } else {
        dst[0] += g.iter().enumerate().map(|(i, g)| g * at(other, i)).sum::<f64>();
    }
}
