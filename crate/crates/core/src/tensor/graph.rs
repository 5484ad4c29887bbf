use super::kernels::{gemm, log_sum_exp, sigmoid, softmax_in_place, Real, View, ViewMut};
use super::{dim_err, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols { a: Var, b: Var },
    Reshape { x: Var },
    Softmax { x: Var, outer: usize, axis_len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Swiglu { x: Var },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize>, probs: Vec<T>, count: usize },
    KlDiv { student: Var, diff: Vec<T>, scale: T },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatCols { a, b } => {
                vec![*a, *b]
            }
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::SliceCols { x, .. }
            | Op::Reshape { x }
            | Op::Softmax { x, .. }
            | Op::Swiglu { x } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { student, .. } => vec![*student],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], one optional buffer per leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Dynamically recorded computation. Nodes are appended in execution order,
/// so the node list is already topologically sorted.
///
/// Policy for repeated backward: the first call consumes the graph (values of
/// intermediate nodes are released) and every later call returns
/// [`TensorError::GraphConsumed`].
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return dim_err(op, format!("{a:?} vs {b:?}"));
    }
    Ok(())
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => dim_err(op, format!("expected a 2-D tensor, got {shape:?}")),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] · bᵀ` where `b` is `[n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a).shape())?;
        let (br, bc) = as_matrix("matmul", self.value(b).shape())?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return dim_err("matmul", format!("inner extents {k} vs {bk}"));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = View::row_major(self.value(a).data(), 0, m, k, k);
            let bdata = self.value(b).data();
            let bv = if trans_b {
                View::row_major(bdata, 0, n, k, k).t()
            } else {
                View::row_major(bdata, 0, k, n, n)
            };
            gemm(T::one(), av, bv, T::zero(), ViewMut::row_major(&mut out, 0, m, n, n));
        }
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("add", Tensor { shape, data }, Op::Add { a, b })
    }

    /// Adds a `[c]` vector to every row of `x [.., c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(bias).shape() != [c] {
            return dim_err("add_row", format!("bias {:?} vs last extent {c}", self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("add_row", Tensor { shape, data }, Op::AddRow { x, bias })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("mul", Tensor { shape, data }, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("scale", Tensor { shape, data }, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x })
    }

    /// Row lookup: `table [n_rows, d]` indexed by `ids`, producing `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = as_matrix("gather", self.value(table).shape())?;
        if ids.is_empty() {
            return dim_err("gather", "empty id list");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { op: "gather", detail: format!("id {bad} >= {rows}") });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push("gather", Tensor { shape: vec![ids.len(), d], data }, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = as_matrix("slice_cols", self.value(x).shape())?;
        if start >= end || end > c {
            return dim_err("slice_cols", format!("range {start}..{end} of {c} columns"));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        self.push("slice_cols", Tensor { shape: vec![r, w], data }, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = as_matrix("concat_cols", self.value(a).shape())?;
        let (rb, cb) = as_matrix("concat_cols", self.value(b).shape())?;
        if ra != rb {
            return dim_err("concat_cols", format!("row counts {ra} vs {rb}"));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for (x, y) in self.value(a).data().chunks(ca).zip(self.value(b).data().chunks(cb)) {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        self.push("concat_cols", Tensor { shape: vec![ra, ca + cb], data }, Op::ConcatCols { a, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape { x })
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", format!("axis {axis} for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = src.to_vec();
        let mut lane = vec![T::zero(); axis_len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = src[base + j * inner];
                }
                softmax_in_place(&mut lane);
                for (j, l) in lane.iter().enumerate() {
                    data[base + j * inner] = *l;
                }
            }
        }
        self.push("softmax", Tensor { shape, data }, Op::Softmax { x, outer, axis_len, inner })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[c]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [c] {
                return dim_err("layer_norm", format!("affine {:?} vs last extent {c}", self.value(p).shape()));
            }
        }
        if eps <= 0.0 {
            return dim_err("layer_norm", "eps must be positive");
        }
        let eps = T::from_f64(eps);
        let n = T::from_f64(c as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / c;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push("layer_norm", Tensor { shape, data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// `silu(u) ⊙ v` where `x = [u | v]` along the last axis.
    pub fn swiglu(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if !c.is_multiple_of(2) {
            return dim_err("swiglu", format!("last extent {c} is odd"));
        }
        let f = c / 2;
        let mut data = Vec::with_capacity(self.value(x).numel() / 2);
        for row in self.value(x).data().chunks(c) {
            let (u, v) = row.split_at(f);
            data.extend(u.iter().zip(v).map(|(&u, &v)| u * sigmoid(u) * v));
        }
        let mut shape = self.value(x).shape().to_vec();
        *shape.last_mut().unwrap() = f;
        self.push("swiglu", Tensor { shape, data }, Op::Swiglu { x })
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, heads·head_dim]` with rows grouped by
    /// sequence. Position `i` attends to positions `j <= i` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (n, d) = as_matrix("causal_attention", self.value(q).shape())?;
        same_shape("causal_attention", self.value(q).shape(), self.value(k).shape())?;
        same_shape("causal_attention", self.value(q).shape(), self.value(v).shape())?;
        if n != batch * seq || heads == 0 || d % heads != 0 {
            return dim_err("causal_attention", format!("[{n},{d}] with batch {batch}, seq {seq}, heads {heads}"));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); n * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    scale,
                    View::row_major(qd, off, seq, dh, d),
                    View::row_major(kd, off, seq, dh, d).t(),
                    T::zero(),
                    ViewMut::row_major(p, 0, seq, seq, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    for e in &mut row[i + 1..] {
                        *e = T::zero();
                    }
                }
                gemm(
                    T::one(),
                    View::row_major(p, 0, seq, seq, seq),
                    View::row_major(vd, off, seq, dh, d),
                    T::zero(),
                    ViewMut::row_major(&mut out, off, seq, dh, d),
                );
            }
        }
        self.push(
            "causal_attention",
            Tensor { shape: vec![n, d], data: out },
            Op::Attention { q, k, v, batch, seq, heads, probs },
        )
    }

    /// Mean negative log-likelihood of `targets` under `logits [N, V]`,
    /// skipping positions whose target equals `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let (n, vocab) = as_matrix("cross_entropy", self.value(logits).shape())?;
        if targets.len() != n {
            return dim_err("cross_entropy", format!("{} targets for {n} rows", targets.len()));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            if t >= vocab {
                return Err(TensorError::Index { op: "cross_entropy", detail: format!("target {t} >= vocab {vocab}") });
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            total = total + (log_sum_exp(row) - row[t]);
            let pr = &mut probs[r * vocab..(r + 1) * vocab];
            pr.copy_from_slice(row);
            softmax_in_place(pr);
            count += 1;
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_f64(count as f64) };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore: ignore_index, probs, count },
        )
    }

    /// `T² · mean_rows KL(softmax(teacher/T) ‖ softmax(student/T))`.
    ///
    /// The teacher side is treated as a constant: no adjoint flows into it.
    pub fn kl_teacher_student(&mut self, teacher: Var, student: Var, temperature: f64) -> Result<Var> {
        same_shape("kl_teacher_student", self.value(teacher).shape(), self.value(student).shape())?;
        if temperature <= 0.0 {
            return dim_err("kl_teacher_student", "temperature must be positive");
        }
        let vocab = self.value(student).last_dim();
        let rows = self.value(student).rows();
        let temp = T::from_f64(temperature);
        let mut diff = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        let mut p = vec![T::zero(); vocab];
        let mut logq = vec![T::zero(); vocab];
        let (td, sd) = (self.value(teacher).data(), self.value(student).data());
        for r in 0..rows {
            for j in 0..vocab {
                p[j] = td[r * vocab + j] / temp;
                logq[j] = sd[r * vocab + j] / temp;
            }
            let lse_p = log_sum_exp(&p);
            let lse_q = log_sum_exp(&logq);
            for j in 0..vocab {
                let lp = p[j] - lse_p;
                let lq = logq[j] - lse_q;
                let pj = lp.exp();
                if pj > T::zero() {
                    total = total + pj * (lp - lq);
                }
                diff[r * vocab + j] = lq.exp() - pj;
            }
        }
        let rows_t = T::from_f64(rows as f64);
        let loss = temp * temp * total / rows_t;
        // d loss / d student = T · (q − p) / rows
        let scale = temp / rows_t;
        self.push("kl_teacher_student", Tensor::scalar(loss), Op::KlDiv { student, diff, scale })
    }

    /// Reverse pass from a single-element `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &dout, &mut grads);
            // Nothing earlier in the order reads this node's value.
            self.nodes[i].value = Tensor { shape: vec![], data: vec![] };
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad && matches!(node.op, Op::Leaf))
                    .map(|data| Tensor { shape: node.value.shape.clone(), data })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, op: &Op<T>, dout: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = &self.nodes[i].value.shape;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, local: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(&local).for_each(|(a, b)| *a = *a + *b),
                slot @ None => *slot = Some(local),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = out_shape[1];
                let dv = View::row_major(dout, 0, m, n, n);
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let bd = self.value(*b).data();
                    // da = dout · bᵀ (b is [k,n]) or dout · b (b is [n,k])
                    let bv = if *trans_b {
                        View::row_major(bd, 0, n, k, k)
                    } else {
                        View::row_major(bd, 0, k, n, n).t()
                    };
                    gemm(T::one(), dv, bv, T::zero(), ViewMut::row_major(&mut da, 0, m, k, k));
                    acc(grads, *a, da);
                }
                if needs(*b) {
                    let av = View::row_major(self.value(*a).data(), 0, m, k, k);
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // db [n,k] = doutᵀ · a
                        gemm(T::one(), dv.t(), av, T::zero(), ViewMut::row_major(&mut db, 0, n, k, k));
                    } else {
                        // db [k,n] = aᵀ · dout
                        gemm(T::one(), av.t(), dv, T::zero(), ViewMut::row_major(&mut db, 0, k, n, n));
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                acc(grads, *a, dout.to_vec());
                acc(grads, *b, dout.to_vec());
            }
            Op::AddRow { x, bias } => {
                acc(grads, *x, dout.to_vec());
                if needs(*bias) {
                    let c = *out_shape.last().unwrap();
                    let mut db = vec![T::zero(); c];
                    for row in dout.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(grads, *bias, db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    acc(grads, *a, dout.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if needs(*b) {
                    acc(grads, *b, dout.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale { x, factor } => acc(grads, *x, dout.iter().map(|&g| g * *factor).collect()),
            Op::Sum { x } => acc(grads, *x, vec![dout[0]; self.value(*x).numel()]),
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let d = self.value(*table).shape[1];
                    let mut dt = vec![T::zero(); self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&dout[r * d..(r + 1) * d]).for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(grads, *table, dt);
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape[1];
                let w = out_shape[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (dst, src) in dx.chunks_mut(c).zip(dout.chunks(w)) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).shape[1];
                let cb = self.value(*b).shape[1];
                if needs(*a) {
                    acc(grads, *a, dout.chunks(ca + cb).flat_map(|r| r[..ca].iter().copied()).collect());
                }
                if needs(*b) {
                    acc(grads, *b, dout.chunks(ca + cb).flat_map(|r| r[ca..].iter().copied()).collect());
                }
            }
            Op::Reshape { x } => acc(grads, *x, dout.to_vec()),
            Op::Softmax { x, outer, axis_len, inner } => {
                let y = self.nodes[i].value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for s in 0..*inner {
                        let base = o * axis_len * inner + s;
                        let dot: T = (0..*axis_len).map(|j| dout[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..*axis_len {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (dout[idx] - dot);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = *out_shape.last().unwrap();
                let g = self.value(*gain).data();
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (drow, hrow) in dout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] = dg[j] + drow[j] * hrow[j];
                            db[j] = db[j] + drow[j];
                        }
                    }
                    acc(grads, *gain, dg);
                    acc(grads, *bias, db);
                }
                if needs(*x) {
                    let n = T::from_f64(c as f64);
                    let mut dx = vec![T::zero(); dout.len()];
                    let mut dh = vec![T::zero(); c];
                    for (r, (drow, hrow)) in dout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = drow[j] * g[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Swiglu { x } => {
                let c = self.value(*x).last_dim();
                let f = c / 2;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for ((src, dst), g) in self.value(*x).data().chunks(c).zip(dx.chunks_mut(c)).zip(dout.chunks(f)) {
                    for j in 0..f {
                        let (u, v) = (src[j], src[f + j]);
                        let s = sigmoid(u);
                        let silu = u * s;
                        dst[j] = g[j] * v * s * (T::one() + u * (T::one() - s));
                        dst[f + j] = g[j] * silu;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = out_shape[1];
                let dh = d / heads;
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut ds = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let pv = View::row_major(p, 0, seq, seq, seq);
                        let gout = View::row_major(dout, off, seq, dh, d);
                        // dV = Pᵀ · dO
                        gemm(T::one(), pv.t(), gout, T::zero(), ViewMut::row_major(&mut dv, off, seq, dh, d));
                        // dP = dO · Vᵀ
                        gemm(
                            T::one(),
                            gout,
                            View::row_major(vd, off, seq, dh, d).t(),
                            T::zero(),
                            ViewMut::row_major(&mut ds, 0, seq, seq, seq),
                        );
                        for r in 0..seq {
                            let prow = &p[r * seq..(r + 1) * seq];
                            let drow = &mut ds[r * seq..(r + 1) * seq];
                            let dot: T = (0..=r).map(|j| drow[j] * prow[j]).sum();
                            for j in 0..=r {
                                drow[j] = prow[j] * (drow[j] - dot);
                            }
                            for e in &mut drow[r + 1..] {
                                *e = T::zero();
                            }
                        }
                        let dsv = View::row_major(&ds, 0, seq, seq, seq);
                        // dQ = scale · dS · K ; dK = scale · dSᵀ · Q
                        gemm(
                            scale,
                            dsv,
                            View::row_major(kd, off, seq, dh, d),
                            T::zero(),
                            ViewMut::row_major(&mut dq, off, seq, dh, d),
                        );
                        gemm(
                            scale,
                            dsv.t(),
                            View::row_major(qd, off, seq, dh, d),
                            T::zero(),
                            ViewMut::row_major(&mut dk, off, seq, dh, d),
                        );
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.value(*logits).shape[1];
                let s = dout[0] / T::from_f64(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    let drow = &mut dl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        drow[j] = prow[j] * s;
                    }
                    drow[t] = drow[t] - s;
                }
                acc(grads, *logits, dl);
            }
            Op::KlDiv { student, diff, scale } => {
                let s = dout[0] * *scale;
                acc(grads, *student, diff.iter().map(|&d| d * s).collect());
            }
        }
    }
}
