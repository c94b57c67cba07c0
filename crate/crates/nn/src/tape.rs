use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{shape_err, NnError, Result};
use crate::real::{matmul_into, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed list of row groups (voxels, windows, clusters).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Default for Segments {
    fn default() -> Self {
        Self::new()
    }
}

impl Segments {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
        }
    }

    pub fn from_lists<L: AsRef<[usize]>>(lists: &[L]) -> Self {
        let mut s = Self::new();
        for l in lists {
            s.push(l.as_ref());
        }
        s
    }

    pub fn push(&mut self, rows: &[usize]) {
        self.indices.extend_from_slice(rows);
        self.offsets.push(self.indices.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, k: usize) -> &[usize] {
        &self.indices[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(|k| self.get(k))
    }

    /// Total number of member rows over all groups.
    pub fn total(&self) -> usize {
        self.indices.len()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
    Sum,
}

/// Backward rule for [`Tape::custom`]: `(input, output, grad_output) -> grad_input`.
pub type CustomBackward<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T>>;

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { parts: Vec<Var> },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Segment { x: Var, seg: Arc<Segments>, mode: Reduce, argmax: Vec<usize> },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, kind: NormKind },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, windows: Arc<Segments>, heads: usize, probs: Vec<T>, offsets: Vec<usize> },
    CrossEntropy { x: Var, labels: Arc<Vec<usize>>, probs: Vec<T>, count: usize },
    Nll { x: Var, labels: Arc<Vec<usize>>, count: usize },
    OffsetL1 { x: Var, target: Arc<Vec<T>>, mask: Arc<Vec<bool>>, count: usize },
    OffsetDir { x: Var, target: Arc<Vec<T>>, mask: Arc<Vec<bool>>, count: usize },
    Bce { x: Var, target: Arc<Vec<T>> },
    Sum { parts: Vec<Var> },
    Custom { x: Var, backward: CustomBackward<T> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    /// Batch statistics per column.
    BatchTrain,
    /// Fixed statistics per column.
    BatchEval,
    /// Statistics per row.
    Layer,
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Labels equal to this value are skipped by the classification losses.
pub const IGNORE_LABEL: usize = usize::MAX;

/// Records values and the ops that produced them.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes()[v.0].value.item()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let (m, k) = dims(av);
        let (k2, n) = dims(bv);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        drop(nodes);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let nodes = self.nodes();
        let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
        let (r, c) = dims(xv);
        if bv.len() != c {
            return Err(shape_err("add_bias", format!("{c} columns, bias {}", bv.len())));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += *b;
            }
        }
        drop(nodes);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddBias { x, bias }, &[x, bias]))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let t = self.unary(x, |v| v * s);
        self.push(t, Op::Scale { x, s }, &[x])
    }

    pub fn relu(&self, x: Var) -> Var {
        let t = self.unary(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let t = self.unary(x, sigmoid);
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let nodes = self.nodes();
        let Some(first) = parts.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let rows = nodes[first.0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.cols()).collect();
        if parts.iter().any(|p| nodes[p.0].value.rows() != rows) {
            return Err(shape_err("concat", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(nodes[p.0].value.row(r));
            }
        }
        drop(nodes);
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        let (r, c) = dims(xv);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(shape_err("gather", format!("row {i} of {r}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        drop(nodes);
        let n = idx.len();
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::Gather { x, idx }, &[x]))
    }

    /// Reduces each group of rows to one row. Empty groups give zeros.
    /// Max ties resolve to the earliest member of the group.
    pub fn segment_reduce(&self, x: Var, seg: Arc<Segments>, mode: Reduce) -> Result<Var> {
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        let (r, c) = dims(xv);
        if seg.max_index().is_some_and(|m| m >= r) {
            return Err(shape_err("segment_reduce", format!("group row out of {r}")));
        }
        let g = seg.len();
        let mut out = vec![T::zero(); g * c];
        let mut argmax = Vec::new();
        if mode == Reduce::Max {
            argmax = vec![usize::MAX; g * c];
        }
        for (k, rows) in seg.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let o = &mut out[k * c..(k + 1) * c];
            match mode {
                Reduce::Max => {
                    let am = &mut argmax[k * c..(k + 1) * c];
                    o.copy_from_slice(xv.row(rows[0]));
                    am.fill(rows[0]);
                    for &ri in &rows[1..] {
                        for (j, v) in xv.row(ri).iter().enumerate() {
                            if *v > o[j] {
                                o[j] = *v;
                                am[j] = ri;
                            }
                        }
                    }
                }
                Reduce::Mean | Reduce::Sum => {
                    for &ri in rows {
                        for (oj, v) in o.iter_mut().zip(xv.row(ri)) {
                            *oj += *v;
                        }
                    }
                    if mode == Reduce::Mean {
                        let inv = T::one() / T::lit(rows.len() as f64);
                        o.iter_mut().for_each(|v| *v *= inv);
                    }
                }
            }
        }
        drop(nodes);
        Ok(self.push(
            Tensor::matrix(g, c, out)?,
            Op::Segment { x, seg, mode, argmax },
            &[x],
        ))
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var, op: &'static str) -> Result<()> {
        let nodes = self.nodes();
        if nodes[gamma.0].value.len() != c || nodes[beta.0].value.len() != c {
            return Err(shape_err(op, format!("affine parameters do not have {c} entries")));
        }
        Ok(())
    }

    /// Batch normalization with batch statistics. Also returns the batch
    /// mean and unbiased variance for running-statistic updates.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (r, c) = self.with_value(x, dims);
        self.check_affine(c, gamma, beta, "batch_norm")?;
        if r == 0 {
            return Err(shape_err("batch_norm", "empty batch"));
        }
        let nodes = self.nodes();
        let xv = nodes[x.0].value.data();
        let n = T::lit(r as f64);
        let mut mean = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (*v - *m) * (*v - *m);
            }
        }
        let biased: Vec<T> = var.iter().map(|s| *s / n).collect();
        let unbiased: Vec<T> = if r > 1 {
            var.iter().map(|s| *s / T::lit((r - 1) as f64)).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<T> = biased.iter().map(|v| T::one() / (*v + T::lit(eps)).sqrt()).collect();
        let xhat: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| (*v - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = affine(&xhat, c, nodes[gamma.0].value.data(), nodes[beta.0].value.data());
        drop(nodes);
        let v = self.push(
            Tensor::matrix(r, c, out)?,
            Op::Norm { x, gamma, beta, xhat, inv_std, kind: NormKind::BatchTrain },
            &[x, gamma, beta],
        );
        Ok((v, mean, unbiased))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (r, c) = self.with_value(x, dims);
        self.check_affine(c, gamma, beta, "batch_norm")?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", "running statistics width"));
        }
        let nodes = self.nodes();
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + T::lit(eps)).sqrt()).collect();
        let xhat: Vec<T> = nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (*v - mean[i % c]) * inv_std[i % c])
            .collect();
        let out = affine(&xhat, c, nodes[gamma.0].value.data(), nodes[beta.0].value.data());
        drop(nodes);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::Norm { x, gamma, beta, xhat, inv_std, kind: NormKind::BatchEval },
            &[x, gamma, beta],
        ))
    }

    /// Normalizes each row over its columns.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.with_value(x, dims);
        self.check_affine(c, gamma, beta, "layer_norm")?;
        let nodes = self.nodes();
        let xv = nodes[x.0].value.data();
        let n = T::lit(c as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(r);
        for row in xv.chunks(c.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::lit(eps)).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|v| (*v - mean) * inv));
        }
        let out = affine(&xhat, c, nodes[gamma.0].value.data(), nodes[beta.0].value.data());
        drop(nodes);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::Norm { x, gamma, beta, xhat, inv_std, kind: NormKind::Layer },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        let (r, c) = dims(xv);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        drop(nodes);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Softmax { x }, &[x]))
    }

    /// Multi-head scaled dot-product attention restricted to groups of rows.
    ///
    /// Each row of each window attends only to rows of the same window, so
    /// padding never enters the computation. Rows outside every window get
    /// a zero output.
    pub fn window_attention(&self, q: Var, k: Var, v: Var, windows: Arc<Segments>, heads: usize) -> Result<Var> {
        let nodes = self.nodes();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let (r, c) = dims(qv);
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err("attention", "q, k and v shapes differ"));
        }
        if heads == 0 || c % heads != 0 {
            return Err(shape_err("attention", format!("{c} channels over {heads} heads")));
        }
        if windows.max_index().is_some_and(|m| m >= r) {
            return Err(shape_err("attention", format!("window row out of {r}")));
        }
        let d = c / heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![T::zero(); r * c];
        let mut probs = Vec::new();
        let mut offsets = Vec::with_capacity(windows.len());
        for w in windows.iter() {
            offsets.push(probs.len());
            for h in 0..heads {
                let col = h * d;
                for &ri in w {
                    let qi = &qd[ri * c + col..ri * c + col + d];
                    let start = probs.len();
                    let mut mx = T::neg_infinity();
                    for &rj in w {
                        let s = dot(qi, &kd[rj * c + col..rj * c + col + d]) * scale;
                        mx = mx.max(s);
                        probs.push(s);
                    }
                    let p = &mut probs[start..];
                    let mut sum = T::zero();
                    for s in p.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let o = &mut out[ri * c + col..ri * c + col + d];
                    for (s, &rj) in p.iter_mut().zip(w) {
                        *s /= sum;
                        for (oc, vc) in o.iter_mut().zip(&vd[rj * c + col..rj * c + col + d]) {
                            *oc += *s * *vc;
                        }
                    }
                }
            }
        }
        drop(nodes);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::Attention { q, k, v, windows, heads, probs, offsets },
            &[q, k, v],
        ))
    }

    /// Mean softmax cross-entropy over rows whose label is not [`IGNORE_LABEL`].
    pub fn cross_entropy(&self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let nodes = self.nodes();
        let xv = &nodes[logits.0].value;
        let (r, c) = dims(xv);
        check_labels(r, c, &labels)?;
        let mut probs = xv.data().to_vec();
        let mut loss = T::zero();
        let mut count = 0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln();
            if labels[i] != IGNORE_LABEL {
                loss += lse - row[labels[i]];
                count += 1;
            }
            softmax_in_place(row);
        }
        if count > 0 {
            loss /= T::lit(count as f64);
        }
        drop(nodes);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { x: logits, labels, probs, count },
            &[logits],
        ))
    }

    /// Mean negative log of the probability assigned to each row's label.
    pub fn nll(&self, probs: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let nodes = self.nodes();
        let xv = &nodes[probs.0].value;
        let (r, c) = dims(xv);
        check_labels(r, c, &labels)?;
        let mut loss = T::zero();
        let mut count = 0;
        for (i, row) in xv.data().chunks(c).enumerate() {
            if labels[i] != IGNORE_LABEL {
                loss -= row[labels[i]].max(T::min_positive_value()).ln();
                count += 1;
            }
        }
        if count > 0 {
            loss /= T::lit(count as f64);
        }
        drop(nodes);
        Ok(self.push(Tensor::scalar(loss), Op::Nll { x: probs, labels, count }, &[probs]))
    }

    fn check_offsets(&self, x: Var, target: &[T], mask: &[bool], op: &'static str) -> Result<()> {
        let (r, c) = self.with_value(x, dims);
        if target.len() != r * c || mask.len() != r {
            return Err(shape_err(op, "target or mask size"));
        }
        Ok(())
    }

    /// Sum of absolute differences over masked rows, divided by the number
    /// of masked rows.
    pub fn offset_l1(&self, x: Var, target: Arc<Vec<T>>, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.check_offsets(x, &target, &mask, "offset_l1")?;
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        let c = xv.cols();
        let count = mask.iter().filter(|m| **m).count();
        let mut loss = T::zero();
        for (i, row) in xv.data().chunks(c.max(1)).enumerate() {
            if mask[i] {
                for (a, b) in row.iter().zip(&target[i * c..(i + 1) * c]) {
                    loss += (*a - *b).abs();
                }
            }
        }
        if count > 0 {
            loss /= T::lit(count as f64);
        }
        drop(nodes);
        Ok(self.push(Tensor::scalar(loss), Op::OffsetL1 { x, target, mask, count }, &[x]))
    }

    /// Negative mean cosine between predicted and target rows over masked
    /// rows. A zero-length vector on either side contributes zero.
    pub fn offset_direction(&self, x: Var, target: Arc<Vec<T>>, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.check_offsets(x, &target, &mask, "offset_direction")?;
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        let c = xv.cols();
        let count = mask.iter().filter(|m| **m).count();
        let mut loss = T::zero();
        for (i, row) in xv.data().chunks(c.max(1)).enumerate() {
            if mask[i] {
                let t = &target[i * c..(i + 1) * c];
                let (xn, tn) = (norm(row), norm(t));
                if xn > direction_floor() && tn > direction_floor() {
                    loss -= dot(row, t) / (xn * tn);
                }
            }
        }
        if count > 0 {
            loss /= T::lit(count as f64);
        }
        drop(nodes);
        Ok(self.push(Tensor::scalar(loss), Op::OffsetDir { x, target, mask, count }, &[x]))
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&self, x: Var, target: Arc<Vec<T>>) -> Result<Var> {
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        if target.len() != xv.len() {
            return Err(shape_err("bce", "target size"));
        }
        let mut loss = T::zero();
        for (z, t) in xv.data().iter().zip(target.iter()) {
            loss += z.max(T::zero()) - *z * *t + (T::one() + (-z.abs()).exp()).ln();
        }
        if !xv.is_empty() {
            loss /= T::lit(xv.len() as f64);
        }
        drop(nodes);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { x, target }, &[x]))
    }

    /// Sum of one-element nodes.
    pub fn sum_scalars(&self, parts: &[Var]) -> Result<Var> {
        let nodes = self.nodes();
        let mut total = T::zero();
        for p in parts {
            let v = &nodes[p.0].value;
            if v.len() != 1 {
                return Err(shape_err("sum_scalars", format!("{:?} is not a scalar", v.shape())));
            }
            total += v.item();
        }
        drop(nodes);
        Ok(self.push(Tensor::scalar(total), Op::Sum { parts: parts.to_vec() }, parts))
    }

    /// Elementwise op with a caller-supplied backward rule.
    pub fn custom(&self, x: Var, forward: impl Fn(&[T]) -> Vec<T>, backward: CustomBackward<T>) -> Result<Var> {
        let nodes = self.nodes();
        let xv = &nodes[x.0].value;
        let out = forward(xv.data());
        let shape = xv.shape().to_vec();
        drop(nodes);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Custom { x, backward }, &[x]))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", "loss is not a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaf nodes after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn direction_floor<T: Real>() -> T {
    T::lit(1e-12)
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn affine<T: Real>(xhat: &[T], c: usize, gamma: &[T], beta: &[T]) -> Vec<T> {
    xhat.iter()
        .enumerate()
        .map(|(i, v)| *v * gamma[i % c] + beta[i % c])
        .collect()
}

fn check_labels(rows: usize, cols: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(shape_err("labels", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| **l != IGNORE_LABEL && **l >= cols) {
        return Err(NnError::Config(format!("label {l} out of {cols} classes")));
    }
    Ok(())
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = dims(val(*a));
            let n = val(*b).cols();
            acc(grads, nodes, *a, |da| matmul_into(m, n, k, g, false, val(*b).data(), true, da, true));
            acc(grads, nodes, *b, |db| matmul_into(k, m, n, val(*a).data(), true, g, false, db, true));
        }
        Op::AddBias { x, bias } => {
            let c = val(*bias).len();
            acc(grads, nodes, *x, |dx| add_into(dx, g));
            acc(grads, nodes, *bias, |db| {
                for row in g.chunks(c.max(1)) {
                    add_into(db, row);
                }
            });
        }
        Op::Add { a, b } => {
            acc(grads, nodes, *a, |d| add_into(d, g));
            acc(grads, nodes, *b, |d| add_into(d, g));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(grads, nodes, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                    *d += *g * *y;
                }
            });
            acc(grads, nodes, *b, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                    *d += *g * *x;
                }
            });
        }
        Op::Scale { x, s } => acc(grads, nodes, *x, |d| {
            for (d, g) in d.iter_mut().zip(g) {
                *d += *g * *s;
            }
        }),
        Op::Relu { x } => acc(grads, nodes, *x, |d| {
            for ((d, g), v) in d.iter_mut().zip(g).zip(val(*x).data()) {
                if *v > T::zero() {
                    *d += *g;
                }
            }
        }),
        Op::Sigmoid { x: xv } => {
            let out = node.value.data();
            acc(grads, nodes, *xv, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += *g * *y * (T::one() - *y);
                }
            })
        }
        Op::Concat { parts } => {
            let total = node.value.cols();
            let mut start = 0;
            for p in parts {
                let w = val(*p).cols();
                acc(grads, nodes, *p, |d| {
                    for (dr, gr) in d.chunks_mut(w.max(1)).zip(g.chunks(total.max(1))) {
                        add_into(dr, &gr[start..start + w]);
                    }
                });
                start += w;
            }
        }
        Op::Gather { x, idx } => {
            let c = val(*x).cols();
            acc(grads, nodes, *x, |d| {
                for (i, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * c..(src + 1) * c], &g[i * c..(i + 1) * c]);
                }
            });
        }
        Op::Segment { x, seg, mode, argmax } => {
            let c = val(*x).cols();
            acc(grads, nodes, *x, |d| match mode {
                Reduce::Max => {
                    for (i, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            d[src * c + i % c] += g[i];
                        }
                    }
                }
                Reduce::Mean | Reduce::Sum => {
                    for (k, rows) in seg.iter().enumerate() {
                        let gk = &g[k * c..(k + 1) * c];
                        let w = if *mode == Reduce::Mean {
                            T::one() / T::lit(rows.len().max(1) as f64)
                        } else {
                            T::one()
                        };
                        for &ri in rows {
                            for (dv, gv) in d[ri * c..(ri + 1) * c].iter_mut().zip(gk) {
                                *dv += *gv * w;
                            }
                        }
                    }
                }
            });
        }
        Op::Norm { x, gamma, beta, xhat, inv_std, kind } => {
            let c = node.value.cols();
            let gam = val(*gamma).data();
            acc(grads, nodes, *gamma, |d| {
                for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    d[i % c] += *gv * *xh;
                }
            });
            acc(grads, nodes, *beta, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[i % c] += *gv;
                }
            });
            acc(grads, nodes, *x, |d| norm_backward(g, xhat, inv_std, gam, c, *kind, d));
        }
        Op::Softmax { x } => {
            let c = node.value.cols();
            acc(grads, nodes, *x, |d| {
                for ((dr, gr), pr) in d.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                    let s = dot(gr, pr);
                    for ((dv, gv), pv) in dr.iter_mut().zip(gr).zip(pr) {
                        *dv += *pv * (*gv - s);
                    }
                }
            });
        }
        Op::Attention { q, k, v, windows, heads, probs, offsets } => {
            let (r, c) = dims(&node.value);
            let d = c / heads;
            let scale = T::one() / T::lit(d as f64).sqrt();
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let mut dq = vec![T::zero(); r * c];
            let mut dk = vec![T::zero(); r * c];
            let mut dv = vec![T::zero(); r * c];
            let mut dp = Vec::new();
            for (wi, w) in windows.iter().enumerate() {
                let n = w.len();
                for h in 0..*heads {
                    let col = h * d;
                    for (i, &ri) in w.iter().enumerate() {
                        let base = offsets[wi] + (h * n + i) * n;
                        let p = &probs[base..base + n];
                        let go = &g[ri * c + col..ri * c + col + d];
                        dp.clear();
                        dp.extend(w.iter().map(|&rj| dot(go, &vd[rj * c + col..rj * c + col + d])));
                        let s = dot(p, &dp);
                        let qi = &qd[ri * c + col..ri * c + col + d];
                        for (j, &rj) in w.iter().enumerate() {
                            let ds = p[j] * (dp[j] - s) * scale;
                            let kj = &kd[rj * c + col..rj * c + col + d];
                            for t in 0..d {
                                dq[ri * c + col + t] += ds * kj[t];
                                dk[rj * c + col + t] += ds * qi[t];
                                dv[rj * c + col + t] += p[j] * go[t];
                            }
                        }
                    }
                }
            }
            acc(grads, nodes, *q, |x| add_into(x, &dq));
            acc(grads, nodes, *k, |x| add_into(x, &dk));
            acc(grads, nodes, *v, |x| add_into(x, &dv));
        }
        Op::CrossEntropy { x, labels, probs, count } => {
            if *count == 0 {
                return;
            }
            let c = val(*x).cols();
            let w = g[0] / T::lit(*count as f64);
            acc(grads, nodes, *x, |d| {
                for (i, (dr, pr)) in d.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    if labels[i] == IGNORE_LABEL {
                        continue;
                    }
                    for (j, (dv, pv)) in dr.iter_mut().zip(pr).enumerate() {
                        let y = if j == labels[i] { T::one() } else { T::zero() };
                        *dv += (*pv - y) * w;
                    }
                }
            });
        }
        Op::Nll { x, labels, count } => {
            if *count == 0 {
                return;
            }
            let c = val(*x).cols();
            let w = g[0] / T::lit(*count as f64);
            let pv = val(*x).data();
            acc(grads, nodes, *x, |d| {
                for (i, &l) in labels.iter().enumerate() {
                    let p = pv[i * c + l.min(c - 1)];
                    if l != IGNORE_LABEL && p > T::min_positive_value() {
                        d[i * c + l] -= w / p;
                    }
                }
            });
        }
        Op::OffsetL1 { x, target, mask, count } => {
            if *count == 0 {
                return;
            }
            let c = val(*x).cols();
            let w = g[0] / T::lit(*count as f64);
            let xv = val(*x).data();
            acc(grads, nodes, *x, |d| {
                for (i, m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in i * c..(i + 1) * c {
                        let diff = xv[j] - target[j];
                        if diff > T::zero() {
                            d[j] += w;
                        } else if diff < T::zero() {
                            d[j] -= w;
                        }
                    }
                }
            });
        }
        Op::OffsetDir { x, target, mask, count } => {
            if *count == 0 {
                return;
            }
            let c = val(*x).cols();
            let w = g[0] / T::lit(*count as f64);
            let xv = val(*x).data();
            acc(grads, nodes, *x, |d| {
                for (i, m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let xr = &xv[i * c..(i + 1) * c];
                    let tr = &target[i * c..(i + 1) * c];
                    let (xn, tn) = (norm(xr), norm(tr));
                    if xn <= direction_floor() || tn <= direction_floor() {
                        continue;
                    }
                    // d/dx of -(x . t)/(|x||t|) = -(t_hat - cos * x_hat) / |x|
                    let cos = dot(xr, tr) / (xn * tn);
                    for j in 0..c {
                        let grad = -(tr[j] / tn - cos * xr[j] / xn) / xn;
                        d[i * c + j] += grad * w;
                    }
                }
            });
        }
        Op::Bce { x, target } => {
            let xv = val(*x).data();
            if xv.is_empty() {
                return;
            }
            let w = g[0] / T::lit(xv.len() as f64);
            acc(grads, nodes, *x, |d| {
                for ((dv, z), t) in d.iter_mut().zip(xv).zip(target.iter()) {
                    *dv += (sigmoid(*z) - *t) * w;
                }
            });
        }
        Op::Sum { parts } => {
            for p in parts {
                acc(grads, nodes, *p, |d| d[0] += g[0]);
            }
        }
        Op::Custom { x, backward } => {
            let gi = backward(val(*x).data(), node.value.data(), g);
            acc(grads, nodes, *x, |d| add_into(d, &gi));
        }
    }
}

fn norm_backward<T: Real>(g: &[T], xhat: &[T], inv_std: &[T], gamma: &[T], c: usize, kind: NormKind, d: &mut [T]) {
    if c == 0 {
        return;
    }
    let rows = g.len() / c;
    match kind {
        NormKind::BatchEval => {
            for (i, (dv, gv)) in d.iter_mut().zip(g).enumerate() {
                *dv += *gv * gamma[i % c] * inv_std[i % c];
            }
        }
        NormKind::BatchTrain => {
            let n = T::lit(rows as f64);
            let mut mean_dxh = vec![T::zero(); c];
            let mut mean_dxh_xh = vec![T::zero(); c];
            for i in 0..g.len() {
                let dxh = g[i] * gamma[i % c];
                mean_dxh[i % c] += dxh;
                mean_dxh_xh[i % c] += dxh * xhat[i];
            }
            for j in 0..c {
                mean_dxh[j] /= n;
                mean_dxh_xh[j] /= n;
            }
            for i in 0..g.len() {
                let j = i % c;
                let dxh = g[i] * gamma[j];
                d[i] += inv_std[j] * (dxh - mean_dxh[j] - xhat[i] * mean_dxh_xh[j]);
            }
        }
        NormKind::Layer => {
            let n = T::lit(c as f64);
            for r in 0..rows {
                let range = r * c..(r + 1) * c;
                let (gr, xr) = (&g[range.clone()], &xhat[range.clone()]);
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..c {
                    let dxh = gr[j] * gamma[j];
                    m1 += dxh;
                    m2 += dxh * xr[j];
                }
                m1 /= n;
                m2 /= n;
                for j in 0..c {
                    d[r * c + j] += inv_std[r] * (gr[j] * gamma[j] - m1 - xr[j] * m2);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(t: &Tape<f64>, r: usize, c: usize, d: &[f64], grad: bool) -> Var {
        t.leaf(Tensor::matrix(r, c, d.to_vec()).unwrap(), grad)
    }

    #[test]
    fn softmax_example() {
        let t = Tape::<f64>::new();
        let x = mat(&t, 1, 2, &[0.0, 2f64.ln()], false);
        let p = t.softmax_rows(x).unwrap();
        let v = t.value(p);
        assert_abs_diff_eq!(v.data()[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.data()[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_max_routes_to_first_max() {
        let t = Tape::<f64>::new();
        let x = mat(&t, 3, 1, &[2.0, 2.0, 1.0], true);
        let seg = Arc::new(Segments::from_lists(&[vec![0, 1, 2], vec![]]));
        let y = t.segment_reduce(x, seg, Reduce::Max).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 0.0]);
        let s = t.sum_scalars(&[t.gather_rows(y, Arc::new(vec![0])).unwrap()]).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_values() {
        let t = Tape::<f64>::new();
        let a = mat(&t, 2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let b = mat(&t, 2, 1, &[1.0, -1.0], false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[-1.0, -1.0]);
        assert!(t.matmul(b, b).is_err());
    }

    #[test]
    fn layer_norm_example() {
        let t = Tape::<f64>::new();
        let x = mat(&t, 1, 2, &[1.0, 3.0], false);
        let g = t.constant(Tensor::filled(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        let v = t.value(y);
        assert_abs_diff_eq!(v.data()[0], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(v.data()[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn direction_loss_ignores_zero_vectors() {
        let t = Tape::<f64>::new();
        let x = mat(&t, 2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], true);
        let target = Arc::new(vec![2.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let l = t.offset_direction(x, target, Arc::new(vec![true, true])).unwrap();
        assert_abs_diff_eq!(t.item(l), -0.5, epsilon = 1e-12);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_skips_ignored_rows() {
        let t = Tape::<f64>::new();
        let x = mat(&t, 2, 2, &[0.0, 0.0, 5.0, -5.0], true);
        let l = t.cross_entropy(x, Arc::new(vec![0, IGNORE_LABEL])).unwrap();
        assert_abs_diff_eq!(t.item(l), 2f64.ln(), epsilon = 1e-12);
        let g = t.backward(l).unwrap();
        assert_eq!(&g.get(x).unwrap()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::<f64>::new();
        let a = mat(&t, 1, 1, &[2.0], true);
        let b = mat(&t, 1, 1, &[3.0], false);
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0]);
        assert!(g.get(b).is_none());
    }
}
