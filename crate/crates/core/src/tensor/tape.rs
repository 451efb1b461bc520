use std::cell::{Cell, Ref, RefCell};

use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sin(Var),
    Abs(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    AddScaledRow(Var, Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of tensor operations supporting one reverse pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the reverse pass walks it backwards.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_sorted_segments(ids: &[usize], n_segments: usize, rows: usize) -> Result<()> {
    if ids.len() != rows {
        return Err(Error::Shape(format!(
            "{} segment ids for {rows} rows",
            ids.len()
        )));
    }
    if ids.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Shape("segment ids must be sorted ascending".into()));
    }
    if let Some(&last) = ids.last() {
        if last >= n_segments {
            return Err(Error::Shape(format!(
                "segment id {last} out of range for {n_segments} segments"
            )));
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Records a trainable input whose gradient is wanted.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that needs no gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            va.matmul(&vb)?
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = {
            let mut v = self.value(a).clone();
            v.add_assign(&self.value(b));
            v
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = {
            let mut v = self.value(a).clone();
            for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
                *x -= y;
            }
            v
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    /// Adds a `1 x c` row vector to every row of an `n x c` matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let ((_, c), sb) = (self.shape(a), self.shape(bias));
        if sb != (1, c) {
            return Err(Error::Shape(format!("add_row: bias {sb:?} for width {c}")));
        }
        let value = {
            let mut v = self.value(a).clone();
            let b = self.value(bias);
            for r in 0..v.rows() {
                for (x, y) in v.row_mut(r).iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            v
        };
        let tracked = self.tracked(a) || self.tracked(bias);
        Ok(self.push(value, Op::AddRow(a, bias), tracked))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = {
            let mut v = self.value(a).clone();
            for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
                *x *= y;
            }
            v
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Scales row `i` of `a` by `s[i]`, where `s` is an `n x 1` column.
    pub fn mul_col(&self, a: Var, s: Var) -> Result<Var> {
        let ((n, _), ss) = (self.shape(a), self.shape(s));
        if ss != (n, 1) {
            return Err(Error::Shape(format!("mul_col: scale {ss:?} for {n} rows")));
        }
        let value = {
            let mut v = self.value(a).clone();
            let sv = self.value(s);
            for r in 0..n {
                let k = sv.data()[r];
                v.row_mut(r).iter_mut().for_each(|x| *x *= k);
            }
            v
        };
        let tracked = self.tracked(a) || self.tracked(s);
        Ok(self.push(value, Op::MulCol(a, s), tracked))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_cols of nothing".into()));
        };
        let rows = self.shape(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::Shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(v.row(r));
            }
            offset += w;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start > end || end > cols {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {cols}")));
        }
        let mut out = Tensor::zeros(rows, end - start);
        {
            let v = self.value(a);
            for r in 0..rows {
                out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::SliceCols(a, start), tracked))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather_rows index {bad} of {rows}")));
        }
        let mut out = Tensor::zeros(indices.len(), cols);
        {
            let v = self.value(a);
            for (r, &i) in indices.iter().enumerate() {
                out.row_mut(r).copy_from_slice(v.row(i));
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), tracked))
    }

    /// Sums rows of `a` into `n_segments` output rows by sorted segment id.
    pub fn segment_sum(&self, a: Var, segment_ids: &[usize], n_segments: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        check_sorted_segments(segment_ids, n_segments, rows)?;
        let mut out = Tensor::zeros(n_segments, cols);
        {
            let v = self.value(a);
            for (r, &s) in segment_ids.iter().enumerate() {
                for (o, x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::SegmentSum(a, segment_ids.to_vec()), tracked))
    }

    /// Per-segment mean; empty segments yield zero rows.
    pub fn segment_mean(&self, a: Var, segment_ids: &[usize], n_segments: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        check_sorted_segments(segment_ids, n_segments, rows)?;
        let mut counts = vec![0usize; n_segments];
        for &s in segment_ids {
            counts[s] += 1;
        }
        let mut out = Tensor::zeros(n_segments, cols);
        {
            let v = self.value(a);
            for (r, &s) in segment_ids.iter().enumerate() {
                for (o, x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = c as f64;
                out.row_mut(s).iter_mut().for_each(|x| *x /= inv);
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            out,
            Op::SegmentMean(a, segment_ids.to_vec(), counts),
            tracked,
        ))
    }

    /// Softmax over rows sharing a segment id, independently per column.
    pub fn segment_softmax(&self, a: Var, segment_ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        let n_segments = segment_ids.last().map_or(0, |&s| s + 1);
        check_sorted_segments(segment_ids, n_segments, rows)?;
        let mut out = self.value(a).clone();
        for (start, end) in segment_ranges(segment_ids) {
            for c in 0..cols {
                let mut max = f64::NEG_INFINITY;
                for r in start..end {
                    max = max.max(out.get(r, c));
                }
                let mut total = 0.0;
                for r in start..end {
                    let e = (out.get(r, c) - max).exp();
                    out.set(r, c, e);
                    total += e;
                }
                for r in start..end {
                    out.set(r, c, out.get(r, c) / total);
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::SegmentSoftmax(a, segment_ids.to_vec()), tracked))
    }

    /// Sums each row into an `n x 1` column.
    pub fn row_sum(&self, a: Var) -> Var {
        let out = {
            let v = self.value(a);
            Tensor::column((0..v.rows()).map(|r| v.row(r).iter().sum()).collect())
        };
        let tracked = self.tracked(a);
        self.push(out, Op::RowSum(a), tracked)
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let tracked = self.tracked(a);
        self.push(out, Op::Sum(a), tracked)
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = {
            let v = self.value(a);
            let n = v.data().len().max(1) as f64;
            Tensor::scalar(v.data().iter().sum::<f64>() / n)
        };
        let tracked = self.tracked(a);
        self.push(out, Op::Mean(a), tracked)
    }

    /// `m + alpha * r` with `alpha` a `1 x 1` gate and `r` a `1 x c` row
    /// broadcast over the rows of `m`. A gate of exactly zero returns `m`'s
    /// values bit for bit while still giving `alpha` its gradient.
    pub fn add_scaled_row(&self, m: Var, alpha: Var, r: Var) -> Result<Var> {
        let ((_, c), sa, sr) = (self.shape(m), self.shape(alpha), self.shape(r));
        if sa != (1, 1) || sr != (1, c) {
            return Err(Error::Shape(format!(
                "add_scaled_row: gate {sa:?}, row {sr:?}, width {c}"
            )));
        }
        let value = {
            let mut v = self.value(m).clone();
            let a = self.value(alpha).item();
            if a != 0.0 {
                let rv = self.value(r);
                for i in 0..v.rows() {
                    for (x, y) in v.row_mut(i).iter_mut().zip(rv.data()) {
                        *x += a * y;
                    }
                }
            }
            v
        };
        let tracked = self.tracked(m) || self.tracked(alpha) || self.tracked(r);
        Ok(self.push(value, Op::AddScaledRow(m, alpha, r), tracked))
    }

    /// Runs the reverse pass from a `1 x 1` output. A tape supports one pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from a {:?} tensor",
                out.shape()
            )));
        }
        if let Some(bad) = nodes.iter().position(|n| !n.value.is_finite()) {
            return Err(Error::NonFinite(format!("tape node {bad}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |v: Var, delta: Tensor| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].tracked {
                        let mut ga = Tensor::zeros(va.rows(), va.cols());
                        matmul_into(&g, &vb.transpose(), &mut ga);
                        acc(*a, ga);
                    }
                    if nodes[b.0].tracked {
                        let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                        matmul_into(&va.transpose(), &g, &mut gb);
                        acc(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*a, g.clone());
                    acc(*bias, gb);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, zip_map(&g, vb, |x, y| x * y));
                    acc(*b, zip_map(&g, va, |x, y| x * y));
                }
                Op::MulCol(a, s) => {
                    let (va, vs) = (val(*a), val(*s));
                    let mut ga = g.clone();
                    let mut gs = Tensor::zeros(vs.rows(), 1);
                    for r in 0..g.rows() {
                        let k = vs.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= k);
                        gs.data_mut()[r] =
                            g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum();
                    }
                    acc(*a, ga);
                    acc(*s, gs);
                }
                Op::Relu(a) => {
                    acc(*a, zip_map(&g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }))
                }
                Op::Sigmoid(a) => acc(*a, zip_map(&g, &node.value, |x, y| x * y * (1.0 - y))),
                Op::Log(a) => acc(*a, zip_map(&g, val(*a), |x, y| x / y)),
                Op::Sin(a) => acc(*a, zip_map(&g, val(*a), |x, y| x * y.cos())),
                Op::Abs(a) => acc(*a, zip_map(&g, val(*a), |x, y| x * sign(y))),
                Op::Softplus(a) => acc(*a, zip_map(&g, val(*a), |x, y| x * sigmoid(y))),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(*p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = val(*a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let va = val(*a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*a, ga);
                }
                Op::SegmentSum(a, seg) => {
                    let va = val(*a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        ga.row_mut(r).copy_from_slice(g.row(s));
                    }
                    acc(*a, ga);
                }
                Op::SegmentMean(a, seg, counts) => {
                    let va = val(*a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = counts[s] as f64;
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o = x / inv;
                        }
                    }
                    acc(*a, ga);
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for (start, end) in segment_ranges(seg) {
                        for c in 0..y.cols() {
                            let dot: f64 = (start..end).map(|r| g.get(r, c) * y.get(r, c)).sum();
                            for r in start..end {
                                ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                            }
                        }
                    }
                    acc(*a, ga);
                }
                Op::RowSum(a) => {
                    let va = val(*a);
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let k = g.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x = k);
                    }
                    acc(*a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::full(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = (r * c).max(1) as f64;
                    acc(*a, Tensor::full(r, c, g.item() / n));
                }
                Op::AddScaledRow(m, alpha, r) => {
                    let (gate, vr) = (val(*alpha).item(), val(*r));
                    let mut col = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in col.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    let galpha: f64 = col.data().iter().zip(vr.data()).map(|(x, y)| x * y).sum();
                    acc(*m, g.clone());
                    acc(*alpha, Tensor::scalar(galpha));
                    acc(*r, col.map(|x| x * gate));
                }
            }
            grads[id] = if matches!(node.op, Op::Leaf) { Some(g) } else { None };
        }
        Ok(Gradients { grads })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Contiguous `[start, end)` row ranges of equal ids in a sorted id list.
pub(crate) fn segment_ranges(ids: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=ids.len() {
        if i == ids.len() || ids[i] != ids[start] {
            out.push((start, i));
            start = i;
        }
    }
    out
}
