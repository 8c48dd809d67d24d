use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Relu,
    Abs,
    Exp,
    Ln,
    ScaledSigmoid,
    Dense,
    ConvRowwise,
    Softmax,
    Sum,
    Mean,
    StdDev,
    Min,
    Max,
    Product,
    SumRows,
    ScaleRows,
    ConcatCols,
    FlattenSamples,
    ShiftRows,
    Select,
}

impl OpTag {
    pub fn name(self) -> &'static str {
        match self {
            OpTag::Leaf => "leaf",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Div => "div",
            OpTag::Neg => "neg",
            OpTag::Scale => "scale",
            OpTag::Relu => "relu",
            OpTag::Abs => "abs",
            OpTag::Exp => "exp",
            OpTag::Ln => "ln",
            OpTag::ScaledSigmoid => "scaled_sigmoid",
            OpTag::Dense => "dense",
            OpTag::ConvRowwise => "conv_rowwise",
            OpTag::Softmax => "softmax",
            OpTag::Sum => "sum",
            OpTag::Mean => "mean",
            OpTag::StdDev => "std_dev",
            OpTag::Min => "min",
            OpTag::Max => "max",
            OpTag::Product => "product",
            OpTag::SumRows => "sum_rows",
            OpTag::ScaleRows => "scale_rows",
            OpTag::ConcatCols => "concat_cols",
            OpTag::FlattenSamples => "flatten_samples",
            OpTag::ShiftRows => "shift_rows",
            OpTag::Select => "select",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_TAGS.iter().copied().find(|t| t.name() == name)
    }
}

const ALL_TAGS: [OpTag; 27] = [
    OpTag::Leaf,
    OpTag::Add,
    OpTag::Sub,
    OpTag::Mul,
    OpTag::Div,
    OpTag::Neg,
    OpTag::Scale,
    OpTag::Relu,
    OpTag::Abs,
    OpTag::Exp,
    OpTag::Ln,
    OpTag::ScaledSigmoid,
    OpTag::Dense,
    OpTag::ConvRowwise,
    OpTag::Softmax,
    OpTag::Sum,
    OpTag::Mean,
    OpTag::StdDev,
    OpTag::Min,
    OpTag::Max,
    OpTag::Product,
    OpTag::SumRows,
    OpTag::ScaleRows,
    OpTag::ConcatCols,
    OpTag::FlattenSamples,
    OpTag::ShiftRows,
    OpTag::Select,
];

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Neg,
    Abs,
    Exp,
    Ln,
    Scale(T),
}

/// Reductions to a one-element node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Population standard deviation (divides by `n`).
    StdDev,
    Sum,
    Min,
    Max,
    Product,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    Relu,
    Abs,
    Exp,
    Ln,
    ScaledSigmoid(T),
    Dense,
    ConvRowwise,
    Softmax,
    Sum,
    Mean,
    StdDev,
    Min(usize),
    Max(usize),
    Product,
    SumRows,
    ScaleRows,
    ConcatCols,
    FlattenSamples { batch: usize },
    ShiftRows(usize),
    Select(Vec<usize>),
}

impl<T> Op<T> {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Add => OpTag::Add,
            Op::Sub => OpTag::Sub,
            Op::Mul => OpTag::Mul,
            Op::Div => OpTag::Div,
            Op::Neg => OpTag::Neg,
            Op::Scale(_) => OpTag::Scale,
            Op::Relu => OpTag::Relu,
            Op::Abs => OpTag::Abs,
            Op::Exp => OpTag::Exp,
            Op::Ln => OpTag::Ln,
            Op::ScaledSigmoid(_) => OpTag::ScaledSigmoid,
            Op::Dense => OpTag::Dense,
            Op::ConvRowwise => OpTag::ConvRowwise,
            Op::Softmax => OpTag::Softmax,
            Op::Sum => OpTag::Sum,
            Op::Mean => OpTag::Mean,
            Op::StdDev => OpTag::StdDev,
            Op::Min(_) => OpTag::Min,
            Op::Max(_) => OpTag::Max,
            Op::Product => OpTag::Product,
            Op::SumRows => OpTag::SumRows,
            Op::ScaleRows => OpTag::ScaleRows,
            Op::ConcatCols => OpTag::ConcatCols,
            Op::FlattenSamples { .. } => OpTag::FlattenSamples,
            Op::ShiftRows(_) => OpTag::ShiftRows,
            Op::Select(_) => OpTag::Select,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    grad: Tensor<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of a scalar loss with respect to the named parameter leaves,
/// in creation order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Euclidean norm over every entry of every gradient.
    pub fn norm(&self) -> T {
        self.entries
            .iter()
            .map(|(_, g)| g.sum_squares())
            .sum::<T>()
            .sqrt()
    }
}

/// Append-only record of a computation; creation order is a topological order.
///
/// A tape is single-threaded. Values are computed eagerly as nodes are
/// appended, so intermediate results can be inspected before `backward`.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    fault: Option<OpTag>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_scalar(a: &[usize], b: &[usize]) -> bool {
    a == b || a.iter().product::<usize>() == 1 || b.iter().product::<usize>() == 1
}

/// Views a rank-1 tensor as a single row.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (0, 0),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Flips the sign of one backward rule. Used to confirm that the
    /// gradient checks catch a broken derivative.
    pub fn inject_fault(&mut self, tag: OpTag) {
        self.fault = Some(tag);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].grad
    }

    pub fn op_tag(&self, id: NodeId) -> OpTag {
        self.nodes[id.0].op.tag()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad,
            requires_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            bail!(Contract, "node {} is not on this tape", id.0);
        }
        Ok(())
    }

    /// A detached input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// A named trainable leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, Vec::new(), value);
        let node = &mut self.nodes[id.0];
        node.requires_grad = true;
        node.name = Some(name.into());
        id
    }

    /// Dispatches to the elementwise operations; `b` is required for the
    /// binary kinds and ignored otherwise.
    pub fn elementwise(
        &mut self,
        kind: Elementwise<T>,
        a: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId> {
        let need = || Error::Contract(format!("{kind:?} needs a second operand"));
        match kind {
            Elementwise::Add => self.add(a, b.ok_or_else(need)?),
            Elementwise::Sub => self.sub(a, b.ok_or_else(need)?),
            Elementwise::Mul => self.mul(a, b.ok_or_else(need)?),
            Elementwise::Div => self.div(a, b.ok_or_else(need)?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Neg => self.neg(a),
            Elementwise::Abs => self.abs(a),
            Elementwise::Exp => self.exp(a),
            Elementwise::Ln => self.ln(a),
            Elementwise::Scale(c) => self.scale(a, c),
        }
    }

    fn binary(
        &mut self,
        op: Op<T>,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !same_or_scalar(va.shape(), vb.shape()) {
            bail!(
                Shape,
                "{} of {:?} and {:?}: shapes must match or one side must be a scalar",
                op.tag().name(),
                va.shape(),
                vb.shape()
            );
        }
        let out = if va.len() >= vb.len() && (va.len() > 1 || vb.len() == 1) {
            let mut out = va.clone();
            if vb.len() == 1 {
                let s = vb.item();
                out.data_mut().iter_mut().for_each(|x| *x = f(*x, s));
            } else {
                out.data_mut()
                    .iter_mut()
                    .zip(vb.data())
                    .for_each(|(x, &y)| *x = f(*x, y));
            }
            out
        } else {
            let s = va.item();
            vb.map(|y| f(s, y))
        };
        Ok(self.push(op, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op<T>, a: NodeId, f: impl Fn(T) -> T) -> Result<NodeId> {
        self.check(a)?;
        let out = self.nodes[a.0].value.map(f);
        Ok(self.push(op, vec![a], out))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Abs, a, |x| x.abs())
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if self.nodes[a.0].value.data().iter().any(|&x| x <= T::zero()) {
            bail!(Domain, "ln of a non-positive value");
        }
        self.unary(Op::Ln, a, |x| x.ln())
    }

    /// `cap · sigmoid(x)`, elementwise; strictly inside `(0, cap)` for finite input.
    pub fn scaled_sigmoid(&mut self, a: NodeId, cap: T) -> Result<NodeId> {
        if !(cap > T::zero()) {
            bail!(Config, "leverage cap must be positive, got {cap}");
        }
        self.unary(Op::ScaledSigmoid(cap), a, |x| cap * sigmoid(x))
    }

    /// Affine map `x·W + b` for `x` of shape `[n]` or `[batch × n]`.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        for id in [input, weights, bias] {
            self.check(id)?;
        }
        let (x, w, b) = (
            &self.nodes[input.0].value,
            &self.nodes[weights.0].value,
            &self.nodes[bias.0].value,
        );
        if w.shape().len() != 2 || b.shape().len() != 1 || x.shape().len() > 2 {
            bail!(
                Shape,
                "dense expects input [n] or [b×n], weights [n×m], bias [m]; got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            );
        }
        let (n, m) = (w.shape()[0], w.shape()[1]);
        let (batch, xn) = as_matrix(x.shape());
        if xn != n || b.len() != m {
            bail!(
                Shape,
                "dense dimension mismatch: input {:?}, weights {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            );
        }
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = Vec::with_capacity(batch * m);
        for i in 0..batch {
            out.extend_from_slice(bd);
            let row = &mut out[i * m..(i + 1) * m];
            for (k, &xk) in xd[i * n..(i + 1) * n].iter().enumerate() {
                if xk == T::zero() {
                    continue;
                }
                for (o, &wkj) in row.iter_mut().zip(&wd[k * m..(k + 1) * m]) {
                    *o += xk * wkj;
                }
            }
        }
        let shape: Vec<usize> = if x.shape().len() == 1 {
            vec![m]
        } else {
            vec![batch, m]
        };
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(Op::Dense, vec![input, weights, bias], out))
    }

    /// Row-wise 1-D convolution: each filter slides along the columns of
    /// every row independently (kernel height 1, stride 1, no padding).
    ///
    /// `input` is `[rows × cols]`, `kernels` is `[filters × 1 × k]`, `bias`
    /// is `[filters]`; the result is `[filters × rows × (cols − k + 1)]`.
    pub fn conv_rowwise(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        for id in [input, kernels, bias] {
            self.check(id)?;
        }
        let (x, kern, b) = (
            &self.nodes[input.0].value,
            &self.nodes[kernels.0].value,
            &self.nodes[bias.0].value,
        );
        let ks = kern.shape();
        let (filters, k) = match ks {
            [f, 1, k] | [f, k] => (*f, *k),
            _ => bail!(Shape, "kernels must be [filters × 1 × k], got {ks:?}"),
        };
        if x.shape().len() != 2 {
            bail!(Shape, "conv input must be [rows × cols], got {:?}", x.shape());
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if k == 0 || k > cols {
            bail!(Shape, "kernel width {k} exceeds {cols} input columns");
        }
        if b.len() != filters {
            bail!(Shape, "bias has {} entries for {filters} filters", b.len());
        }
        let width = cols - k + 1;
        let (xd, kd, bd) = (x.data(), kern.data(), b.data());
        let mut out = vec![T::zero(); filters * rows * width];
        for f in 0..filters {
            let kf = &kd[f * k..(f + 1) * k];
            for r in 0..rows {
                let xr = &xd[r * cols..(r + 1) * cols];
                let o = &mut out[(f * rows + r) * width..(f * rows + r + 1) * width];
                for (p, slot) in o.iter_mut().enumerate() {
                    let mut acc = bd[f];
                    for (j, &kj) in kf.iter().enumerate() {
                        acc += kj * xr[p + j];
                    }
                    *slot = acc;
                }
            }
        }
        let out = Tensor::from_vec(&[filters, rows, width], out)?;
        Ok(self.push(Op::ConvRowwise, vec![input, kernels, bias], out))
    }

    /// Softmax over the last axis of a `[l]` or `[batch × l]` node,
    /// stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        if x.shape().len() > 2 {
            bail!(Shape, "softmax expects rank 1 or 2, got {:?}", x.shape());
        }
        if !x.is_finite() {
            bail!(Numeric, "softmax input is not finite");
        }
        let (rows, cols) = as_matrix(x.shape());
        let mut out = x.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(Op::Softmax, vec![input], out))
    }

    /// Full reduction to a one-element node.
    pub fn reduce(&mut self, kind: Reduction, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.nodes[input.0].value.data();
        let n = x.len();
        if n == 0 {
            bail!(Domain, "{kind:?} of an empty input");
        }
        let nf = T::from_usize(n).expect("length fits scalar");
        let (op, v) = match kind {
            Reduction::Sum => (Op::Sum, x.iter().copied().sum()),
            Reduction::Mean => (Op::Mean, x.iter().copied().sum::<T>() / nf),
            Reduction::StdDev => {
                if n < 2 {
                    bail!(Domain, "std_dev needs at least two values, got {n}");
                }
                (Op::StdDev, population_std(x))
            }
            Reduction::Min => {
                let idx = arg_first(x, |a, b| a < b);
                (Op::Min(idx), x[idx])
            }
            Reduction::Max => {
                let idx = arg_first(x, |a, b| a > b);
                (Op::Max(idx), x[idx])
            }
            Reduction::Product => (Op::Product, x.iter().fold(T::one(), |acc, &v| acc * v)),
        };
        Ok(self.push(op, vec![input], Tensor::scalar(v)))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.reduce(Reduction::Sum, input)
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        self.reduce(Reduction::Mean, input)
    }

    pub fn std_dev(&mut self, input: NodeId) -> Result<NodeId> {
        self.reduce(Reduction::StdDev, input)
    }

    /// `[r × c] → [r]` row sums.
    pub fn sum_rows(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        if x.shape().len() != 2 {
            bail!(Shape, "sum_rows expects a matrix, got {:?}", x.shape());
        }
        let out: Vec<T> = (0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect();
        Ok(self.push(Op::SumRows, vec![input], Tensor::vector(out)))
    }

    /// Multiplies row `i` of `[r × c]` by entry `i` of a `[r]` or `[r × 1]` node.
    pub fn scale_rows(&mut self, input: NodeId, scales: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(scales)?;
        let (x, s) = (&self.nodes[input.0].value, &self.nodes[scales.0].value);
        if x.shape().len() != 2 || s.len() != x.rows() {
            bail!(
                Shape,
                "scale_rows of {:?} by {:?}: need one scale per row",
                x.shape(),
                s.shape()
            );
        }
        let cols = x.cols();
        let mut out = x.clone();
        for (r, &sr) in s.data().iter().enumerate() {
            out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v *= sr);
        }
        Ok(self.push(Op::ScaleRows, vec![input, scales], out))
    }

    /// Side-by-side concatenation of two nodes with the same row count.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rank = va.shape().len();
        if rank > 2 || vb.shape().len() != rank {
            bail!(Shape, "concat_cols of {:?} and {:?}", va.shape(), vb.shape());
        }
        let (ra, ca) = as_matrix(va.shape());
        let (rb, cb) = as_matrix(vb.shape());
        if ra != rb {
            bail!(Shape, "concat_cols row mismatch: {ra} vs {rb}");
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let shape = if rank == 1 {
            vec![ca + cb]
        } else {
            vec![ra, ca + cb]
        };
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(Op::ConcatCols, vec![a, b], out))
    }

    /// Regroups a convolution output computed over `batch` stacked samples.
    ///
    /// `[filters × (batch·rows) × width] → [batch × (filters·rows·width)]`,
    /// each sample's features ordered as the row-major flattening of its own
    /// `[filters × rows × width]` block.
    pub fn flatten_samples(&mut self, input: NodeId, batch: usize) -> Result<NodeId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        let (f, br, w) = match x.shape() {
            [f, br, w] => (*f, *br, *w),
            s => bail!(Shape, "flatten_samples expects rank 3, got {s:?}"),
        };
        if batch == 0 || br % batch != 0 {
            bail!(Shape, "{br} stacked rows do not split into {batch} samples");
        }
        let rows = br / batch;
        let per = f * rows * w;
        let mut out = vec![T::zero(); batch * per];
        let xd = x.data();
        for fi in 0..f {
            for s in 0..batch {
                for r in 0..rows {
                    let src = (fi * br + s * rows + r) * w;
                    let dst = s * per + (fi * rows + r) * w;
                    out[dst..dst + w].copy_from_slice(&xd[src..src + w]);
                }
            }
        }
        let out = Tensor::from_vec(&[batch, per], out)?;
        Ok(self.push(Op::FlattenSamples { batch }, vec![input], out))
    }

    /// Moves rows down by `k`, filling the first `k` rows with zeros.
    pub fn shift_rows(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        if x.shape().len() > 2 {
            bail!(Shape, "shift_rows expects rank 1 or 2, got {:?}", x.shape());
        }
        let width = if x.shape().len() == 2 { x.cols() } else { 1 };
        let rows = x.shape()[0];
        let mut out = Tensor::zeros(x.shape());
        if k < rows {
            out.data_mut()[k * width..].copy_from_slice(&x.data()[..(rows - k) * width]);
        }
        Ok(self.push(Op::ShiftRows(k), vec![input], out))
    }

    /// Gathers the given flat indices into a `[k]` node.
    pub fn select(&mut self, input: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        if indices.is_empty() {
            bail!(Domain, "select with no indices");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            bail!(Shape, "select index {bad} out of bounds for {:?}", x.shape());
        }
        let out = Tensor::vector(indices.iter().map(|&i| x.data()[i]).collect());
        Ok(self.push(Op::Select(indices), vec![input], out))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(T::zero());
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a one-element `loss`; returns the gradient of every
    /// named parameter leaf. A second call without [`Tape::zero_grad`] is
    /// rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.backward_done {
            bail!(Contract, "backward already ran on this tape; call zero_grad first");
        }
        if self.nodes[loss.0].value.len() != 1 {
            bail!(
                Contract,
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            );
        }
        self.backward_done = true;
        self.nodes[loss.0].grad.data_mut()[0] = T::one();
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let sign = if self.fault == Some(node.op.tag()) {
                -T::one()
            } else {
                T::one()
            };
            backprop(node, before, sign);
        }
        Ok(Gradients {
            entries: self
                .nodes
                .iter()
                .filter_map(|n| n.name.as_ref().map(|name| (name.clone(), n.grad.clone())))
                .collect(),
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn population_std<T: Scalar>(x: &[T]) -> T {
    let n = T::from_usize(x.len()).expect("length fits scalar");
    let mean = x.iter().copied().sum::<T>() / n;
    (x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n).sqrt()
}

fn arg_first<T: Scalar>(x: &[T], better: impl Fn(T, T) -> bool) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if better(v, x[best]) {
            best = i;
        }
    }
    best
}

/// Adds `g` into an input gradient, summing when the input was broadcast.
fn accumulate<T: Scalar>(target: &mut Tensor<T>, g: impl Iterator<Item = T>) {
    if target.len() == 1 {
        let s: T = g.sum();
        target.data_mut()[0] += s;
    } else {
        target.data_mut().iter_mut().zip(g).for_each(|(t, v)| *t += v);
    }
}

/// Reads element `i` of a possibly broadcast operand.
#[inline]
fn bcast<T: Scalar>(t: &Tensor<T>, i: usize) -> T {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn backprop<T: Scalar>(node: &Node<T>, before: &mut [Node<T>], sign: T) {
    let g: Vec<T> = node.grad.data().iter().map(|&v| v * sign).collect();
    let y = &node.value;
    let inp = &node.inputs;
    // Values of the inputs are cloned only where the rule needs them.
    let val = |before: &[Node<T>], k: usize| before[inp[k].0].value.clone();
    macro_rules! want {
        ($k:expr) => {
            before[inp[$k].0].requires_grad
        };
    }
    macro_rules! grad_of {
        ($k:expr) => {
            &mut before[inp[$k].0].grad
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::Add | Op::Sub => {
            let neg = matches!(node.op, Op::Sub);
            if want!(0) {
                accumulate(grad_of!(0), g.iter().copied());
            }
            if want!(1) {
                accumulate(grad_of!(1), g.iter().map(|&v| if neg { -v } else { v }));
            }
        }
        Op::Mul => {
            let (a, b) = (val(before, 0), val(before, 1));
            if want!(0) {
                accumulate(grad_of!(0), g.iter().enumerate().map(|(i, &v)| v * bcast(&b, i)));
            }
            if want!(1) {
                accumulate(grad_of!(1), g.iter().enumerate().map(|(i, &v)| v * bcast(&a, i)));
            }
        }
        Op::Div => {
            let (a, b) = (val(before, 0), val(before, 1));
            if want!(0) {
                accumulate(grad_of!(0), g.iter().enumerate().map(|(i, &v)| v / bcast(&b, i)));
            }
            if want!(1) {
                accumulate(
                    grad_of!(1),
                    g.iter().enumerate().map(|(i, &v)| {
                        let bi = bcast(&b, i);
                        -v * bcast(&a, i) / (bi * bi)
                    }),
                );
            }
        }
        Op::Neg => accumulate(grad_of!(0), g.iter().map(|&v| -v)),
        Op::Scale(c) => accumulate(grad_of!(0), g.iter().map(|&v| v * *c)),
        Op::Relu => {
            let x = val(before, 0);
            accumulate(
                grad_of!(0),
                g.iter()
                    .zip(x.data())
                    .map(|(&v, &xi)| if xi > T::zero() { v } else { T::zero() }),
            );
        }
        Op::Abs => {
            let x = val(before, 0);
            accumulate(
                grad_of!(0),
                g.iter().zip(x.data()).map(|(&v, &xi)| {
                    if xi > T::zero() {
                        v
                    } else if xi < T::zero() {
                        -v
                    } else {
                        T::zero()
                    }
                }),
            );
        }
        Op::Exp => accumulate(grad_of!(0), g.iter().zip(y.data()).map(|(&v, &yi)| v * yi)),
        Op::Ln => {
            let x = val(before, 0);
            accumulate(grad_of!(0), g.iter().zip(x.data()).map(|(&v, &xi)| v / xi));
        }
        Op::ScaledSigmoid(cap) => accumulate(
            grad_of!(0),
            g.iter()
                .zip(y.data())
                .map(|(&v, &yi)| v * yi * (T::one() - yi / *cap)),
        ),
        Op::Dense => {
            let (x, w) = (val(before, 0), val(before, 1));
            let (n, m) = (w.shape()[0], w.shape()[1]);
            let batch = x.len() / n;
            if want!(0) {
                let gx = grad_of!(0).data_mut();
                for i in 0..batch {
                    let gi = &g[i * m..(i + 1) * m];
                    for k in 0..n {
                        let wk = &w.data()[k * m..(k + 1) * m];
                        gx[i * n + k] += gi.iter().zip(wk).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            if want!(1) {
                let gw = grad_of!(1).data_mut();
                for i in 0..batch {
                    let gi = &g[i * m..(i + 1) * m];
                    for k in 0..n {
                        let xik = x.data()[i * n + k];
                        if xik == T::zero() {
                            continue;
                        }
                        for (t, &v) in gw[k * m..(k + 1) * m].iter_mut().zip(gi) {
                            *t += xik * v;
                        }
                    }
                }
            }
            if want!(2) {
                let gb = grad_of!(2).data_mut();
                for i in 0..batch {
                    for (t, &v) in gb.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                        *t += v;
                    }
                }
            }
        }
        Op::ConvRowwise => {
            let (x, kern) = (val(before, 0), val(before, 1));
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let filters = y.shape()[0];
            let width = y.shape()[2];
            let k = cols - width + 1;
            if want!(0) {
                let gx = grad_of!(0).data_mut();
                for f in 0..filters {
                    let kf = &kern.data()[f * k..(f + 1) * k];
                    for r in 0..rows {
                        let go = &g[(f * rows + r) * width..(f * rows + r + 1) * width];
                        let gr = &mut gx[r * cols..(r + 1) * cols];
                        for (p, &v) in go.iter().enumerate() {
                            for (j, &kj) in kf.iter().enumerate() {
                                gr[p + j] += v * kj;
                            }
                        }
                    }
                }
            }
            if want!(1) {
                let gk = grad_of!(1).data_mut();
                for f in 0..filters {
                    for r in 0..rows {
                        let go = &g[(f * rows + r) * width..(f * rows + r + 1) * width];
                        let xr = &x.data()[r * cols..(r + 1) * cols];
                        for j in 0..k {
                            gk[f * k + j] += go.iter().zip(&xr[j..j + width]).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
            }
            if want!(2) {
                let gb = grad_of!(2).data_mut();
                let block = rows * width;
                for (f, t) in gb.iter_mut().enumerate() {
                    *t += g[f * block..(f + 1) * block].iter().copied().sum::<T>();
                }
            }
        }
        Op::Softmax => {
            let (rows, cols) = as_matrix(y.shape());
            let gx = grad_of!(0).data_mut();
            for r in 0..rows {
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..cols {
                    gx[r * cols + j] += yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::Sum => {
            let g0 = g[0];
            grad_of!(0).data_mut().iter_mut().for_each(|t| *t += g0);
        }
        Op::Mean => {
            let gx = grad_of!(0);
            let share = g[0] / T::from_usize(gx.len()).expect("length fits scalar");
            gx.data_mut().iter_mut().for_each(|t| *t += share);
        }
        Op::StdDev => {
            let x = val(before, 0);
            let s = y.item();
            if s > T::zero() {
                let n = T::from_usize(x.len()).expect("length fits scalar");
                let mean = x.data().iter().copied().sum::<T>() / n;
                let gx = grad_of!(0).data_mut();
                for (t, &xi) in gx.iter_mut().zip(x.data()) {
                    *t += g[0] * (xi - mean) / (n * s);
                }
            }
        }
        Op::Min(idx) | Op::Max(idx) => {
            grad_of!(0).data_mut()[*idx] += g[0];
        }
        Op::Product => {
            let x = val(before, 0);
            let xd = x.data();
            let n = xd.len();
            let mut suffix = vec![T::one(); n + 1];
            for i in (0..n).rev() {
                suffix[i] = suffix[i + 1] * xd[i];
            }
            let gx = grad_of!(0).data_mut();
            let mut prefix = T::one();
            for i in 0..n {
                gx[i] += g[0] * prefix * suffix[i + 1];
                prefix *= xd[i];
            }
        }
        Op::SumRows => {
            let gx = grad_of!(0);
            let cols = gx.cols();
            for (r, &v) in g.iter().enumerate() {
                gx.data_mut()[r * cols..(r + 1) * cols]
                    .iter_mut()
                    .for_each(|t| *t += v);
            }
        }
        Op::ScaleRows => {
            let (x, s) = (val(before, 0), val(before, 1));
            let cols = x.cols();
            if want!(0) {
                let gx = grad_of!(0).data_mut();
                for (r, &sr) in s.data().iter().enumerate() {
                    for c in 0..cols {
                        gx[r * cols + c] += g[r * cols + c] * sr;
                    }
                }
            }
            if want!(1) {
                let gs = grad_of!(1).data_mut();
                for (r, t) in gs.iter_mut().enumerate() {
                    *t += (0..cols)
                        .map(|c| g[r * cols + c] * x.data()[r * cols + c])
                        .sum::<T>();
                }
            }
        }
        Op::ConcatCols => {
            let (ra, ca) = as_matrix(before[inp[0].0].value.shape());
            let (_, cb) = as_matrix(before[inp[1].0].value.shape());
            if want!(0) {
                let ga = grad_of!(0).data_mut();
                for r in 0..ra {
                    for c in 0..ca {
                        ga[r * ca + c] += g[r * (ca + cb) + c];
                    }
                }
            }
            if want!(1) {
                let gb = grad_of!(1).data_mut();
                for r in 0..ra {
                    for c in 0..cb {
                        gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                    }
                }
            }
        }
        Op::FlattenSamples { batch } => {
            let gx = grad_of!(0);
            let (f, br, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
            let rows = br / batch;
            let per = f * rows * w;
            let gd = gx.data_mut();
            for fi in 0..f {
                for s in 0..*batch {
                    for r in 0..rows {
                        let dst = (fi * br + s * rows + r) * w;
                        let src = s * per + (fi * rows + r) * w;
                        for j in 0..w {
                            gd[dst + j] += g[src + j];
                        }
                    }
                }
            }
        }
        Op::ShiftRows(k) => {
            let gx = grad_of!(0);
            let width = if gx.shape().len() == 2 { gx.cols() } else { 1 };
            let rows = gx.shape()[0];
            if *k < rows {
                let span = (rows - k) * width;
                for (t, &v) in gx.data_mut()[..span].iter_mut().zip(&g[k * width..]) {
                    *t += v;
                }
            }
        }
        Op::Select(indices) => {
            let gx = grad_of!(0).data_mut();
            for (&i, &v) in indices.iter().zip(&g) {
                gx[i] += v;
            }
        }
    }
}
