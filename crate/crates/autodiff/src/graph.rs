//! Arena-backed computation graph.
//!
//! Nodes are appended to a single arena, so a node's index is always larger
//! than the indices of its parents and the arena order is a topological
//! order. The backward pass walks the arena in reverse and expresses every
//! vector-Jacobian product with the same graph operations used in the forward
//! pass, so gradients can themselves be differentiated when `create_graph`
//! is set.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Sum,
    Mean,
    Square,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    ScalarMul(f64),
    /// Widths of the concatenated parents along the last axis.
    Concat(Vec<usize>),
    Slice { start: usize, end: usize },
    /// Zero-pads the parent into `width` columns starting at `start`.
    Embed { start: usize, width: usize },
    /// Scalar repeated to the node's shape.
    Expand,
    AddRow,
    SumRows,
    RepeatRows,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Square => "square",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Expand => "expand",
            Op::AddRow => "add_row",
            Op::SumRows => "sum_rows",
            Op::RepeatRows => "repeat_rows",
        }
    }
}

struct NodeData {
    value: Tensor,
    op: Op,
    parents: Vec<Node>,
    requires_grad: bool,
}

/// Single-threaded computation graph. Independent graphs share nothing and
/// can live on different threads.
pub struct Graph {
    nodes: Vec<NodeData>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Only leaves created with `requires_grad` can be used as
    /// `wrt` targets of [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Node {
        self.nodes.push(NodeData {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        });
        Node(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Node {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Node {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Node> {
        Ok(self.constant(Tensor::scalar(value)?))
    }

    /// Constant copy of `node`'s value, cut from the graph.
    pub fn detach(&mut self, node: Node) -> Node {
        let v = self.nodes[node.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: Node) -> &[usize] {
        self.nodes[node.0].value.shape()
    }

    pub fn requires_grad(&self, node: Node) -> bool {
        self.nodes[node.0].requires_grad
    }

    /// Runs `f` with recording disabled: nodes created inside are constants.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.recording, false);
        let out = f(self);
        self.recording = prev;
        out
    }

    fn check(&self, node: Node) -> Result<()> {
        if node.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(node.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<Node>) -> Result<Node> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteResult { op: op.name() });
        }
        let requires_grad =
            self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            (Op::Leaf, Vec::new())
        };
        self.nodes.push(NodeData {
            value,
            op,
            parents,
            requires_grad,
        });
        Ok(Node(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Node, b: Node, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Node> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (shape, data) = if va.shape() == vb.shape() {
            let d = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
            (va.shape().to_vec(), d)
        } else if vb.is_scalar() {
            let y = vb.item();
            (va.shape().to_vec(), va.data().iter().map(|x| f(*x, y)).collect())
        } else if va.is_scalar() {
            let x = va.item();
            (vb.shape().to_vec(), vb.data().iter().map(|y| f(x, *y)).collect())
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: op.name(),
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        self.push(Tensor::from_parts(shape, data), op, vec![a, b])
    }

    fn unary(&mut self, a: Node, op: Op, f: impl Fn(f64) -> f64) -> Result<Node> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, op, vec![a])
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product; one side may be a scalar.
    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: Node, c: f64) -> Result<Node> {
        self.unary(a, Op::ScalarMul(c), |x| c * x)
    }

    pub fn neg(&mut self, a: Node) -> Result<Node> {
        self.scalar_mul(a, -1.0)
    }

    pub fn square(&mut self, a: Node) -> Result<Node> {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn relu(&mut self, a: Node) -> Result<Node> {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn softplus(&mut self, a: Node) -> Result<Node> {
        self.unary(a, Op::Softplus, softplus)
    }

    pub fn sigmoid(&mut self, a: Node) -> Result<Node> {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, a: Node) -> Result<Node> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sin(&mut self, a: Node) -> Result<Node> {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: Node) -> Result<Node> {
        self.unary(a, Op::Cos, f64::cos)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::from_parts(Vec::new(), vec![s]), Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        if v.numel() == 0 {
            return Err(AutodiffError::BadShape {
                op: "mean",
                shape: v.shape().to_vec(),
            });
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::from_parts(Vec::new(), vec![m]), Op::Mean, vec![a])
    }

    /// Column sums of a matrix: `rows × cols → cols`.
    pub fn sum_rows(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        let [rows, cols] = *v.shape() else {
            return Err(AutodiffError::BadShape {
                op: "sum_rows",
                shape: v.shape().to_vec(),
            });
        };
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.push(Tensor::from_parts(vec![cols], out), Op::SumRows, vec![a])
    }

    // ---- shape-changing ----------------------------------------------------

    /// Repeats a scalar to `shape`.
    pub fn expand(&mut self, a: Node, shape: &[usize]) -> Result<Node> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        if !v.is_scalar() {
            return Err(AutodiffError::BadShape {
                op: "expand",
                shape: v.shape().to_vec(),
            });
        }
        let t = Tensor::filled(shape, v.item());
        self.push(t, Op::Expand, vec![a])
    }

    /// Stacks a vector `rows` times into a `rows × len` matrix.
    pub fn repeat_rows(&mut self, a: Node, rows: usize) -> Result<Node> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        if v.rank() != 1 {
            return Err(AutodiffError::BadShape {
                op: "repeat_rows",
                shape: v.shape().to_vec(),
            });
        }
        let cols = v.numel();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::from_parts(vec![rows, cols], data), Op::RepeatRows, vec![a])
    }

    /// Adds vector `row` to every row of matrix `a` (bias addition).
    pub fn add_row(&mut self, a: Node, row: Node) -> Result<Node> {
        self.check(a)?;
        self.check(row)?;
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        match (va.shape(), vr.shape()) {
            (&[rows, cols], &[n]) if n == cols => {
                let mut data = va.data().to_vec();
                for r in 0..rows {
                    for (d, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vr.data()) {
                        *d += b;
                    }
                }
                self.push(Tensor::from_parts(vec![rows, cols], data), Op::AddRow, vec![a, row])
            }
            (l, r) => Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            }),
        }
    }

    pub fn transpose(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        let [rows, cols] = *v.shape() else {
            return Err(AutodiffError::BadShape {
                op: "transpose",
                shape: v.shape().to_vec(),
            });
        };
        let src = v.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        self.push(Tensor::from_parts(vec![cols, rows], data), Op::Transpose, vec![a])
    }

    /// Matrix product of `m × k` and `k × n` matrices.
    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (l, r) => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: l.to_vec(),
                    rhs: r.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: the slices hold m*k, k*n and m*n elements laid out
            // row-major, matching the strides passed to dgemm.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    va.data().as_ptr(),
                    k as isize,
                    1,
                    vb.data().as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul, vec![a, b])
    }

    /// Concatenates along the last axis. All parts must share rank and, for
    /// matrices, the row count.
    pub fn concat(&mut self, parts: &[Node]) -> Result<Node> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::BadShape {
                op: "concat",
                shape: Vec::new(),
            });
        };
        for p in parts {
            self.check(*p)?;
        }
        let lead = self.nodes[first.0].value.shape().to_vec();
        if lead.is_empty() || lead.len() > 2 {
            return Err(AutodiffError::BadShape {
                op: "concat",
                shape: lead,
            });
        }
        let rows = if lead.len() == 2 { lead[0] } else { 1 };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != lead.len() || (s.len() == 2 && s[0] != rows) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: lead,
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                let d = self.nodes[p.0].value.data();
                data.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        let shape = if lead.len() == 2 {
            vec![rows, total]
        } else {
            vec![total]
        };
        self.push(Tensor::from_parts(shape, data), Op::Concat(widths), parts.to_vec())
    }

    /// Columns `start..end` along the last axis.
    pub fn slice(&mut self, a: Node, start: usize, end: usize) -> Result<Node> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        let shape = v.shape().to_vec();
        if shape.is_empty() || shape.len() > 2 || start > end || end > *shape.last().unwrap() {
            return Err(AutodiffError::BadShape { op: "slice", shape });
        }
        let (rows, cols) = v.rows_cols();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + end]);
        }
        let out_shape = if shape.len() == 2 { vec![rows, w] } else { vec![w] };
        self.push(Tensor::from_parts(out_shape, data), Op::Slice { start, end }, vec![a])
    }

    /// Places `a` into a zero tensor with `width` columns at column `start`.
    fn embed(&mut self, a: Node, start: usize, width: usize) -> Result<Node> {
        let v = &self.nodes[a.0].value;
        let (rows, w) = v.rows_cols();
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            data[r * width + start..r * width + start + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
        let shape = if v.rank() == 2 { vec![rows, width] } else { vec![width] };
        self.push(Tensor::from_parts(shape, data), Op::Embed { start, width }, vec![a])
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `root` with respect to each node in `wrt`.
    ///
    /// With `create_graph` the returned gradients are ordinary differentiable
    /// nodes; otherwise they are constants. A `wrt` node that does not feed
    /// into `root` gets an all-zero gradient.
    pub fn backward(&mut self, root: Node, wrt: &[Node], create_graph: bool) -> Result<Vec<Node>> {
        self.check(root)?;
        if !self.nodes[root.0].value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(self.nodes[root.0].value.shape().to_vec()));
        }
        for w in wrt {
            self.check(*w)?;
            if !self.nodes[w.0].requires_grad {
                return Err(AutodiffError::NotDifferentiable(w.0));
            }
        }
        let prev = std::mem::replace(&mut self.recording, create_graph);
        let out = self.backward_inner(root, wrt);
        self.recording = prev;
        out
    }

    fn backward_inner(&mut self, root: Node, wrt: &[Node]) -> Result<Vec<Node>> {
        let n = root.0 + 1;
        // Nodes lying downstream of some wrt target; only these carry gradient
        // worth propagating.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].parents.iter().any(|p| relevant[p.0]) {
                relevant[i] = true;
            }
        }

        let mut grads: Vec<Option<Node>> = vec![None; n];
        if relevant[root.0] {
            let one = self.constant(Tensor::from_parts(Vec::new(), vec![1.0]));
            grads[root.0] = Some(one);
        }
        for i in (0..n).rev() {
            if !relevant[i] || self.nodes[i].parents.is_empty() {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let parents = self.nodes[i].parents.clone();
            let needed: Vec<bool> = parents.iter().map(|p| relevant[p.0]).collect();
            let pg = self.vjp(Node(i), g, &needed)?;
            for ((p, need), gp) in parents.iter().zip(needed).zip(pg) {
                if !need {
                    continue;
                }
                let Some(gp) = gp else { continue };
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, gp)?,
                    None => gp,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.nodes[w.0].value.shape());
                    self.constant(z)
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Reduces an upstream gradient to a parent's shape (scalar operands of
    /// scalar-tensor ops receive the summed gradient).
    fn reduce_to(&mut self, g: Node, parent: Node) -> Result<Node> {
        if self.nodes[parent.0].value.is_scalar() && !self.nodes[g.0].value.is_scalar() {
            self.sum(g)
        } else {
            Ok(g)
        }
    }

    fn vjp(&mut self, out: Node, g: Node, needed: &[bool]) -> Result<Vec<Option<Node>>> {
        let op = self.nodes[out.0].op.clone();
        let parents = self.nodes[out.0].parents.clone();
        let a = parents[0];
        let res = match op {
            Op::Leaf => Vec::new(),
            Op::Add => {
                let b = parents[1];
                let ga = if needed[0] { Some(self.reduce_to(g, a)?) } else { None };
                let gb = if needed[1] { Some(self.reduce_to(g, b)?) } else { None };
                vec![ga, gb]
            }
            Op::Sub => {
                let b = parents[1];
                let ga = if needed[0] { Some(self.reduce_to(g, a)?) } else { None };
                let gb = if needed[1] {
                    let ng = self.neg(g)?;
                    Some(self.reduce_to(ng, b)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Mul => {
                let b = parents[1];
                let ga = if needed[0] {
                    let t = self.mul(g, b)?;
                    Some(self.reduce_to(t, a)?)
                } else {
                    None
                };
                let gb = if needed[1] {
                    let t = self.mul(g, a)?;
                    Some(self.reduce_to(t, b)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::MatMul => {
                let b = parents[1];
                let ga = if needed[0] {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if needed[1] {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::Sum => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                vec![Some(self.expand(g, &shape)?)]
            }
            Op::Mean => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n = self.nodes[a.0].value.numel() as f64;
                let e = self.expand(g, &shape)?;
                vec![Some(self.scalar_mul(e, 1.0 / n)?)]
            }
            Op::Square => {
                let two_a = self.scalar_mul(a, 2.0)?;
                vec![Some(self.mul(g, two_a)?)]
            }
            Op::Relu => {
                let v = &self.nodes[a.0].value;
                let mask = v.data().iter().map(|x| if *x > 0.0 { 1.0 } else { 0.0 }).collect();
                let mask = Tensor::from_parts(v.shape().to_vec(), mask);
                let m = self.constant(mask);
                vec![Some(self.mul(g, m)?)]
            }
            Op::Softplus => {
                let s = self.sigmoid(a)?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::Sigmoid => {
                // y (1 - y)
                let y2 = self.square(out)?;
                let d = self.sub(out, y2)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Tanh => {
                // 1 - y^2
                let y2 = self.square(out)?;
                let one = self.constant(Tensor::from_parts(Vec::new(), vec![1.0]));
                let d = self.sub(one, y2)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Sin => {
                let c = self.cos(a)?;
                vec![Some(self.mul(g, c)?)]
            }
            Op::Cos => {
                let s = self.sin(a)?;
                let ns = self.neg(s)?;
                vec![Some(self.mul(g, ns)?)]
            }
            Op::ScalarMul(c) => vec![Some(self.scalar_mul(g, c)?)],
            Op::Concat(widths) => {
                let mut out = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (w, need) in widths.iter().zip(needed) {
                    out.push(if *need {
                        Some(self.slice(g, offset, offset + w)?)
                    } else {
                        None
                    });
                    offset += w;
                }
                out
            }
            Op::Slice { start, .. } => {
                let width = *self.nodes[a.0].value.shape().last().unwrap();
                vec![Some(self.embed(g, start, width)?)]
            }
            Op::Embed { start, .. } => {
                let w = *self.nodes[a.0].value.shape().last().unwrap();
                vec![Some(self.slice(g, start, start + w)?)]
            }
            Op::Expand => vec![Some(self.sum(g)?)],
            Op::AddRow => {
                let ga = if needed[0] { Some(g) } else { None };
                let gb = if needed[1] { Some(self.sum_rows(g)?) } else { None };
                vec![ga, gb]
            }
            Op::SumRows => {
                let rows = self.nodes[a.0].value.shape()[0];
                vec![Some(self.repeat_rows(g, rows)?)]
            }
            Op::RepeatRows => vec![Some(self.sum_rows(g)?)],
        };
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(g: &mut Graph, x: f64) -> Node {
        g.param(Tensor::scalar(x).unwrap())
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.scalar(0.0).unwrap();
        let y = g.softplus(x).unwrap();
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_does_not_overflow() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.0, 3.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    }

    #[test]
    fn elementwise_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let m = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.add_row(m, b).is_err());
    }

    #[test]
    fn first_derivative_of_square() {
        let mut g = Graph::new();
        let x = s(&mut g, 3.0);
        let y = g.square(x).unwrap();
        let dx = g.backward(y, &[x], false).unwrap();
        assert_eq!(g.value(dx[0]).item(), 6.0);
        assert!(!g.requires_grad(dx[0]));
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = s(&mut g, 2.0);
        let x2 = g.square(x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let d1 = g.backward(x3, &[x], true).unwrap()[0];
        assert_eq!(g.value(d1).item(), 12.0);
        let d2 = g.backward(d1, &[x], true).unwrap()[0];
        assert_eq!(g.value(d2).item(), 12.0);
    }

    #[test]
    fn non_scalar_root_is_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y, &[x], false), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn unconnected_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let z = g.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let y = g.square(x).unwrap();
        let y = g.sum(y).unwrap();
        let grads = g.backward(y, &[x, z], false).unwrap();
        assert_eq!(g.value(grads[1]).shape(), &[2, 2]);
        assert!(g.value(grads[1]).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wrt_must_require_grad() {
        let mut g = Graph::new();
        let x = g.scalar(1.0).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y, &[x], false), Err(AutodiffError::NotDifferentiable(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.scalar(1e200).unwrap();
        assert!(matches!(g.square(x), Err(AutodiffError::NonFiniteResult { op: "square" })));
    }

    #[test]
    fn no_grad_produces_constants() {
        let mut g = Graph::new();
        let x = s(&mut g, 1.0);
        let y = g.no_grad(|g| g.square(x).unwrap());
        assert!(!g.requires_grad(y));
        let z = g.square(x).unwrap();
        assert!(g.requires_grad(z));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0], [2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
        assert!(g.slice(c, 2, 4).is_err());
    }
}
