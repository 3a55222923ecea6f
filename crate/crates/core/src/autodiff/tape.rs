//! Define-by-run reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]; node inputs always have
//! smaller indices than the node itself, so a single reverse sweep over the
//! node list is a valid topological traversal. A tape supports exactly one
//! backward pass: a second call returns [`Error::TapeConsumed`].

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use super::kernels;
use super::tensor::{Scalar, Tensor, TensorId};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Scale(usize, Scalar),
    Relu(usize),
    SoftmaxRows(usize),
    L2NormalizeRows(usize),
    RowDot(usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<Scalar>,
    op: Op,
    requires_grad: bool,
    source: Option<TensorId>,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.dims();
        write!(f, "Var(#{} {}x{})", self.idx, r, c)
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf, keyed by
/// the identity of the tensor the leaf was bound from.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<TensorId, Vec<Scalar>>,
    swept: usize,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[Scalar]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: TensorId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn remove(&mut self, id: TensorId) -> Option<Vec<Scalar>> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.map.keys().copied()
    }

    /// Number of recorded operations the backward sweep visited.
    pub fn swept_ops(&self) -> usize {
        self.swept
    }

    /// Adds the stored gradient into `tensor.grad` (if it requires one).
    pub fn accumulate_into(&self, tensor: &mut Tensor) -> Result<()> {
        match self.map.get(&tensor.id()) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op: Op,
        rows: usize,
        cols: usize,
        value: Vec<Scalar>,
        requires_grad: bool,
        source: Option<TensorId>,
    ) -> Var<'_> {
        debug_assert_eq!(rows * cols, value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
            source,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn leaf(&self, tensor: &Tensor, trainable: bool) -> Var<'_> {
        let (rows, cols) = tensor.matrix_dims();
        let requires_grad = trainable && tensor.requires_grad();
        self.push(
            Op::Leaf,
            rows,
            cols,
            tensor.data().to_vec(),
            requires_grad,
            requires_grad.then(|| tensor.id()),
        )
    }

    /// Binds a tensor as a leaf that receives gradients when it requires them.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.leaf(tensor, true)
    }

    /// Binds a tensor as a constant: no gradient ever flows to it.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.leaf(tensor, false)
    }

    /// A constant `rows × cols` input.
    pub fn input(&self, rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Var<'_>> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::shape(
                "input",
                format!("{rows}x{cols} does not hold {} values", data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, rows, cols, data, false, None))
    }

    fn dims(&self, idx: usize) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[idx].rows, nodes[idx].cols)
    }

    fn value(&self, idx: usize) -> Vec<Scalar> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Runs the reverse sweep from `loss` and returns the gradient of every
    /// trainable leaf. Repeated uses of a tensor accumulate additively.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::InvalidArgument("loss belongs to another tape".into()));
        }
        let (r, c) = loss.dims();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; loss.idx + 1];
        let mut out = Gradients::default();
        if !nodes[loss.idx].requires_grad {
            return Ok(out);
        }
        grads[loss.idx] = Some(vec![1.0]);

        let mut leaf_shapes: BTreeMap<TensorId, (usize, usize)> = BTreeMap::new();
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            out.swept += 1;
            if let Op::Leaf = node.op {
                if let Some(id) = node.source {
                    let dims = (node.rows, node.cols);
                    match leaf_shapes.get(&id) {
                        Some(&first) if first != dims => {
                            return Err(Error::TapeShapeConflict {
                                id: id.raw(),
                                first,
                                second: dims,
                            });
                        }
                        Some(_) => {
                            let acc = out.map.get_mut(&id).expect("recorded leaf");
                            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
                        }
                        None => {
                            leaf_shapes.insert(id, dims);
                            out.map.insert(id, g);
                        }
                    }
                }
                continue;
            }
            backward_rule(&nodes, idx, &g, &mut grads);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<Scalar>>], nodes: &[Node], idx: usize, g: Vec<Scalar>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g),
    }
}

fn backward_rule(nodes: &[Node], idx: usize, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
    let node = &nodes[idx];
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].rows, nodes[*a].cols);
            let n = nodes[*b].cols;
            if nodes[*a].requires_grad {
                let ga = kernels::matmul_bt(g, &nodes[*b].value, m, n, k);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = kernels::matmul_at(&nodes[*a].value, g, m, k, n);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MatMulBt(a, b) => {
            // out = a · bᵀ, a: m×k, b: n×k
            let (m, k) = (nodes[*a].rows, nodes[*a].cols);
            let n = nodes[*b].rows;
            if nodes[*a].requires_grad {
                let ga = kernels::matmul(g, &nodes[*b].value, m, n, k);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = kernels::matmul_at(g, &nodes[*a].value, m, n, k);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            accumulate(grads, nodes, *a, kernels::transpose(g, rows, cols));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += *v);
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.iter().zip(&nodes[*b].value).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = g.iter().zip(&nodes[*a].value).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MulCol(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].requires_grad {
                let ga = (0..rows)
                    .map(|i| kernels::dot(&g[i * cols..(i + 1) * cols], &bv[i * cols..(i + 1) * cols]))
                    .collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = g.iter().enumerate().map(|(k, v)| v * av[k / cols]).collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect());
        }
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(&nodes[*a].value)
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = vec![0.0; rows * cols];
            for i in 0..rows {
                let yr = &y[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let inner = kernels::dot(yr, gr);
                for j in 0..cols {
                    ga[i * cols + j] = yr[j] * (gr[j] - inner);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::L2NormalizeRows(a) => {
            let x = &nodes[*a].value;
            let y = &node.value;
            let mut ga = vec![0.0; rows * cols];
            for i in 0..rows {
                let xr = &x[i * cols..(i + 1) * cols];
                let yr = &y[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let norm = kernels::dot(xr, xr).sqrt();
                let inner = kernels::dot(yr, gr);
                for j in 0..cols {
                    ga[i * cols + j] = (gr[j] - yr[j] * inner) / norm;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::RowDot(a, b) => {
            let c = nodes[*a].cols;
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].requires_grad {
                let ga = bv.iter().enumerate().map(|(k, v)| v * g[k / c]).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = av.iter().enumerate().map(|(k, v)| v * g[k / c]).collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = nodes[*a].cols;
            let cb = nodes[*b].cols;
            if nodes[*a].requires_grad {
                let ga = g.chunks(cols).flat_map(|r| r[..ca].iter().copied()).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = g.chunks(cols).flat_map(|r| r[ca..ca + cb].iter().copied()).collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[*a].rows * cols;
            accumulate(grads, nodes, *a, g[..split].to_vec());
            accumulate(grads, nodes, *b, g[split..].to_vec());
        }
        Op::SliceCols(a, start) => {
            let src_cols = nodes[*a].cols;
            let mut ga = vec![0.0; rows * src_cols];
            for i in 0..rows {
                ga[i * src_cols + start..i * src_cols + start + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SliceRows(a, start) => {
            let src = &nodes[*a];
            let mut ga = vec![0.0; src.rows * cols];
            ga[start * cols..(start + rows) * cols].copy_from_slice(g);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0] / n as Scalar; n]);
        }
        Op::CrossEntropy { logits, labels } => {
            let src = &nodes[*logits];
            let c = src.cols;
            let scale = g[0] / labels.len() as Scalar;
            let mut ga = vec![0.0; src.value.len()];
            for (i, &y) in labels.iter().enumerate() {
                let row = &src.value[i * c..(i + 1) * c];
                let out = &mut ga[i * c..(i + 1) * c];
                kernels::softmax_row(row, out);
                out[y] -= 1.0;
                out.iter_mut().for_each(|v| *v *= scale);
            }
            accumulate(grads, nodes, *logits, ga);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.dims(self.idx)
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn value(&self) -> Vec<Scalar> {
        self.tape.value(self.idx)
    }

    /// The value of a 1×1 node.
    pub fn item(&self) -> Scalar {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.idx].value.len(), 1);
        nodes[self.idx].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands recorded on different tapes"))
        }
    }

    fn unary(&self, op: Op, rows: usize, cols: usize, value: Vec<Scalar>) -> Var<'t> {
        self.tape.push(op, rows, cols, value, self.requires_grad(), None)
    }

    fn binary(&self, other: &Var<'t>, op: Op, rows: usize, cols: usize, value: Vec<Scalar>) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(op, rows, cols, value, rg, None)
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&self) -> Var<'t> {
        let (r, c) = self.dims();
        self.tape.push(Op::Leaf, r, c, self.value(), false, None)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let (m, k) = self.dims();
        let (k2, n) = other.dims();
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul(&nodes[self.idx].value, &nodes[other.idx].value, m, k, n)
        };
        Ok(self.binary(other, Op::MatMul(self.idx, other.idx), m, n, value))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul_t")?;
        let (m, k) = self.dims();
        let (n, k2) = other.dims();
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul_bt(&nodes[self.idx].value, &nodes[other.idx].value, m, k, n)
        };
        Ok(self.binary(other, Op::MatMulBt(self.idx, other.idx), m, n, value))
    }

    pub fn transpose(&self) -> Var<'t> {
        let (r, c) = self.dims();
        let value = kernels::transpose(&self.value(), r, c);
        self.unary(Op::Transpose(self.idx), c, r, value)
    }

    fn zip_same(
        &self,
        other: &Var<'t>,
        op: &'static str,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Result<(usize, usize, Vec<Scalar>)> {
        self.same_tape(other, op)?;
        let (r, c) = self.dims();
        if other.dims() != (r, c) {
            return Err(Error::shape(op, format!("{r}x{c} vs {:?}", other.dims())));
        }
        let nodes = self.tape.nodes.borrow();
        let value = nodes[self.idx]
            .value
            .iter()
            .zip(&nodes[other.idx].value)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok((r, c, value))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (r, c, v) = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, Op::Add(self.idx, other.idx), r, c, v))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (r, c, v) = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, Op::Sub(self.idx, other.idx), r, c, v))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (r, c, v) = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, Op::Mul(self.idx, other.idx), r, c, v))
    }

    /// Adds a `1×c` row to every row of `self`.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row, "add_row")?;
        let (r, c) = self.dims();
        if row.dims() != (1, c) {
            return Err(Error::shape("add_row", format!("{r}x{c} + {:?}", row.dims())));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[row.idx].value;
            nodes[self.idx]
                .value
                .iter()
                .enumerate()
                .map(|(k, v)| v + b[k % c])
                .collect()
        };
        Ok(self.binary(row, Op::AddRow(self.idx, row.idx), r, c, value))
    }

    /// Scales row `i` of `other` by `self[i]`, where `self` is an `r×1` column.
    pub fn mul_col(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "mul_col")?;
        let (r, c) = other.dims();
        if self.dims() != (r, 1) {
            return Err(Error::shape("mul_col", format!("{:?} ⊙ {r}x{c}", self.dims())));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            nodes[other.idx]
                .value
                .iter()
                .enumerate()
                .map(|(k, v)| a[k / c] * v)
                .collect()
        };
        Ok(self.binary(other, Op::MulCol(self.idx, other.idx), r, c, value))
    }

    pub fn scale(&self, factor: Scalar) -> Var<'t> {
        let (r, c) = self.dims();
        let value = self.value().into_iter().map(|v| v * factor).collect();
        self.unary(Op::Scale(self.idx, factor), r, c, value)
    }

    pub fn relu(&self) -> Var<'t> {
        let (r, c) = self.dims();
        let value = self.value().into_iter().map(|v| v.max(0.0)).collect();
        self.unary(Op::Relu(self.idx), r, c, value)
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let (r, c) = self.dims();
        let x = self.value();
        let mut value = vec![0.0; r * c];
        for (row, out) in x.chunks(c).zip(value.chunks_mut(c)) {
            kernels::softmax_row(row, out);
        }
        self.unary(Op::SoftmaxRows(self.idx), r, c, value)
    }

    /// Scales each row to unit L2 norm. A zero row is an error.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        let mut value = self.value();
        for row in value.chunks_mut(c) {
            let norm = kernels::dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm("l2_normalize_rows"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.unary(Op::L2NormalizeRows(self.idx), r, c, value))
    }

    /// Row-wise inner products: `r×c, r×c → r×1`.
    pub fn row_dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "row_dot")?;
        let (r, c) = self.dims();
        if other.dims() != (r, c) {
            return Err(Error::shape("row_dot", format!("{r}x{c} vs {:?}", other.dims())));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            (0..r)
                .map(|i| kernels::dot(&a[i * c..(i + 1) * c], &b[i * c..(i + 1) * c]))
                .collect()
        };
        Ok(self.binary(other, Op::RowDot(self.idx, other.idx), r, 1, value))
    }

    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "concat_cols")?;
        let (r, ca) = self.dims();
        let (r2, cb) = other.dims();
        if r != r2 {
            return Err(Error::shape("concat_cols", format!("{r} rows vs {r2} rows")));
        }
        let a = self.value();
        let b = other.value();
        let value = (0..r)
            .flat_map(|i| {
                a[i * ca..(i + 1) * ca]
                    .iter()
                    .chain(&b[i * cb..(i + 1) * cb])
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(self.binary(other, Op::ConcatCols(self.idx, other.idx), r, ca + cb, value))
    }

    pub fn concat_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "concat_rows")?;
        let (ra, c) = self.dims();
        let (rb, c2) = other.dims();
        if c != c2 {
            return Err(Error::shape("concat_rows", format!("{c} cols vs {c2} cols")));
        }
        let mut value = self.value();
        value.extend(other.value());
        Ok(self.binary(other, Op::ConcatRows(self.idx, other.idx), ra + rb, c, value))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let x = self.value();
        let value = x.chunks(c).flat_map(|row| row[start..end].iter().copied()).collect();
        Ok(self.unary(Op::SliceCols(self.idx, start), r, end - start, value))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let value = self.value()[start * c..end * c].to_vec();
        Ok(self.unary(Op::SliceRows(self.idx, start), end - start, c, value))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().iter().sum();
        self.unary(Op::Sum(self.idx), 1, 1, vec![total])
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let total: Scalar = x.iter().sum();
        self.unary(Op::Mean(self.idx), 1, 1, vec![total / x.len() as Scalar])
    }

    /// Mean cross-entropy of each logit row against its label, computed with a
    /// stable log-sum-exp.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        if labels.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows, {} labels", labels.len()),
            ));
        }
        if c < 2 {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy needs at least 2 classes, got {c}"
            )));
        }
        let x = self.value();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut total = 0.0;
        for (row, &y) in x.chunks(c).zip(labels) {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            total += kernels::log_sum_exp(row) - row[y];
        }
        let op = Op::CrossEntropy {
            logits: self.idx,
            labels: labels.to_vec(),
        };
        Ok(self.unary(op, 1, 1, vec![total / r as Scalar]))
    }
}
