//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! Values are computed eagerly as operations are recorded, so data-dependent
//! control flow (e.g. routing on an argmax) can read intermediate results
//! mid-graph. Storage is row-major and flat; the only broadcasting supported
//! is scalar-by-tensor (plus the explicit row/column broadcast ops).
//!
//! The tape also keeps a running multiply-accumulate counter. Each operation
//! charges the cost given by the counting convention in [`crate::cost`]
//! (matrix products charge `m*k*n`, elementwise add/mul charge one per
//! element, bias adds and activations are free). Summing what actually
//! executed is what lets the cost tables be audited exactly.

use crate::error::{Error, Result};

/// A plain tensor value: shape, row-major data, and an optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                what: "Tensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Zero (and allocate if needed) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    AddScalar(Value),
    MulScalar(Value, f64),
    /// Multiply every element of `x` by the single-element tensor `s`.
    MulScalarV { x: Value, s: Value },
    /// `out[i][j] = x[i][j] + row[j]` (bias add; charges no MAdds).
    AddRowBroadcast { x: Value, row: Value },
    /// `out[i][j] = x[i][j] * row[j]`.
    MulRowBroadcast { x: Value, row: Value },
    /// `out[i][j] = x[i][j] * col[i]`.
    MulCol { x: Value, col: Value },
    Relu(Value),
    Sigmoid(Value),
    Tanh(Value),
    Softmax { x: Value, axis: usize },
    Sum { x: Value, axis: Option<usize> },
    Mean { x: Value, axis: Option<usize> },
    Concat { parts: Vec<Value>, axis: usize },
    /// Row `row` of a 2-d tensor, as a 1-d tensor.
    SliceRow { x: Value, row: usize },
    /// Contiguous range of a 1-d tensor.
    Slice1d { x: Value, start: usize },
    /// One element of a 1-d tensor, as a scalar.
    Select { x: Value, index: usize },
    /// Copy the given rows of a 2-d tensor (duplicates allowed).
    GatherRows { x: Value, rows: Vec<usize> },
    /// Scatter 2-d parts back into one 2-d tensor by row index.
    AssembleRows { parts: Vec<Value>, maps: Vec<Vec<usize>> },
    /// Stack 1-d rows of equal length into a 2-d tensor.
    StackRows { rows: Vec<Value> },
    /// Pick element `idx` from each (1-d value, idx) pair into a 1-d tensor.
    StackSelects { picks: Vec<(Value, usize)> },
    MatMul { a: Value, b: Value },
    /// Forward: one-hot of argmax. Backward: identity (straight-through).
    StraightThrough { soft: Value },
    CrossEntropy { logits: Value, targets: Vec<usize> },
    BinaryCrossEntropy { logits: Value, targets: Vec<f64> },
    MseLoss { pred: Value, target: Vec<f64> },
    MaeLoss { pred: Value, target: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
    /// Index of the parameter this leaf was copied from, when it was.
    origin: Option<usize>,
}

/// Reverse-mode tape. Records operations eagerly and replays them backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    madds: u64,
}

/// Row-major matrix product of `a` (m×k) and `b` (k×n).
fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Numerically stable softmax of one contiguous lane.
pub(crate) fn softmax_lane(lane: &[f64], out: &mut [f64]) {
    let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(lane) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the maximum element; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
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

    /// Multiply-accumulates charged by everything recorded so far.
    pub fn madds(&self) -> u64 {
        self.madds
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copy a 2-d value out of the tape as one vector per row.
    pub fn rows(&self, v: Value) -> Result<Vec<Vec<f64>>> {
        let (r, c) = self.rows_cols(v, "rows")?;
        Ok((0..r)
            .map(|i| self.nodes[v.0].data[i * c..(i + 1) * c].to_vec())
            .collect())
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
            origin: None,
        });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn req(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Value> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    /// Record a differentiable leaf that remembers which parameter it came
    /// from, so gradients can be routed back after `backward`.
    pub fn param(&mut self, t: &Tensor, param_index: usize) -> Value {
        let v = self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf);
        self.nodes[v.0].origin = Some(param_index);
        v
    }

    fn binary_ew(&mut self, op_name: &'static str, a: Value, b: Value) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_ew("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.madds += data.len() as u64;
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_ew("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.madds += data.len() as u64;
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_ew("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.madds += data.len() as u64;
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Value {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        self.madds += data.len() as u64;
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Value, c: f64) -> Value {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.madds += data.len() as u64;
        let req = self.req(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, Op::MulScalar(a, c))
    }

    /// Multiply `x` elementwise by a single-element tensor `s`.
    pub fn mul_scalarv(&mut self, x: Value, s: Value) -> Result<Value> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Dimension {
                what: "mul_scalarv",
                expected: "a single-element scale".into(),
                got: format!("{:?}", self.nodes[s.0].shape),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * sv).collect();
        self.madds += data.len() as u64;
        let req = self.req(x) || self.req(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, req, Op::MulScalarV { x, s }))
    }

    fn rows_cols(&self, v: Value, what: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                what,
                expected: "a 2-d tensor".into(),
                got: format!("{:?}", self.nodes[v.0].shape),
            }),
        }
    }

    /// Bias add: `out[i][j] = x[i][j] + row[j]`. Charges no MAdds by the
    /// counting convention (bias is excluded from linear-layer cost).
    pub fn add_row_broadcast(&mut self, x: Value, row: Value) -> Result<Value> {
        let (r, c) = self.rows_cols(x, "add_row_broadcast")?;
        if self.nodes[row.0].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[row.0].data[j];
            }
        }
        let req = self.req(x) || self.req(row);
        Ok(self.push(vec![r, c], data, req, Op::AddRowBroadcast { x, row }))
    }

    /// `out[i][j] = x[i][j] * row[j]`.
    pub fn mul_row_broadcast(&mut self, x: Value, row: Value) -> Result<Value> {
        let (r, c) = self.rows_cols(x, "mul_row_broadcast")?;
        if self.nodes[row.0].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "mul_row_broadcast",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= self.nodes[row.0].data[j];
            }
        }
        self.madds += (r * c) as u64;
        let req = self.req(x) || self.req(row);
        Ok(self.push(vec![r, c], data, req, Op::MulRowBroadcast { x, row }))
    }

    /// `out[i][j] = x[i][j] * col[i]`.
    pub fn mul_col(&mut self, x: Value, col: Value) -> Result<Value> {
        let (r, c) = self.rows_cols(x, "mul_col")?;
        if self.nodes[col.0].shape != [r] {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[col.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= self.nodes[col.0].data[i];
            }
        }
        self.madds += (r * c) as u64;
        let req = self.req(x) || self.req(col);
        Ok(self.push(vec![r, c], data, req, Op::MulCol { x, col }))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let req = self.req(x);
        self.push(self.nodes[x.0].shape.clone(), data, req, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let req = self.req(x);
        self.push(self.nodes[x.0].shape.clone(), data, req, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let req = self.req(x);
        self.push(self.nodes[x.0].shape.clone(), data, req, Op::Tanh(x))
    }

    fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        // Decompose into (outer, lane length, stride) for iteration along `axis`.
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                ndim: shape.len(),
            });
        }
        match shape.len() {
            1 => Ok((1, shape[0], 1)),
            2 => {
                if axis == 1 {
                    Ok((shape[0], shape[1], 1))
                } else {
                    Ok((shape[1], shape[0], shape[1]))
                }
            }
            n => Err(Error::InvalidAxis { axis, ndim: n }),
        }
    }

    /// Softmax along `axis` with max-subtraction for stability.
    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.nodes[x.0].shape.clone();
        let (outer, lane, stride) = Self::lanes(&shape, axis)?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        let mut buf_in = vec![0.0; lane];
        let mut buf_out = vec![0.0; lane];
        for o in 0..outer {
            let base = if stride == 1 { o * lane } else { o };
            for l in 0..lane {
                buf_in[l] = src[base + l * stride];
            }
            softmax_lane(&buf_in, &mut buf_out);
            for l in 0..lane {
                data[base + l * stride] = buf_out[l];
            }
        }
        let req = self.req(x);
        Ok(self.push(shape, data, req, Op::Softmax { x, axis }))
    }

    /// Sum over all elements (`axis: None`, scalar result) or along one axis.
    pub fn sum(&mut self, x: Value, axis: Option<usize>) -> Result<Value> {
        let shape = self.nodes[x.0].shape.clone();
        match axis {
            None => {
                let total: f64 = self.nodes[x.0].data.iter().sum();
                let req = self.req(x);
                Ok(self.push(vec![], vec![total], req, Op::Sum { x, axis }))
            }
            Some(ax) => {
                let (outer, lane, stride) = Self::lanes(&shape, ax)?;
                let src = &self.nodes[x.0].data;
                let mut data = vec![0.0; outer];
                for o in 0..outer {
                    let base = if stride == 1 { o * lane } else { o };
                    for l in 0..lane {
                        data[o] += src[base + l * stride];
                    }
                }
                let out_shape = if shape.len() == 1 {
                    vec![]
                } else {
                    vec![outer]
                };
                let req = self.req(x);
                Ok(self.push(out_shape, data, req, Op::Sum { x, axis }))
            }
        }
    }

    /// Arithmetic mean over all elements or along one axis.
    pub fn mean(&mut self, x: Value, axis: Option<usize>) -> Result<Value> {
        let shape = self.nodes[x.0].shape.clone();
        let summed = self.sum(x, axis)?;
        let lane = match axis {
            None => self.nodes[x.0].data.len(),
            Some(ax) => Self::lanes(&shape, ax)?.1,
        };
        let data: Vec<f64> = self.nodes[summed.0]
            .data
            .iter()
            .map(|v| v / lane as f64)
            .collect();
        // Re-recorded as a single Mean node so backward is one rule; drop the
        // intermediate Sum node's count contribution (reductions are free).
        self.nodes.pop();
        self.grads.pop();
        let out_shape = self.nodes[x.0].shape.clone();
        let out_shape = match axis {
            None => vec![],
            Some(_) if out_shape.len() == 1 => vec![],
            Some(ax) => vec![out_shape[1 - ax]],
        };
        let req = self.req(x);
        Ok(self.push(out_shape, data, req, Op::Mean { x, axis }))
    }

    /// Concatenate along `axis`. All other dimensions must agree.
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Dimension {
                what: "concat",
                expected: "at least one part".into(),
                got: "0".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len().max(1) {
            return Err(Error::InvalidAxis {
                axis,
                ndim: first.len(),
            });
        }
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
        }
        let (shape, data) = if first.len() == 1 {
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(&self.nodes[p.0].data);
            }
            (vec![data.len()], data)
        } else {
            // 2-d
            if axis == 0 {
                let cols = first[1];
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    rows += self.nodes[p.0].shape[0];
                    data.extend_from_slice(&self.nodes[p.0].data);
                }
                (vec![rows, cols], data)
            } else {
                let rows = first[0];
                let total_cols: usize = parts.iter().map(|p| self.nodes[p.0].shape[1]).sum();
                let mut data = vec![0.0; rows * total_cols];
                let mut col_off = 0;
                for p in parts {
                    let c = self.nodes[p.0].shape[1];
                    for i in 0..rows {
                        data[i * total_cols + col_off..i * total_cols + col_off + c]
                            .copy_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
                    }
                    col_off += c;
                }
                (vec![rows, total_cols], data)
            }
        };
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            shape,
            data,
            req,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Row `row` of a 2-d tensor as a 1-d tensor.
    pub fn slice_row(&mut self, x: Value, row: usize) -> Result<Value> {
        let (r, c) = self.rows_cols(x, "slice_row")?;
        if row >= r {
            return Err(Error::Dimension {
                what: "slice_row",
                expected: format!("row < {r}"),
                got: format!("{row}"),
            });
        }
        let data = self.nodes[x.0].data[row * c..(row + 1) * c].to_vec();
        let req = self.req(x);
        Ok(self.push(vec![c], data, req, Op::SliceRow { x, row }))
    }

    /// Contiguous `[start, start+len)` range of a 1-d tensor.
    pub fn slice_1d(&mut self, x: Value, start: usize, len: usize) -> Result<Value> {
        if self.nodes[x.0].shape.len() != 1 || start + len > self.nodes[x.0].data.len() {
            return Err(Error::Dimension {
                what: "slice_1d",
                expected: format!("1-d tensor covering [{start}, {})", start + len),
                got: format!("{:?}", self.nodes[x.0].shape),
            });
        }
        let data = self.nodes[x.0].data[start..start + len].to_vec();
        let req = self.req(x);
        Ok(self.push(vec![len], data, req, Op::Slice1d { x, start }))
    }

    /// Element `index` of a 1-d tensor as a scalar.
    pub fn select(&mut self, x: Value, index: usize) -> Result<Value> {
        if self.nodes[x.0].shape.len() != 1 || index >= self.nodes[x.0].data.len() {
            return Err(Error::Dimension {
                what: "select",
                expected: "1-d tensor with index in range".into(),
                got: format!("shape {:?}, index {index}", self.nodes[x.0].shape),
            });
        }
        let data = vec![self.nodes[x.0].data[index]];
        let req = self.req(x);
        Ok(self.push(vec![], data, req, Op::Select { x, index }))
    }

    /// Copy rows of a 2-d tensor into a new 2-d tensor (sub-batch gather).
    pub fn gather_rows(&mut self, x: Value, rows: &[usize]) -> Result<Value> {
        let (r, c) = self.rows_cols(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                what: "gather_rows",
                expected: format!("row indices < {r}"),
                got: format!("{bad}"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&self.nodes[x.0].data[i * c..(i + 1) * c]);
        }
        let req = self.req(x);
        Ok(self.push(
            vec![rows.len(), c],
            data,
            req,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Scatter 2-d `parts` into a single 2-d tensor: row `i` of `parts[p]`
    /// lands at output row `maps[p][i]`. The maps must tile `0..n` exactly.
    pub fn assemble_rows(&mut self, parts: &[Value], maps: &[Vec<usize>]) -> Result<Value> {
        if parts.is_empty() || parts.len() != maps.len() {
            return Err(Error::Dimension {
                what: "assemble_rows",
                expected: "equal numbers of parts and row maps".into(),
                got: format!("{} parts, {} maps", parts.len(), maps.len()),
            });
        }
        let cols = self.rows_cols(parts[0], "assemble_rows")?.1;
        let n: usize = maps.iter().map(|m| m.len()).sum();
        let mut seen = vec![false; n];
        let mut data = vec![0.0; n * cols];
        for (p, map) in parts.iter().zip(maps) {
            let (r, c) = self.rows_cols(*p, "assemble_rows")?;
            if c != cols || r != map.len() {
                return Err(Error::Dimension {
                    what: "assemble_rows",
                    expected: format!("part of shape [{}, {cols}]", map.len()),
                    got: format!("[{r}, {c}]"),
                });
            }
            for (i, &dst) in map.iter().enumerate() {
                if dst >= n || seen[dst] {
                    return Err(Error::Dimension {
                        what: "assemble_rows",
                        expected: format!("row maps tiling 0..{n} exactly once"),
                        got: format!("row {dst}"),
                    });
                }
                seen[dst] = true;
                data[dst * cols..(dst + 1) * cols]
                    .copy_from_slice(&self.nodes[p.0].data[i * cols..(i + 1) * cols]);
            }
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            vec![n, cols],
            data,
            req,
            Op::AssembleRows {
                parts: parts.to_vec(),
                maps: maps.to_vec(),
            },
        ))
    }

    /// Stack equal-length 1-d tensors into a 2-d tensor (one per row).
    pub fn stack_rows(&mut self, rows: &[Value]) -> Result<Value> {
        if rows.is_empty() {
            return Err(Error::Dimension {
                what: "stack_rows",
                expected: "at least one row".into(),
                got: "0".into(),
            });
        }
        let c = self.nodes[rows[0].0].data.len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if self.nodes[r.0].shape.len() != 1 || self.nodes[r.0].data.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![c],
                    rhs: self.nodes[r.0].shape.clone(),
                });
            }
            data.extend_from_slice(&self.nodes[r.0].data);
        }
        let req = rows.iter().any(|&r| self.req(r));
        Ok(self.push(
            vec![rows.len(), c],
            data,
            req,
            Op::StackRows { rows: rows.to_vec() },
        ))
    }

    /// Build a 1-d tensor whose k-th element is `picks[k].0[picks[k].1]`.
    pub fn stack_selects(&mut self, picks: &[(Value, usize)]) -> Result<Value> {
        let mut data = Vec::with_capacity(picks.len());
        for &(v, idx) in picks {
            if self.nodes[v.0].shape.len() != 1 || idx >= self.nodes[v.0].data.len() {
                return Err(Error::Dimension {
                    what: "stack_selects",
                    expected: "1-d tensors with indices in range".into(),
                    got: format!("shape {:?}, index {idx}", self.nodes[v.0].shape),
                });
            }
            data.push(self.nodes[v.0].data[idx]);
        }
        let req = picks.iter().any(|&(v, _)| self.req(v));
        Ok(self.push(
            vec![picks.len()],
            data,
            req,
            Op::StackSelects {
                picks: picks.to_vec(),
            },
        ))
    }

    /// Matrix product of 2-d tensors: (m×k) · (k×n) → (m×n).
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_data(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        self.madds += (m * ka * n) as u64;
        let req = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], data, req, Op::MatMul { a, b }))
    }

    /// One-hot of the argmax on the forward pass; identity on the backward
    /// pass. Ties resolve to the lowest index.
    pub fn straight_through(&mut self, soft: Value) -> Result<Value> {
        if self.nodes[soft.0].shape.len() != 1 {
            return Err(Error::Dimension {
                what: "straight_through",
                expected: "a 1-d tensor".into(),
                got: format!("{:?}", self.nodes[soft.0].shape),
            });
        }
        let sel = argmax(&self.nodes[soft.0].data);
        let mut data = vec![0.0; self.nodes[soft.0].data.len()];
        data[sel] = 1.0;
        let req = self.req(soft);
        Ok(self.push(
            self.nodes[soft.0].shape.clone(),
            data,
            req,
            Op::StraightThrough { soft },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (n×k), computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Value, targets: &[usize]) -> Result<Value> {
        let (n, k) = self.rows_cols(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Dimension {
                what: "cross_entropy",
                expected: format!("{n} targets"),
                got: format!("{}", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Dimension {
                what: "cross_entropy",
                expected: format!("class indices < {k}"),
                got: format!("{t}"),
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.nodes[logits.0].data[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let data = vec![total / n as f64];
        let req = self.req(logits);
        Ok(self.push(
            vec![],
            data,
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of 0/1 `targets` against sigmoid of
    /// `logits` (any shape, one logit per target), stable at large |z|.
    pub fn binary_cross_entropy(&mut self, logits: Value, targets: &[f64]) -> Result<Value> {
        if self.nodes[logits.0].data.len() != targets.len() {
            return Err(Error::Dimension {
                what: "binary_cross_entropy",
                expected: format!("{} targets", self.nodes[logits.0].data.len()),
                got: format!("{}", targets.len()),
            });
        }
        let mut total = 0.0;
        for (&z, &y) in self.nodes[logits.0].data.iter().zip(targets) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let data = vec![total / targets.len() as f64];
        let req = self.req(logits);
        Ok(self.push(
            vec![],
            data,
            req,
            Op::BinaryCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Value, target: &[f64]) -> Result<Value> {
        if self.nodes[pred.0].data.len() != target.len() {
            return Err(Error::Dimension {
                what: "mse_loss",
                expected: format!("{} targets", self.nodes[pred.0].data.len()),
                got: format!("{}", target.len()),
            });
        }
        let n = target.len() as f64;
        let total: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let req = self.req(pred);
        Ok(self.push(
            vec![],
            vec![total / n],
            req,
            Op::MseLoss {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn mae_loss(&mut self, pred: Value, target: &[f64]) -> Result<Value> {
        if self.nodes[pred.0].data.len() != target.len() {
            return Err(Error::Dimension {
                what: "mae_loss",
                expected: format!("{} targets", self.nodes[pred.0].data.len()),
                got: format!("{}", target.len()),
            });
        }
        let n = target.len() as f64;
        let total: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).abs())
            .sum();
        let req = self.req(pred);
        Ok(self.push(
            vec![],
            vec![total / n],
            req,
            Op::MaeLoss {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Indices of maxima along `axis`; ties resolve to the lowest index.
    /// Reads values only — this is not a recorded operation.
    pub fn max_index(&self, x: Value, axis: usize) -> Result<Vec<usize>> {
        let shape = &self.nodes[x.0].shape;
        let (outer, lane, stride) = Self::lanes(shape, axis)?;
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(outer);
        for o in 0..outer {
            let base = if stride == 1 { o * lane } else { o };
            let mut best = 0;
            for l in 1..lane {
                if src[base + l * stride] > src[base + best * stride] {
                    best = l;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    fn add_grad(&mut self, v: Value, contrib: &[f64]) {
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Backpropagate from a scalar `loss`. Gradients accumulate across calls
    /// until the tape is dropped; every `requires_grad` node reachable from
    /// the loss ends up with a gradient.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.nodes[loss.0].data.len(),
            });
        }
        // Seed, then sweep the tape in reverse creation order (a topological
        // order, since operands always precede their results).
        let mut seeds: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        seeds[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = seeds[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.add_grad(Value(idx), &g);
            let op = self.nodes[idx].op.clone();
            let mut send = |slf: &mut Self, v: Value, contrib: Vec<f64>| {
                if !slf.nodes[v.0].requires_grad {
                    return;
                }
                match &mut seeds[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    s @ None => *s = Some(contrib),
                }
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(self, a, g.clone());
                    send(self, b, g);
                }
                Op::Sub(a, b) => {
                    send(self, a, g.clone());
                    send(self, b, g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    send(self, a, da);
                    send(self, b, db);
                }
                Op::AddScalar(a) => send(self, a, g),
                Op::MulScalar(a, c) => send(self, a, g.iter().map(|x| x * c).collect()),
                Op::MulScalarV { x, s } => {
                    let sv = self.nodes[s.0].data[0];
                    let dx: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                    let ds: f64 = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(gi, xi)| gi * xi)
                        .sum();
                    send(self, x, dx);
                    send(self, s, vec![ds]);
                }
                Op::AddRowBroadcast { x, row } => {
                    let c = self.nodes[row.0].data.len();
                    let mut drow = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        drow[i % c] += gi;
                    }
                    send(self, x, g);
                    send(self, row, drow);
                }
                Op::MulRowBroadcast { x, row } => {
                    let c = self.nodes[row.0].data.len();
                    let dx: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * self.nodes[row.0].data[i % c])
                        .collect();
                    let mut drow = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        drow[i % c] += gi * self.nodes[x.0].data[i];
                    }
                    send(self, x, dx);
                    send(self, row, drow);
                }
                Op::MulCol { x, col } => {
                    let r = self.nodes[col.0].data.len();
                    let c = g.len() / r;
                    let dx: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * self.nodes[col.0].data[i / c])
                        .collect();
                    let mut dcol = vec![0.0; r];
                    for (i, gi) in g.iter().enumerate() {
                        dcol[i / c] += gi * self.nodes[x.0].data[i];
                    }
                    send(self, x, dx);
                    send(self, col, dcol);
                }
                Op::Relu(a) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(self, a, dx);
                }
                Op::Sigmoid(a) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    send(self, a, dx);
                }
                Op::Tanh(a) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[idx].data)
                        .map(|(g, &t)| g * (1.0 - t * t))
                        .collect();
                    send(self, a, dx);
                }
                Op::Softmax { x, axis } => {
                    let shape = self.nodes[idx].shape.clone();
                    let (outer, lane, stride) = Self::lanes(&shape, axis)?;
                    let s = &self.nodes[idx].data;
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        let base = if stride == 1 { o * lane } else { o };
                        let mut dot = 0.0;
                        for l in 0..lane {
                            dot += g[base + l * stride] * s[base + l * stride];
                        }
                        for l in 0..lane {
                            let i = base + l * stride;
                            dx[i] = s[i] * (g[i] - dot);
                        }
                    }
                    send(self, x, dx);
                }
                Op::Sum { x, axis } => {
                    let xlen = self.nodes[x.0].data.len();
                    let dx = match axis {
                        None => vec![g[0]; xlen],
                        Some(ax) => {
                            let shape = self.nodes[x.0].shape.clone();
                            let (outer, lane, stride) = Self::lanes(&shape, ax)?;
                            let mut dx = vec![0.0; xlen];
                            for o in 0..outer {
                                let base = if stride == 1 { o * lane } else { o };
                                for l in 0..lane {
                                    dx[base + l * stride] = g[o];
                                }
                            }
                            dx
                        }
                    };
                    send(self, x, dx);
                }
                Op::Mean { x, axis } => {
                    let xlen = self.nodes[x.0].data.len();
                    let dx = match axis {
                        None => {
                            let scale = 1.0 / xlen as f64;
                            vec![g[0] * scale; xlen]
                        }
                        Some(ax) => {
                            let shape = self.nodes[x.0].shape.clone();
                            let (outer, lane, stride) = Self::lanes(&shape, ax)?;
                            let scale = 1.0 / lane as f64;
                            let mut dx = vec![0.0; xlen];
                            for o in 0..outer {
                                let base = if stride == 1 { o * lane } else { o };
                                for l in 0..lane {
                                    dx[base + l * stride] = g[o] * scale;
                                }
                            }
                            dx
                        }
                    };
                    send(self, x, dx);
                }
                Op::Concat { parts, axis } => {
                    if self.nodes[idx].shape.len() == 1 || axis == 0 {
                        let mut off = 0;
                        for p in parts {
                            let len = self.nodes[p.0].data.len();
                            send(self, p, g[off..off + len].to_vec());
                            off += len;
                        }
                    } else {
                        let rows = self.nodes[idx].shape[0];
                        let total_cols = self.nodes[idx].shape[1];
                        let mut col_off = 0;
                        for p in parts {
                            let c = self.nodes[p.0].shape[1];
                            let mut dp = vec![0.0; rows * c];
                            for i in 0..rows {
                                dp[i * c..(i + 1) * c].copy_from_slice(
                                    &g[i * total_cols + col_off..i * total_cols + col_off + c],
                                );
                            }
                            send(self, p, dp);
                            col_off += c;
                        }
                    }
                }
                Op::SliceRow { x, row } => {
                    let c = g.len();
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[row * c..(row + 1) * c].copy_from_slice(&g);
                    send(self, x, dx);
                }
                Op::Slice1d { x, start } => {
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[start..start + g.len()].copy_from_slice(&g);
                    send(self, x, dx);
                }
                Op::Select { x, index } => {
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[index] = g[0];
                    send(self, x, dx);
                }
                Op::GatherRows { x, rows } => {
                    let c = self.nodes[idx].shape[1];
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    for (i, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[i * c + j];
                        }
                    }
                    send(self, x, dx);
                }
                Op::AssembleRows { parts, maps } => {
                    let cols = self.nodes[idx].shape[1];
                    for (p, map) in parts.into_iter().zip(maps) {
                        let mut dp = vec![0.0; map.len() * cols];
                        for (i, &dst) in map.iter().enumerate() {
                            dp[i * cols..(i + 1) * cols]
                                .copy_from_slice(&g[dst * cols..(dst + 1) * cols]);
                        }
                        send(self, p, dp);
                    }
                }
                Op::StackRows { rows } => {
                    let c = self.nodes[idx].shape[1];
                    for (i, r) in rows.into_iter().enumerate() {
                        send(self, r, g[i * c..(i + 1) * c].to_vec());
                    }
                }
                Op::StackSelects { picks } => {
                    for (k, (v, sel_idx)) in picks.into_iter().enumerate() {
                        let mut dv = vec![0.0; self.nodes[v.0].data.len()];
                        dv[sel_idx] = g[k];
                        send(self, v, dv);
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    // dA = G · Bᵀ ; dB = Aᵀ · G
                    let bdat = &self.nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bdat[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    let adat = &self.nodes[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = adat[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    send(self, a, da);
                    send(self, b, db);
                }
                Op::StraightThrough { soft } => {
                    // Hard forward, identity backward.
                    send(self, soft, g);
                }
                Op::CrossEntropy { logits, targets } => {
                    let (n, k) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                    let mut dx = vec![0.0; n * k];
                    let scale = g[0] / n as f64;
                    let mut probs = vec![0.0; k];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &self.nodes[logits.0].data[i * k..(i + 1) * k];
                        softmax_lane(row, &mut probs);
                        for j in 0..k {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            dx[i * k + j] = (probs[j] - indicator) * scale;
                        }
                    }
                    send(self, logits, dx);
                }
                Op::BinaryCrossEntropy { logits, targets } => {
                    let scale = g[0] / targets.len() as f64;
                    let dx: Vec<f64> = self.nodes[logits.0]
                        .data
                        .iter()
                        .zip(&targets)
                        .map(|(&z, &y)| (1.0 / (1.0 + (-z).exp()) - y) * scale)
                        .collect();
                    send(self, logits, dx);
                }
                Op::MseLoss { pred, target } => {
                    let scale = 2.0 * g[0] / target.len() as f64;
                    let dx: Vec<f64> = self.nodes[pred.0]
                        .data
                        .iter()
                        .zip(&target)
                        .map(|(p, t)| (p - t) * scale)
                        .collect();
                    send(self, pred, dx);
                }
                Op::MaeLoss { pred, target } => {
                    let scale = g[0] / target.len() as f64;
                    let dx: Vec<f64> = self.nodes[pred.0]
                        .data
                        .iter()
                        .zip(&target)
                        .map(|(p, t)| {
                            let d = p - t;
                            if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    send(self, pred, dx);
                }
            }
        }
        Ok(())
    }

    /// Route gradients of parameter leaves back into their source tensors,
    /// accumulating into each tensor's `grad` buffer. `params[i]` must be the
    /// tensor that was recorded with `param(_, i)`.
    pub fn accumulate_param_grads(&self, params: &mut [Tensor]) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            let (Some(pi), Some(g)) = (node.origin, grad) else {
                continue;
            };
            let t = &mut params[pi];
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}
