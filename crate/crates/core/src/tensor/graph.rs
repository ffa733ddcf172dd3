use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Ln,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    AddBias(Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
fn mm_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// reports a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf that is differentiated.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass for a leaf, `None` when the leaf
    /// was not reachable from the loss or does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
        };
        self.push(value, op)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = mm(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.derived(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let av = self.value(a).values();
        let bv = self.value(b).values();
        if matches!(kind, Binary::Div) && bv.contains(&0.0) {
            return Err(invalid("division by zero"));
        }
        let out: Vec<f64> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// Adds a vector along the trailing dimension of `x`. The vector may be
    /// shaped `[d]` or `[1, d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.value(bias).len() != d {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).values();
        let out: Vec<f64> = self
            .value(x)
            .values()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::AddBias(x, bias), &[x, bias]))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let src = self.value(x).values();
        match kind {
            Unary::Ln if src.iter().any(|&v| v <= 0.0) => {
                return Err(invalid("ln of a non-positive value"))
            }
            Unary::Sqrt if src.iter().any(|&v| v < 0.0) => {
                return Err(invalid("sqrt of a negative value"))
            }
            Unary::Clamp(lo, hi) if !(lo <= hi) => return Err(invalid("clamp bounds out of order")),
            _ => {}
        }
        let out: Vec<f64> = src
            .iter()
            .map(|&v| match kind {
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Relu => v.max(0.0),
                Unary::Gelu => gelu(v),
                Unary::Exp => v.exp(),
                Unary::Ln => v.ln(),
                Unary::Sqrt => v.sqrt(),
                Unary::Scale(s) => v * s,
                Unary::AddScalar(s) => v + s,
                Unary::Clamp(lo, hi) => v.clamp(lo, hi),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::Unary(kind, x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(s), x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().sum();
        Ok(self.derived(vec![1], vec![s], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.values().iter().sum::<f64>() / t.len() as f64;
        Ok(self.derived(vec![1], vec![s], Op::Mean(x), &[x]))
    }

    /// Sums over the trailing dimension: `[.., d] -> [..]` (`[d] -> [1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let out: Vec<f64> = self.value(x).values().chunks(d).map(|c| c.iter().sum()).collect();
        let new_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        Ok(self.derived(new_shape, out, Op::SumLast(x), &[x]))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        let nd = self.shape(x).len();
        if axis >= nd {
            return Err(invalid(format!("{op}: axis {axis} out of range for {nd}-d tensor")));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with the slice maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let out = softmax_values(self.value(x).values(), &shape, axis, false);
        Ok(self.derived(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let shape = self.shape(x).to_vec();
        let out = softmax_values(self.value(x).values(), &shape, axis, true);
        Ok(self.derived(shape, out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes each trailing-dimension row to zero mean and unit variance,
    /// then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let src = self.value(x).values();
        let rows = src.len() / d;
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normalized[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.derived(shape, out, op, &[x, gain, bias]))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(invalid("concat supports axis 0 or 1 of 2-D tensors"));
        }
        let (r0, c0) = self.dims2(inputs[0], "concat")?;
        let mut total = 0;
        for &v in inputs {
            let (r, c) = self.dims2(v, "concat")?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            total += if axis == 0 { r } else { c };
        }
        let (shape, out) = if axis == 0 {
            let out: Vec<f64> = inputs
                .iter()
                .flat_map(|&v| self.value(v).values().iter().copied())
                .collect();
            (vec![total, c0], out)
        } else {
            let mut out = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &v in inputs {
                    out.extend_from_slice(self.value(v).row(i));
                }
            }
            (vec![r0, total], out)
        };
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.derived(shape, out, op, inputs))
    }

    /// Slices a 2-D tensor to `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > extent {
            return Err(invalid(format!(
                "slice {start}..{end} on axis {axis} of shape [{r}, {c}]"
            )));
        }
        let src = self.value(x).values();
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], src[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + end]);
            }
            (vec![r, w], out)
        };
        Ok(self.derived(shape, out, Op::Slice { x, axis, start, end }, &[x]))
    }

    /// Selects rows of a 2-D table, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(invalid("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(invalid(format!("row id {bad} out of range for table with {r} rows")));
        }
        let src = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.derived(vec![ids.len(), c], out, op, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).values().to_vec();
        Ok(self.derived(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// Reverse pass from a single-element loss. Populates the gradient of
    /// every reachable `requires_grad` leaf; unreachable leaves keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.value(loss).requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &gout);
            for (input, delta) in contributions {
                if self.nodes[input.0].value.requires_grad {
                    accumulate(&mut grads[input.0], delta);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[idx].op) {
                self.nodes[idx].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.values();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                let da = mm_bt(gout, val(*b), m, n, k);
                let db = mm_at(val(*a), gout, m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(x) => {
                let (r, c) = (shp(*x)[0], shp(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gout[j * r + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                match kind {
                    Binary::Add => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
                    Binary::Sub => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|g| -g).collect())],
                    Binary::Mul => vec![
                        (*a, gout.iter().zip(bv).map(|(g, y)| g * y).collect()),
                        (*b, gout.iter().zip(av).map(|(g, x)| g * x).collect()),
                    ],
                    Binary::Div => vec![
                        (*a, gout.iter().zip(bv).map(|(g, y)| g / y).collect()),
                        (
                            *b,
                            gout.iter()
                                .zip(av.iter().zip(bv))
                                .map(|(g, (x, y))| -g * x / (y * y))
                                .collect(),
                        ),
                    ],
                }
            }
            Op::AddBias(x, bias) => {
                let d = val(*bias).len();
                let mut db = vec![0.0; d];
                for row in gout.chunks(d) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![(*x, gout.to_vec()), (*bias, db)]
            }
            Op::Unary(kind, x) => {
                let xv = val(*x);
                let yv = node.value.values();
                let dx = gout
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&g, (&x, &y))| {
                        g * match kind {
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(x),
                            Unary::Exp => y,
                            Unary::Ln => 1.0 / x,
                            Unary::Sqrt => 0.5 / y,
                            Unary::Scale(s) => *s,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Clamp(lo, hi) => {
                                if x < *lo || x > *hi {
                                    0.0
                                } else {
                                    1.0
                                }
                            }
                        }
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![gout[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![gout[0] / n as f64; n])]
            }
            Op::SumLast(x) => {
                let d = *shp(*x).last().expect("non-empty shape");
                let dx = gout.iter().flat_map(|&g| std::iter::repeat_n(g, d)).collect();
                vec![(*x, dx)]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(shp(*x), *axis);
                let y = node.value.values();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| gout[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (gout[at(k)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(shp(*x), *axis);
                let y = node.value.values();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let total: f64 = (0..len).map(|k| gout[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = gout[at(k)] - y[at(k)].exp() * total;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let g = val(*gain);
                let d = g.len();
                let mut dx = vec![0.0; gout.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let go = &gout[r * d..(r + 1) * d];
                    let xh = &normalized[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = go[j] * g[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dg[j] += go[j] * xh[j];
                        db[j] += go[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = go[j] * g[j];
                        dx[r * d + j] = is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Concat { inputs, axis } => {
                let mut out = Vec::with_capacity(inputs.len());
                if *axis == 0 {
                    let mut offset = 0;
                    for &v in inputs {
                        let n = val(v).len();
                        out.push((v, gout[offset..offset + n].to_vec()));
                        offset += n;
                    }
                } else {
                    let rows = shp(inputs[0])[0];
                    let total: usize = inputs.iter().map(|&v| shp(v)[1]).sum();
                    let mut col = 0;
                    for &v in inputs {
                        let w = shp(v)[1];
                        let mut dv = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dv.extend_from_slice(&gout[i * total + col..i * total + col + w]);
                        }
                        out.push((v, dv));
                        col += w;
                    }
                }
                out
            }
            Op::Slice { x, axis, start, end } => {
                let (r, c) = (shp(*x)[0], shp(*x)[1]);
                let mut dx = vec![0.0; r * c];
                if *axis == 0 {
                    dx[start * c..end * c].copy_from_slice(gout);
                } else {
                    let w = end - start;
                    for i in 0..r {
                        dx[i * c + start..i * c + end].copy_from_slice(&gout[i * w..(i + 1) * w]);
                    }
                }
                vec![(*x, dx)]
            }
            Op::GatherRows { table, ids } => {
                let c = shp(*table)[1];
                let mut dt = vec![0.0; val(*table).len()];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] += gout[k * c + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::Reshape(x) => vec![(*x, gout.to_vec())],
        }
    }
}

fn softmax_values(src: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|k| (src[at(k)] - max).exp()).sum();
            if log {
                let lse = total.ln();
                for k in 0..len {
                    out[at(k)] = src[at(k)] - max - lse;
                }
            } else {
                for k in 0..len {
                    out[at(k)] = (src[at(k)] - max).exp() / total;
                }
            }
        }
    }
    out
}
