//! Reverse-mode tape over dense tensors.
//!
//! A [`Graph`] lives for one forward pass. Every operation appends a node
//! holding its output value and enough cached state to produce the
//! vector-Jacobian product; [`Graph::backward`] replays the tape in reverse.
//! Parameters enter through [`Graph::param`] and their gradients are
//! written back with [`Gradients::accumulate_into`].

use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Ln,
    Square,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Square => "square",
            Unary::Recip => "recip",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, b: Var },
    Affine { x: Var, scale: f64 },
    Unary { x: Var, kind: Unary },
    Custom { x: Var, deriv: Vec<f64> },
    Sum(Var),
    SumLast(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<Option<usize>> },
    EmbedMean { table: Var, bags: Vec<Vec<usize>> },
    Reshape(Var),
    Conv3x3 { x: Var, w: Var, cols: Vec<f64>, dims: [usize; 4] },
    SelectLast { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, u64, ParamId)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Add parameter gradients into `store`; nodes created from other stores
    /// are skipped. Repeated calls accumulate.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for &(node, uid, id) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(id);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `c = beta*c + op(a) * op(b)` with `op(a)` logically `[m, k]` and
/// `op(b)` logically `[k, n]`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into_scaled(dst: &mut Option<Vec<f64>>, src: &[f64], s: f64) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += s * b;
            }
        }
        None => *dst = Some(src.iter().map(|v| s * v).collect()),
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], len: usize, i: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param {
                store: store.uid(),
                id,
            },
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter value entered as a constant (frozen for this pass).
    pub fn frozen_param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, batched when both operands are rank 3.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = match bv.rank() {
            2 => {
                let (bk, n) = if tb {
                    (bv.shape()[1], bv.shape()[0])
                } else {
                    (bv.shape()[0], bv.shape()[1])
                };
                let k = av.last_dim();
                if k != bk {
                    return Err(dim_err("matmul", av, bv));
                }
                let m = av.rows();
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, av.data(), false, bv.data(), tb, &mut c, 0.0);
                let mut shape = av.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                Tensor::new(&shape, c)?
            }
            3 => {
                if av.rank() != 3 || av.shape()[0] != bv.shape()[0] {
                    return Err(dim_err("matmul", av, bv));
                }
                let batch = av.shape()[0];
                let (m, k) = (av.shape()[1], av.shape()[2]);
                let (bk, n) = if tb {
                    (bv.shape()[2], bv.shape()[1])
                } else {
                    (bv.shape()[1], bv.shape()[2])
                };
                if k != bk {
                    return Err(dim_err("matmul", av, bv));
                }
                let mut c = vec![0.0; batch * m * n];
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        tb,
                        &mut c[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
                Tensor::new(&[batch, m, n], c)?
            }
            _ => return Err(dim_err("matmul", av, bv)),
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, tb }, ng, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    /// Add a `[k]` vector to every row of `x[.., k]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let k = xv.last_dim();
        if bv.len() != k {
            return Err(dim_err("add_row", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(k) {
            for (a, c) in row.iter_mut().zip(bv.data()) {
                *a += c;
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddRow { x, b }, ng, "add_row")
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| scale * v + offset).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Affine { x, scale }, ng, "affine")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Unary { x, kind }, ng, kind.name())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Invalid("ln of non-positive value".into()));
        }
        self.unary(x, Unary::Ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }

    /// User-defined elementwise function with an explicit derivative.
    pub fn custom_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let deriv = xv.data().iter().map(|&v| df(v)).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Custom { x, deriv }, ng, "custom")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis: `[.., k] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let k = xv.last_dim();
        let data: Vec<f64> = xv.data().chunks(k).map(|r| r.iter().sum()).collect();
        let shape = if xv.rank() > 1 {
            xv.shape()[..xv.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        self.push(t, Op::SumLast(x), ng, "sum_last")
    }

    /// Row-wise softmax over the last axis (max-shifted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape(), softmax_rows(xv.data(), xv.last_dim()))?;
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let k = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::LogSoftmax(x), ng, "log_softmax")
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of nothing".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let rows = first.rows();
        let lead = first.shape()[..first.rank() - 1].to_vec();
        let mut width = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows || v.shape()[..v.rank() - 1] != lead[..] {
                return Err(dim_err("concat", first, v));
            }
            width += v.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let t = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(t, Op::Concat(parts.to_vec()), ng, "concat")
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let k = xv.last_dim();
        if start + len > k || len == 0 {
            return Err(Error::Dimension {
                op: "slice_last",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data: Vec<f64> = xv
            .data()
            .chunks(k)
            .flat_map(|r| r[start..start + len].iter().cloned())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        self.push(t, Op::Slice { x, start }, ng, "slice_last")
    }

    /// Row `r` of the output is row `idx[r]` of `x` viewed as `[rows, k]`,
    /// or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let k = xv.last_dim();
        let rows = xv.rows();
        if idx.is_empty() {
            return Err(Error::Invalid("gather_rows with no indices".into()));
        }
        let mut data = vec![0.0; idx.len() * k];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(Error::Invalid(format!("gather_rows index {i} out of {rows}")));
                }
                data[r * k..(r + 1) * k].copy_from_slice(xv.row(i));
            }
        }
        let t = Tensor::new(&[idx.len(), k], data)?;
        let ng = self.ng(x);
        self.push(t, Op::GatherRows { x, idx }, ng, "gather_rows")
    }

    /// Mean of selected rows of `table` per bag: `[bags, k]`.
    pub fn embed_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let k = tv.last_dim();
        let rows = tv.rows();
        if bags.is_empty() {
            return Err(Error::Invalid("embed_mean with no bags".into()));
        }
        let mut data = vec![0.0; bags.len() * k];
        for (r, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::Invalid(format!("embedding bag {r} has no tokens")));
            }
            let inv = 1.0 / bag.len() as f64;
            let out = &mut data[r * k..(r + 1) * k];
            for &i in bag {
                if i >= rows {
                    return Err(Error::Invalid(format!("token id {i} out of vocabulary {rows}")));
                }
                for (o, v) in out.iter_mut().zip(tv.row(i)) {
                    *o += inv * v;
                }
            }
        }
        let t = Tensor::new(&[bags.len(), k], data)?;
        let ng = self.ng(table);
        self.push(t, Op::EmbedMean { table, bags }, ng, "embed_mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Same-padded 3×3 convolution of `x[B, H, W, C]` with `w[9·C, O]`.
    /// Rows of `w` are ordered (dy, dx, c).
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xv.rank() != 4 || wv.rank() != 2 || wv.shape()[0] != 9 * xv.shape()[3] {
            return Err(dim_err("conv3x3", xv, wv));
        }
        let [b, h, wd, c] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let o = wv.shape()[1];
        let cols = im2col3x3(xv.data(), b, h, wd, c);
        let mut out = vec![0.0; b * h * wd * o];
        gemm(b * h * wd, 9 * c, o, &cols, false, wv.data(), false, &mut out, 0.0);
        let t = Tensor::new(&[b, h, wd, o], out)?;
        let ng = self.ng(x) || self.ng(w);
        self.push(
            t,
            Op::Conv3x3 {
                x,
                w,
                cols,
                dims: [b, h, wd, c],
            },
            ng,
            "conv3x3",
        )
    }

    /// `out[r] = x[r, idx[r]]` for `x[R, K]`.
    pub fn select_last(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let k = xv.last_dim();
        if idx.len() != xv.rows() || idx.iter().any(|&i| i >= k) {
            return Err(Error::Dimension {
                op: "select_last",
                lhs: xv.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let data = idx.iter().enumerate().map(|(r, &i)| xv.data()[r * k + i]).collect();
        let t = Tensor::new(&[idx.len()], data)?;
        let ng = self.ng(x);
        self.push(t, Op::SelectLast { x, idx }, ng, "select_last")
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if let Op::Param { store, id } = node.op {
                params.push((i, store, id));
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }

    /// Backward from `loss`, accumulating parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(store);
        Ok(g)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if bv.rank() == 2 {
                    let k = av.last_dim();
                    let m = av.rows();
                    let n = node.value.last_dim();
                    if self.ng(*a) {
                        let da = grad_slot(grads, av.len(), a.0);
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, g, false, bv.data(), !tb, da, 1.0);
                    }
                    if self.ng(*b) {
                        let db = grad_slot(grads, bv.len(), b.0);
                        if *tb {
                            // B is [n, k]: dB = dCᵀ · A
                            gemm(n, m, k, g, true, av.data(), false, db, 1.0);
                        } else {
                            gemm(k, m, n, av.data(), true, g, false, db, 1.0);
                        }
                    }
                } else {
                    let batch = av.shape()[0];
                    let (m, k) = (av.shape()[1], av.shape()[2]);
                    let n = node.value.shape()[2];
                    if self.ng(*a) {
                        let da = grad_slot(grads, av.len(), a.0);
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                !tb,
                                &mut da[i * m * k..(i + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                    if self.ng(*b) {
                        let db = grad_slot(grads, bv.len(), b.0);
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av.data()[i * m * k..(i + 1) * m * k];
                            let dbi = &mut db[i * k * n..(i + 1) * k * n];
                            if *tb {
                                gemm(n, m, k, gi, true, ai, false, dbi, 1.0);
                            } else {
                                gemm(k, m, n, ai, true, gi, false, dbi, 1.0);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    add_into_scaled(&mut grads[b.0], g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.ng(*a) {
                    let d = grad_slot(grads, av.len(), a.0);
                    for ((d, gi), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if self.ng(*b) {
                    let d = grad_slot(grads, bv.len(), b.0);
                    for ((d, gi), x) in d.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::AddRow { x, b } => {
                if self.ng(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.ng(*b) {
                    let k = val(*b).len();
                    let d = grad_slot(grads, k, b.0);
                    for row in g.chunks(k) {
                        for (di, gi) in d.iter_mut().zip(row) {
                            *di += gi;
                        }
                    }
                }
            }
            Op::Affine { x, scale } => add_into_scaled(&mut grads[x.0], g, *scale),
            Op::Unary { x, kind } => {
                let xv = val(*x).data();
                let y = node.value.data();
                let d = grad_slot(grads, xv.len(), x.0);
                for i in 0..xv.len() {
                    d[i] += g[i] * kind.deriv(xv[i], y[i]);
                }
            }
            Op::Custom { x, deriv } => {
                let d = grad_slot(grads, deriv.len(), x.0);
                for i in 0..deriv.len() {
                    d[i] += g[i] * deriv[i];
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let d = grad_slot(grads, n, x.0);
                d.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::SumLast(x) => {
                let xv = val(*x);
                let k = xv.last_dim();
                let d = grad_slot(grads, xv.len(), x.0);
                for (r, row) in d.chunks_mut(k).enumerate() {
                    row.iter_mut().for_each(|v| *v += g[r]);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = node.value.last_dim();
                let d = grad_slot(grads, y.len(), x.0);
                for ((dr, yr), gr) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        dr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let k = node.value.last_dim();
                let d = grad_slot(grads, y.len(), x.0);
                for ((dr, yr), gr) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..k {
                        dr[i] += gr[i] - yr[i].exp() * s;
                    }
                }
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let pk = val(*p).last_dim();
                    if self.ng(*p) {
                        let d = grad_slot(grads, rows * pk, p.0);
                        for r in 0..rows {
                            for c in 0..pk {
                                d[r * pk + c] += g[r * width + off + c];
                            }
                        }
                    }
                    off += pk;
                }
            }
            Op::Slice { x, start } => {
                let xv = val(*x);
                let k = xv.last_dim();
                let len = node.value.last_dim();
                let d = grad_slot(grads, xv.len(), x.0);
                for (r, gr) in g.chunks(len).enumerate() {
                    for c in 0..len {
                        d[r * k + start + c] += gr[c];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let k = xv.last_dim();
                let d = grad_slot(grads, xv.len(), x.0);
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for c in 0..k {
                            d[i * k + c] += g[r * k + c];
                        }
                    }
                }
            }
            Op::EmbedMean { table, bags } => {
                let tv = val(*table);
                let k = tv.last_dim();
                let d = grad_slot(grads, tv.len(), table.0);
                for (r, bag) in bags.iter().enumerate() {
                    let inv = 1.0 / bag.len() as f64;
                    for &i in bag {
                        for c in 0..k {
                            d[i * k + c] += inv * g[r * k + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Conv3x3 { x, w, cols, dims } => {
                let [b, h, wd, c] = *dims;
                let wv = val(*w);
                let o = wv.shape()[1];
                let rows = b * h * wd;
                if self.ng(*w) {
                    let dw = grad_slot(grads, wv.len(), w.0);
                    gemm(9 * c, rows, o, cols, true, g, false, dw, 1.0);
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; rows * 9 * c];
                    gemm(rows, o, 9 * c, g, false, wv.data(), true, &mut dcols, 0.0);
                    let dx = grad_slot(grads, b * h * wd * c, x.0);
                    col2im3x3_add(&dcols, dx, b, h, wd, c);
                }
            }
            Op::SelectLast { x, idx } => {
                let xv = val(*x);
                let k = xv.last_dim();
                let d = grad_slot(grads, xv.len(), x.0);
                for (r, &i) in idx.iter().enumerate() {
                    d[r * k + i] += g[r];
                }
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn im2col3x3(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut cols = vec![0.0; b * h * w * 9 * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (dy * 3 + dx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3_add(cols: &[f64], dx: &mut [f64], b: usize, h: usize, w: usize, c: usize) {
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dxo in 0..3 {
                        let sx = xx as isize + dxo as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (dy * 3 + dxo) * c;
                        for ci in 0..c {
                            dx[dst + ci] += cols[src + ci];
                        }
                    }
                }
            }
        }
    }
}
