//! Tape-based reverse-mode differentiation.
//!
//! The op set is exactly what the miniature networks need: matmul, add/sub,
//! elementwise products and activations, row broadcasting, gather/concat for
//! lattice assembly, log-softmax, and a custom-gradient scalar node that lets
//! the transducer loss inject its analytic lattice gradient.
//!
//! Values are computed eagerly when a node is appended; `backward` walks the
//! tape in reverse and returns per-parameter gradients keyed by name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{log_softmax, matmul, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(String),
    Const,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Add a row vector to every row of a matrix.
    AddRow(usize, usize),
    /// Multiply every row of a matrix elementwise by a row vector.
    MulRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    Transpose(usize),
    LogSoftmax(usize),
    SumAll(usize),
    /// Scalar output with a caller-supplied gradient w.r.t. one input.
    CustomScalar { input: usize, grad: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-parameter gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    /// Add `grad` into the entry for `name`, inserting if absent.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(g) => {
                *g = g.add(grad)?;
            }
            None => {
                self.map.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }

    /// Elementwise `self += other` across all entries of `other`.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (k, v) in &other.map {
            self.accumulate(k, v)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            *g = g.scale(s);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(Op::Param(name.to_string()), value)
    }

    /// Register a non-trainable constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a.0, b.0), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (mt, rt) = (self.value(m), self.value(row));
        if mt.cols() != rt.len() {
            return Err(Error::Shape(format!(
                "add_row: {} cols vs row of {}",
                mt.cols(),
                rt.len()
            )));
        }
        let mut out = mt.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rt.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(m.0, row.0), out))
    }

    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (mt, rt) = (self.value(m), self.value(row));
        if mt.cols() != rt.len() {
            return Err(Error::Shape(format!(
                "mul_row: {} cols vs row of {}",
                mt.cols(),
                rt.len()
            )));
        }
        let mut out = mt.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rt.data()) {
                *o *= b;
            }
        }
        Ok(self.push(Op::MulRow(m.0, row.0), out))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(Op::Scale(x.0, s), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x.0), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(Op::Sigmoid(x.0), v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp(x.0), v)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(Op::Log(x.0), v)
    }

    pub fn gather_rows(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        let mt = self.value(m);
        let c = mt.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= mt.rows() {
                return Err(Error::Shape(format!(
                    "gather_rows: index {i} out of {} rows",
                    mt.rows()
                )));
            }
            data.extend_from_slice(mt.row(i));
        }
        let v = Tensor::from_vec(&[idx.len(), c], data)?;
        Ok(self.push(Op::GatherRows(m.0, idx.to_vec()), v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: empty input".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::Shape("concat_rows: column mismatch".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(&[rows, c], data)?;
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), v))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rows() != bt.rows() {
            return Err(Error::Shape("concat_cols: row mismatch".into()));
        }
        let (r, ca, cb) = (at.rows(), at.cols(), bt.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(at.row(i));
            data.extend_from_slice(bt.row(i));
        }
        let v = Tensor::from_vec(&[r, ca + cb], data)?;
        Ok(self.push(Op::ConcatCols(a.0, b.0), v))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(Op::Transpose(x.0), v)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = log_softmax(self.value(x));
        self.push(Op::LogSoftmax(x.0), v)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x.0), Tensor::from_vec(&[1], vec![s]).unwrap())
    }

    /// Append a scalar node whose gradient w.r.t. `input` was computed by the
    /// caller. The transducer loss uses this to splice its lattice gradient
    /// into the tape.
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::Shape("custom_scalar: grad shape mismatch".into()));
        }
        if !value.is_finite() {
            return Err(Error::Numeric("custom_scalar: non-finite value".into()));
        }
        Ok(self.push(
            Op::CustomScalar { input: input.0, grad },
            Tensor::from_vec(&[1], vec![value])?,
        ))
    }

    /// Reverse pass from a scalar node; returns gradients for every Param leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(
                "backward: loss node must be scalar".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(&[1], vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Param(_) | Op::Const => {
                    grads[i] = Some(g);
                }
                Op::Matmul(a, b) => {
                    let da = matmul(&g, &self.nodes[*b].value.transpose())?;
                    let db = matmul(&self.nodes[*a].value.transpose(), &g)?;
                    acc(&mut grads, *a, da)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let da = g.mul(&self.nodes[*b].value)?;
                    let db = g.mul(&self.nodes[*a].value)?;
                    acc(&mut grads, *a, da)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::AddRow(m, row) => {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, &v) in dr.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let shape = self.nodes[*row].value.shape().to_vec();
                    acc(&mut grads, *m, g)?;
                    acc(&mut grads, *row, Tensor::from_vec(&shape, dr)?)?;
                }
                Op::MulRow(m, row) => {
                    let mv = &self.nodes[*m].value;
                    let rv = &self.nodes[*row].value;
                    let c = g.cols();
                    let mut dm = g.clone();
                    for r in 0..dm.rows() {
                        for (d, &s) in dm.row_mut(r).iter_mut().zip(rv.data()) {
                            *d *= s;
                        }
                    }
                    let mut dr = vec![0.0; c];
                    for r in 0..g.rows() {
                        for j in 0..c {
                            dr[j] += g.at(r, j) * mv.at(r, j);
                        }
                    }
                    let shape = rv.shape().to_vec();
                    acc(&mut grads, *m, dm)?;
                    acc(&mut grads, *row, Tensor::from_vec(&shape, dr)?)?;
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, *x, g.scale(*s))?;
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let dx = g.mul(&y.map(|t| 1.0 - t * t))?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let dx = g.mul(&y.map(|t| t * (1.0 - t)))?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::Exp(x) => {
                    let dx = g.mul(&self.nodes[i].value)?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::Log(x) => {
                    let dx = g.mul(&self.nodes[*x].value.map(|t| 1.0 / t))?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::GatherRows(m, idx) => {
                    let src = &self.nodes[*m].value;
                    let mut dm = Tensor::zeros(src.shape());
                    for (r, &i_src) in idx.iter().enumerate() {
                        for (d, &v) in dm.row_mut(i_src).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *m, dm)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.rows();
                        let c = g.cols();
                        let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                        let dp = Tensor::from_vec(self.nodes[p].value.shape(), slice)?;
                        acc(&mut grads, p, dp)?;
                        offset += rows;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let r = g.rows();
                    let mut da = Vec::with_capacity(r * ca);
                    let mut db = Vec::with_capacity(r * cb);
                    for row in 0..r {
                        da.extend_from_slice(&g.row(row)[..ca]);
                        db.extend_from_slice(&g.row(row)[ca..]);
                    }
                    acc(
                        &mut grads,
                        *a,
                        Tensor::from_vec(self.nodes[*a].value.shape(), da)?,
                    )?;
                    acc(
                        &mut grads,
                        *b,
                        Tensor::from_vec(self.nodes[*b].value.shape(), db)?,
                    )?;
                }
                Op::Transpose(x) => {
                    acc(&mut grads, *x, g.transpose())?;
                }
                Op::LogSoftmax(x) => {
                    // d/dx_j = g_j - softmax_j * sum_k g_k, per row.
                    let y = &self.nodes[i].value;
                    let c = y.cols();
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for j in 0..c {
                            let p = y.at(r, j).exp();
                            dx.row_mut(r)[j] = g.at(r, j) - p * gsum;
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::SumAll(x) => {
                    let s = g.data()[0];
                    let dx = Tensor::full(self.nodes[*x].value.shape(), s);
                    acc(&mut grads, *x, dx)?;
                }
                Op::CustomScalar { input, grad } => {
                    let s = g.data()[0];
                    acc(&mut grads, *input, grad.scale(s))?;
                }
            }
        }

        let mut out = Gradients::new();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, grad) {
                out.accumulate(name, &g)?;
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => {
            *slot = Some(g);
        }
    }
    Ok(())
}
