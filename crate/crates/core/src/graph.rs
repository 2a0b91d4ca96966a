//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only and records every
//! operation applied to its [`Var`]s. Parameter values are never copied
//! into the tape. [`Graph::backward`] replays the tape in reverse and
//! returns gradients aligned with the store, so independent graphs over
//! the same store can run on separate workers.

use crate::error::{shape_err, Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Row(Var, usize),
    Rows(Var, Vec<usize>),
    MeanRows(Var),
    AddRow(Var, Var),
}

struct Node {
    // `None` for parameters: their value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// The graph node for a parameter. Repeated calls return the same node
    /// so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).add_scalar(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("mul_scalar_var", self.value(a).shape(), sv.shape()));
        }
        let out = self.value(a).scale(sv.data()[0]);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalarVar(a, s), rg))
    }

    /// Sums several same-shape nodes left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Invalid("add_all of zero operands".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice(a, start), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(shape_err("softmax", v.shape(), &[]));
        }
        let out = v.softmax()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(shape_err("log_softmax", v.shape(), &[]));
        }
        let out = v.log_softmax()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Selects one entry of a vector as a scalar node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.len() {
            return Err(Error::Index {
                op: "pick",
                index,
                len: v.len(),
            });
        }
        let out = Tensor::scalar(v.data()[index]);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Pick(a, index), rg))
    }

    /// Copies row `i` of a matrix; the gradient flows back into that row.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let out = self.value(a).row(i)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Row(a, i), rg))
    }

    /// Gathers the listed rows into a new matrix.
    pub fn rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || indices.is_empty() {
            return Err(shape_err("rows", v.shape(), &[indices.len()]));
        }
        let cols = v.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= v.shape()[0] {
                return Err(Error::Index {
                    op: "rows",
                    index: i,
                    len: v.shape()[0],
                });
            }
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Rows(a, indices.to_vec()), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_rows()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// `m + 1 rᵀ`: adds the vector `r` to every row of `m`.
    pub fn add_row(&mut self, m: Var, r: Var) -> Result<Var> {
        let out = self.value(m).add_row(self.value(r))?;
        let rg = self.rg(&[m, r]);
        Ok(self.push(out, Op::AddRow(m, r), rg))
    }

    /// Reverse pass from a scalar `loss`. Parameters the loss does not
    /// reach get zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward (loss must be scalar)", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            // Parameter gradients are read back after the sweep.
            if matches!(node.op, Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(self.params.len());
        for id in self.params.ids() {
            let shape = self.params.get(id).shape();
            let t = match self.param_vars[id.0].and_then(|v| grads.get(v.0).cloned().flatten()) {
                Some(data) => Tensor::new(shape.to_vec(), data)?,
                None => Tensor::zeros(shape),
            };
            out.push(t);
        }
        Ok(Grads::from_vec(out))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = || node.value.as_ref().expect("op node has a value").data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &g), &b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddScalar(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::MulScalarVar(a, s) => {
                let sv = self.value(*s).data()[0];
                let av = self.value(*a).data();
                self.acc(grads, *a, |d| axpy(d, g, sv));
                self.acc(grads, *s, |d| d[0] += tensor::dot(g, av));
            }
            Op::MatMul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = if bt.rank() == 1 { 1 } else { bt.shape()[1] };
                let (av, bv) = (at.data(), bt.data());
                // dA = dC · Bᵀ
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            d[i * k + p] += tensor::dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ · dC
                self.acc(grads, *b, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a = av[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            for (dj, &gj) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dj += a * gj;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let shape = self.value(*a).shape();
                let (m, n) = (shape[0], shape[1]);
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |d| axpy(d, &g[start..start + len], 1.0));
                    start += len;
                }
            }
            Op::Slice(a, start) => {
                self.acc(grads, *a, |d| axpy(&mut d[*start..*start + g.len()], g, 1.0));
            }
            Op::Tanh(a) => {
                let yv = y();
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(yv) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = y();
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(yv) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Softmax(a) => {
                let yv = y();
                let gy = tensor::dot(g, yv);
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(yv) {
                        *d += y * (g - gy);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let yv = y();
                let gsum: f64 = g.iter().sum();
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(yv) {
                        *d += g - y.exp() * gsum;
                    }
                });
            }
            Op::Pick(a, i) => self.acc(grads, *a, |d| d[*i] += g[0]),
            Op::Row(a, i) => {
                let cols = g.len();
                self.acc(grads, *a, |d| axpy(&mut d[i * cols..(i + 1) * cols], g, 1.0));
            }
            Op::Rows(a, indices) => {
                let cols = self.value(*a).shape()[1];
                self.acc(grads, *a, |d| {
                    for (j, &i) in indices.iter().enumerate() {
                        axpy(&mut d[i * cols..(i + 1) * cols], &g[j * cols..(j + 1) * cols], 1.0);
                    }
                });
            }
            Op::MeanRows(a) => {
                let shape = self.value(*a).shape();
                let (m, n) = (shape[0], shape[1]);
                let inv = 1.0 / m as f64;
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        axpy(&mut d[i * n..(i + 1) * n], g, inv);
                    }
                });
            }
            Op::AddRow(m, r) => {
                self.acc(grads, *m, |d| axpy(d, g, 1.0));
                let n = self.value(*r).len();
                self.acc(grads, *r, |d| {
                    for chunk in g.chunks(n) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(buf);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn square_sum_gradient() {
        let store = store_with("w", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&store);
        let w = g.param_by_name("w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(store.id("w").unwrap()).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matvec_gradient_is_outer_product() {
        let store = store_with("W", Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let mut g = Graph::new(&store);
        let w = g.param_by_name("W").unwrap();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.get(ParamId(0)).data(),
            &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]
        );
    }

    #[test]
    fn sigmoid_local_gradient_at_zero() {
        let store = store_with("x", Tensor::vector(vec![0.0]));
        let mut g = Graph::new(&store);
        let x = g.param(ParamId(0));
        let s = g.sigmoid(x);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = store_with("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&store);
        let x = g.param(ParamId(0));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_parameters_get_zero() {
        let mut store = store_with("a", Tensor::vector(vec![1.0]));
        store.insert("b", Tensor::vector(vec![5.0, 6.0])).unwrap();
        let mut g = Graph::new(&store);
        let a = g.param(ParamId(0));
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(1)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_and_below_zero() {
        let store = store_with("x", Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let mut g = Graph::new(&store);
        let x = g.param(ParamId(0));
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn repeated_param_lookup_shares_node() {
        let store = store_with("x", Tensor::vector(vec![3.0]));
        let mut g = Graph::new(&store);
        let a = g.param(ParamId(0));
        let b = g.param(ParamId(0));
        assert_eq!(a, b);
    }
}
