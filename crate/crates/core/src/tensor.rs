//! Dense row-major tensors and the forward kernels shared by the graph.
//!
//! Shapes are explicit. The only implicit broadcasting is scalar against
//! tensor; anything else (adding a vector to every row of a matrix, say)
//! is a named operation.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.expect_rank(2, "row")?;
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if i >= rows {
            return Err(Error::Index {
                op: "row",
                index: i,
                len: rows,
            });
        }
        Ok(Tensor::vector(self.data[i * cols..(i + 1) * cols].to_vec()))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(shape_err(op, &self.shape, &vec![0; rank]));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|x| x + c)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Matrix product. `self` must be a matrix; `other` a matrix or a
    /// vector (treated as a column, yielding a vector).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || !(other.rank() == 1 || other.rank() == 2) {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        if other.shape[0] != k {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        if other.rank() == 1 {
            let mut out = vec![0.0; m];
            for (i, o) in out.iter_mut().enumerate() {
                let row = &self.data[i * k..(i + 1) * k];
                *o = dot(row, &other.data);
            }
            return Ok(Tensor::vector(out));
        }
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank(2, "transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Concatenates vectors end to end.
    /// Joins vectors end to end; scalars count as length-1 vectors.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            if p.rank() > 1 {
                return Err(shape_err("concat", &p.shape, &[]));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::vector(data))
    }

    /// Splits a vector into consecutive pieces of the given lengths.
    pub fn split(&self, lens: &[usize]) -> Result<Vec<Tensor>> {
        self.expect_rank(1, "split")?;
        if lens.iter().sum::<usize>() != self.data.len() {
            return Err(shape_err("split", &self.shape, lens));
        }
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &n in lens {
            out.push(Tensor::vector(self.data[start..start + n].to_vec()));
            start += n;
        }
        Ok(out)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor> {
        self.expect_rank(1, "slice")?;
        if len == 0 || start + len > self.data.len() {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                len: self.data.len(),
            });
        }
        Ok(Tensor::vector(self.data[start..start + len].to_vec()))
    }

    pub fn mean_rows(&self) -> Result<Tensor> {
        self.expect_rank(2, "mean_rows")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f64;
        Ok(Tensor::vector(out.into_iter().map(|x| x * inv).collect()))
    }

    /// Adds `row` to every row of the matrix `self`.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || row.rank() != 1 || row.len() != self.shape[1] {
            return Err(shape_err("add_row", &self.shape, &row.shape));
        }
        let n = self.shape[1];
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(n) {
            for (x, &r) in chunk.iter_mut().zip(&row.data) {
                *x += r;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn softmax(&self) -> Result<Tensor> {
        softmax_slice(&self.data).map(Tensor::vector)
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        log_softmax_slice(&self.data).map(Tensor::vector)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
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

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Invalid("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub(crate) fn log_softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Invalid("log_softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log_softmax"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn elementwise_add() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::vector(vec![0.3, -1.5, 2.25]);
        assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn sigmoid_at_zero() {
        let s = Tensor::vector(vec![0.0, 0.0]).sigmoid();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_error_names_operation_and_shapes() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let msg = a.mul(&b).unwrap_err().to_string();
        assert!(msg.contains("mul"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(w.matmul(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn mean_rows_and_add_row() {
        let m = Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        assert_eq!(m.mean_rows().unwrap().data(), &[2.0, 4.0]);
        let r = m.add_row(&Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(r.data(), &[2.0, 2.0, 4.0, 4.0]);
    }

    proptest! {
        #[test]
        fn concat_then_split_is_exact(
            a in prop::collection::vec(-1e6f64..1e6, 1..16),
            b in prop::collection::vec(-1e6f64..1e6, 1..16),
        ) {
            let ta = Tensor::vector(a.clone());
            let tb = Tensor::vector(b.clone());
            let joined = Tensor::concat(&[&ta, &tb]).unwrap();
            let parts = joined.split(&[a.len(), b.len()]).unwrap();
            prop_assert_eq!(&parts[0], &ta);
            prop_assert_eq!(&parts[1], &tb);
        }

        #[test]
        fn matmul_matches_scalar_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let gen = |len: usize, off: u64| -> Vec<f64> {
                (0..len).map(|i| (((i as u64 * 7919 + off * 104729 + seed) % 1000) as f64) / 500.0 - 1.0).collect()
            };
            let a = Tensor::matrix(m, k, gen(m * k, 1)).unwrap();
            let b = Tensor::matrix(k, n, gen(k * n, 2)).unwrap();
            let c = a.matmul(&b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a.data()[i * k + p] * b.data()[p * n + j];
                    }
                    prop_assert!((c.data()[i * n + j] - s).abs() < 1e-12);
                }
            }
        }
    }
}
