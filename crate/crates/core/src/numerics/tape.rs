//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in evaluation order. [`Tape::backward`]
//! walks the record in reverse and returns [`Gradients`] for every node that
//! depends on a leaf created with `requires_grad`. A tape belongs to a single
//! forward/backward pass; build a fresh one per training step.

use crate::error::{Error, Result};

use super::tensor::{axis_extents, matmul, softmax, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r, c] + [c]` broadcast over rows.
    AddRow(Var, Var),
    /// `[r, c] * [r, 1]` broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Log(Var),
    Softmax(Var, usize),
    /// Row-wise normalisation; keeps `1 / std` per row for the backward pass.
    LayerNorm(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// `a · bᵀ`, the row-token form of applying a weight `b` to inputs `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (r, c) = av.dims2()?;
        if bv.len() != c {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (r, c) = av.dims2()?;
        if cv.len() != r {
            return Err(shape_err("mul_col", av, cv));
        }
        let mut out = av.data().to_vec();
        for i in 0..r {
            let g = cv.data()[i];
            for o in &mut out[i * c..(i + 1) * c] {
                *o *= g;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(a), axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// Normalises each row of a matrix to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LayerNorm(a, inv_std), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.dims2()?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), v));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Single column `col` of a matrix as an `[r, 1]` matrix.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if col >= c {
            return Err(Error::shape(format!("column {col} of matrix with {c} columns")));
        }
        let data = (0..r).map(|i| av.data()[i * c + col]).collect();
        let value = Tensor::new(vec![r, 1], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, col), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Column means of a matrix as a `[1, c]` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&av.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let value = Tensor::new(vec![1, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanRows(a), rg))
    }

    /// Mean of squared differences between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&contrib, 1.0),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, matmul(g, &self.value(*b).transpose()?)?)?;
                }
                if needs(*b) {
                    acc(*b, matmul(&self.value(*a).transpose()?, g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.mul(self.value(*b))?)?;
                }
                if needs(*b) {
                    acc(*b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone())?;
                if needs(*bias) {
                    let (r, c) = g.dims2()?;
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for (o, &v) in gb.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::MulCol(a, col) => {
                let (r, c) = g.dims2()?;
                let cv = self.value(*col);
                if needs(*a) {
                    let mut ga = g.data().to_vec();
                    for i in 0..r {
                        for o in &mut ga[i * c..(i + 1) * c] {
                            *o *= cv.data()[i];
                        }
                    }
                    acc(*a, Tensor::new(vec![r, c], ga)?)?;
                }
                if needs(*col) {
                    let av = self.value(*a);
                    let gc = (0..r)
                        .map(|i| (0..c).map(|j| g.data()[i * c + j] * av.data()[i * c + j]).sum())
                        .collect();
                    acc(*col, Tensor::new(cv.shape().to_vec(), gc)?)?;
                }
            }
            Op::Scale(a, f) => acc(*a, g.scale(*f))?,
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect(),
                )?;
                acc(*a, ga)?;
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect(),
                )?;
                acc(*a, ga)?;
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_extents(y.shape(), *axis)?;
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                        for k in 0..len {
                            ga[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), ga)?)?;
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let yy = &y.data()[i * c..(i + 1) * c];
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[i * c + j] = inv_std[i] * (gy[j] - mean_g - yy[j] * mean_gy);
                    }
                }
                acc(*a, Tensor::new(vec![r, c], ga)?)?;
            }
            Op::ConcatRows(parts) => {
                let cols = g.dims2()?.1;
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).dims2()?.0;
                    acc(*p, g.slice_rows(offset, offset + rows)?)?;
                    debug_assert_eq!(self.value(*p).dims2()?.1, cols);
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let (_, c) = src.dims2()?;
                let mut ga = Tensor::zeros(src.shape());
                let n = g.len();
                ga.data_mut()[start * c..start * c + n].copy_from_slice(g.data());
                acc(*a, ga)?;
            }
            Op::SliceCols(a, col) => {
                let src = self.value(*a);
                let (r, c) = src.dims2()?;
                let mut ga = Tensor::zeros(src.shape());
                for i in 0..r {
                    ga.data_mut()[i * c + col] = g.data()[i];
                }
                acc(*a, ga)?;
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                acc(*a, Tensor::full(src.shape(), g.item()))?;
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                acc(*a, Tensor::full(src.shape(), g.item() / src.len() as f64))?;
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let (r, c) = src.dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                acc(*a, Tensor::new(vec![r, c], ga)?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(w, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::zeros(&[2, 2]), true);
        let y = t.scale(w, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let w = t.leaf(Tensor::from_rows(&[&[0.5], &[-1.0]]).unwrap(), true);
        let y = t.matmul(c, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_var_accumulates() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(&[1.0, -2.0]), true);
        let a = t.scale(w, 3.0);
        let b = t.add(a, w).unwrap();
        let s = t.sum(b);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 4.0]);
    }
}
