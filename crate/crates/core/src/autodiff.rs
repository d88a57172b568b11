//! Define-by-run reverse-mode automatic differentiation over small dense
//! `f64` tensors.
//!
//! A [`Graph`] records every operation as a node. Leaves are created with
//! [`Graph::param`] (trainable, gradients tracked) or [`Graph::constant`].
//! After building a scalar loss, [`Graph::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! ```
//! use iavae::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatVec(Var, Var),
    Concat(Vec<Var>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    Slice(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Expand(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient accumulators produced by one call to [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, mk(a, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `m · v` for `m` of shape `[r, c]` and `v` of shape `[c]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if tm.shape.len() != 2 || tv.shape.len() != 1 || tm.shape[1] != tv.shape[0] {
            return Err(mismatch("matvec", tm, tv));
        }
        let (r, c) = (tm.shape[0], tm.shape[1]);
        let data = (0..r)
            .map(|i| {
                tm.data[i * c..(i + 1) * c]
                    .iter()
                    .zip(&tv.data)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(Tensor::vector(data), Op::MatVec(m, v), rg))
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: t.shape.clone(),
                    rhs: vec![t.len()],
                });
            }
            data.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Rectified linear unit; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[a.0].value.data.iter().find(|&&x| x <= 0.0) {
            return Err(Error::invalid(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    /// Flattened row-major slice `[start, start + len)`, returned as 1-D.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if start + len > t.len() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: t.shape.clone(),
                rhs: vec![start, start + len],
            });
        }
        let value = Tensor::vector(t.data[start..start + len].to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(shape.to_vec(), t.data.clone()).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            lhs: t.shape.clone(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: t.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), rg))
    }

    /// Repeats a one-element tensor into a vector of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let v = t.item().ok_or_else(|| Error::ShapeMismatch {
            op: "expand",
            lhs: t.shape.clone(),
            rhs: vec![1],
        })?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(vec![v; n]), Op::Expand(a), rg))
    }

    /// Reverse pass from a scalar `loss`. Every call starts from fresh
    /// accumulators, so repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            let want = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if want(v) {
                            let ga = acc(&mut grads, v, g.len());
                            ga.iter_mut().zip(&g).for_each(|(s, x)| *s += sign * x);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if want(v) {
                            let ga = acc(&mut grads, v, g.len());
                            ga.iter_mut().zip(&g).for_each(|(s, x)| *s += sign * x);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        let other = &val(*b).data;
                        let ga = acc(&mut grads, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * other[i];
                        }
                    }
                    if want(*b) {
                        let other = &val(*a).data;
                        let gb = acc(&mut grads, *b, g.len());
                        for i in 0..g.len() {
                            gb[i] += g[i] * other[i];
                        }
                    }
                }
                Op::MatVec(m, v) => {
                    let (tm, tv) = (val(*m), val(*v));
                    let (r, c) = (tm.shape[0], tm.shape[1]);
                    if want(*m) {
                        let gm = acc(&mut grads, *m, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                gm[i * c + j] += g[i] * tv.data[j];
                            }
                        }
                    }
                    if want(*v) {
                        let gv = acc(&mut grads, *v, c);
                        for i in 0..r {
                            for j in 0..c {
                                gv[j] += tm.data[i * c + j] * g[i];
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if want(p) {
                            let gp = acc(&mut grads, p, n);
                            gp.iter_mut().zip(&g[off..off + n]).for_each(|(s, x)| *s += x);
                        }
                        off += n;
                    }
                }
                Op::Relu(a) => {
                    let x = &val(*a).data;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value.data;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
                Op::Log(a) => {
                    let x = &val(*a).data;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
                Op::Square(a) => {
                    let x = &val(*a).data;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += 2.0 * x[i] * g[i];
                    }
                }
                Op::Sum(a) => {
                    let n = val(*a).len();
                    acc(&mut grads, *a, n).iter_mut().for_each(|s| *s += g[0]);
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    let share = g[0] / n as f64;
                    acc(&mut grads, *a, n).iter_mut().for_each(|s| *s += share);
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(s, x)| *s += c * x);
                }
                Op::Slice(a, start) => {
                    let n = val(*a).len();
                    let ga = acc(&mut grads, *a, n);
                    ga[*start..*start + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(s, x)| *s += x);
                }
                Op::Reshape(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                }
                Op::Transpose(a) => {
                    // node value is [c, r]; parent is [r, c]
                    let (c, r) = (node.value.shape[0], node.value.shape[1]);
                    let ga = acc(&mut grads, *a, r * c);
                    for j in 0..c {
                        for i in 0..r {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Expand(a) => {
                    let total: f64 = g.iter().sum();
                    acc(&mut grads, *a, 1)[0] += total;
                }
            }
            // leaves keep their accumulated gradient
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape.clone())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
