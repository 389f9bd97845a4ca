use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::fmt;
use std::ops;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::{broadcast_shape, Tensor};
use crate::{Result, TapeError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Node ids are unique integers already; hashing them again is wasted work.
#[derive(Default)]
struct IdHasher(u64);

impl Hasher for IdHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = self.0.rotate_left(8) ^ b as u64;
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
}

type IdMap<V> = HashMap<u64, V, BuildHasherDefault<IdHasher>>;

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    SumTo(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A node in the differentiation graph.
///
/// Nodes are ordered by creation, so a node's inputs always carry smaller ids
/// than the node itself; backward passes simply walk ids in decreasing order.
/// Gradients produced with `create_graph = true` are themselves `Var`s wired
/// into the same graph and can be differentiated again.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl Var {
    fn make(value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().flatten().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node { id: next_id(), value, requires_grad, op }))
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: true, op: Op::Leaf }))
    }

    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: false, op: Op::Leaf }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let v = self.value().zip_with(rhs.value(), |a, b| a + b)?;
        Ok(Var::make(v, Op::Add(self.clone(), rhs.clone())))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let v = self.value().zip_with(rhs.value(), |a, b| a - b)?;
        Ok(Var::make(v, Op::Sub(self.clone(), rhs.clone())))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let v = self.value().zip_with(rhs.value(), |a, b| a * b)?;
        Ok(Var::make(v, Op::Mul(self.clone(), rhs.clone())))
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        let v = self.value().zip_with(rhs.value(), |a, b| a / b)?;
        Ok(Var::make(v, Op::Div(self.clone(), rhs.clone())))
    }

    pub fn neg(&self) -> Var {
        Var::make(self.value().map(|a| -a), Op::Neg(self.clone()))
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::make(self.value().map(|a| a * k), Op::Scale(self.clone(), k))
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        Var::make(self.value().map(|a| a + k), Op::AddScalar(self.clone()))
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let v = self.value().matmul(rhs.value())?;
        Ok(Var::make(v, Op::MatMul(self.clone(), rhs.clone())))
    }

    pub fn t(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Ok(Var::make(v, Op::Transpose(self.clone())))
    }

    pub fn tanh(&self) -> Var {
        Var::make(self.value().map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn exp(&self) -> Var {
        Var::make(self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        Var::make(self.value().map(f64::ln), Op::Log(self.clone()))
    }

    pub fn powf(&self, p: f64) -> Var {
        Var::make(self.value().map(|a| a.powf(p)), Op::Powf(self.clone(), p))
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    pub fn square(&self) -> Var {
        self.mul(self).expect("same shape")
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value().sum_to(shape)?;
        Ok(Var::make(v, Op::SumTo(self.clone())))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value().broadcast_to(shape)?;
        Ok(Var::make(v, Op::BroadcastTo(self.clone())))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self) -> Var {
        self.sum_to(&[]).expect("sum to scalar cannot fail")
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along one axis, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let mut shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TapeError::Shape(format!("axis {axis} of {:?}", self.shape())));
        }
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value().reshape(shape)?;
        Ok(Var::make(v, Op::Reshape(self.clone())))
    }

    /// Flat gather: `out[i] = self[index[i]]`, see [`Tensor::gather`].
    pub fn gather(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let v = self.value().gather(&index, shape)?;
        Ok(Var::make(v, Op::Gather(self.clone(), index)))
    }

    pub fn scatter_add(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let v = self.value().scatter_add(&index, shape)?;
        Ok(Var::make(v, Op::ScatterAdd(self.clone(), index)))
    }

    /// Rows `rows` of the first axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let n = *shape.first().ok_or_else(|| TapeError::Shape("select of scalar".into()))?;
        let inner: usize = shape[1..].iter().product();
        let mut index = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(TapeError::Shape(format!("row {r} out of range {n}")));
            }
            index.extend(r * inner..(r + 1) * inner);
        }
        let mut out = shape.to_vec();
        out[0] = rows.len();
        self.gather(index.into(), &out)
    }
}

impl Op {
    fn parents(&self) -> [Option<&Var>; 2] {
        match self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Neg(a)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => [Some(a), None],
        }
    }
}

/// Vector-Jacobian products of one node, expressed with `Var` operations so
/// that they are differentiable themselves when `create_graph` is set.
fn vjp(out: &Var, g: &Var, create_graph: bool) -> Result<Vec<(Var, Var)>> {
    let k = |v: &Var| if create_graph { v.clone() } else { v.detach() };
    let mut res = Vec::with_capacity(2);
    let mut push = |p: &Var, gp: Var| {
        if p.requires_grad() {
            res.push((p.clone(), gp));
        }
    };
    match &out.0.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push(a, g.sum_to(a.shape())?);
            push(b, g.sum_to(b.shape())?);
        }
        Op::Sub(a, b) => {
            push(a, g.sum_to(a.shape())?);
            push(b, g.neg().sum_to(b.shape())?);
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                push(a, g.mul(&k(b))?.sum_to(a.shape())?);
            }
            if b.requires_grad() {
                push(b, g.mul(&k(a))?.sum_to(b.shape())?);
            }
        }
        Op::Div(a, b) => {
            let bk = k(b);
            if a.requires_grad() {
                push(a, g.div(&bk)?.sum_to(a.shape())?);
            }
            if b.requires_grad() {
                let gb = g.mul(&k(a))?.div(&bk.square())?.neg();
                push(b, gb.sum_to(b.shape())?);
            }
        }
        Op::Neg(a) => push(a, g.neg()),
        Op::MatMul(a, b) => {
            if a.requires_grad() {
                push(a, g.matmul(&k(b).t()?)?);
            }
            if b.requires_grad() {
                push(b, k(a).t()?.matmul(g)?);
            }
        }
        Op::Transpose(a) => push(a, g.t()?),
        Op::Tanh(a) => {
            let y = k(out);
            let d = y.square().neg().add_scalar(1.0);
            push(a, g.mul(&d)?);
        }
        Op::Exp(a) => push(a, g.mul(&k(out))?),
        Op::Log(a) => push(a, g.div(&k(a))?),
        Op::Powf(a, p) => {
            let d = k(a).powf(p - 1.0).scale(*p);
            push(a, g.mul(&d)?);
        }
        Op::Scale(a, c) => push(a, g.scale(*c)),
        Op::AddScalar(a) => push(a, g.clone()),
        Op::SumTo(a) => push(a, g.broadcast_to(a.shape())?),
        Op::BroadcastTo(a) => push(a, g.sum_to(a.shape())?),
        Op::Reshape(a) => push(a, g.reshape(a.shape())?),
        Op::Gather(a, idx) => push(a, g.scatter_add(idx.clone(), a.shape())?),
        Op::ScatterAdd(a, idx) => push(a, g.gather(idx.clone(), a.shape())?),
    }
    Ok(res)
}

/// The same products on plain tensors, for backward passes that do not need
/// a differentiable result.
fn vjp_tensor(out: &Var, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let mut res = Vec::with_capacity(2);
    let mut push = |p: &Var, gp: Tensor| {
        if p.requires_grad() {
            res.push((p.clone(), gp));
        }
    };
    match &out.0.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.requires_grad() {
                push(a, g.sum_to(a.shape())?);
            }
            if b.requires_grad() {
                push(b, g.sum_to(b.shape())?);
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                push(a, g.sum_to(a.shape())?);
            }
            if b.requires_grad() {
                push(b, g.map(|v| -v).sum_to(b.shape())?);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                push(a, g.zip_with(b.value(), |x, y| x * y)?.sum_to(a.shape())?);
            }
            if b.requires_grad() {
                push(b, g.zip_with(a.value(), |x, y| x * y)?.sum_to(b.shape())?);
            }
        }
        Op::Div(a, b) => {
            if a.requires_grad() {
                push(a, g.zip_with(b.value(), |x, y| x / y)?.sum_to(a.shape())?);
            }
            if b.requires_grad() {
                // -g * out / b
                let t = g.zip_with(out.value(), |x, y| x * y)?.zip_with(b.value(), |x, y| -x / y)?;
                push(b, t.sum_to(b.shape())?);
            }
        }
        Op::Neg(a) => push(a, g.map(|v| -v)),
        Op::MatMul(a, b) => {
            if a.requires_grad() {
                push(a, g.matmul_t(b.value())?);
            }
            if b.requires_grad() {
                push(b, a.value().t_matmul(g)?);
            }
        }
        Op::Transpose(a) => push(a, g.transpose()?),
        Op::Tanh(a) => push(a, g.zip_with(out.value(), |x, y| x * (1.0 - y * y))?),
        Op::Exp(a) => push(a, g.zip_with(out.value(), |x, y| x * y)?),
        Op::Log(a) => push(a, g.zip_with(a.value(), |x, y| x / y)?),
        Op::Powf(a, p) => {
            let p = *p;
            push(a, g.zip_with(a.value(), |x, y| x * p * y.powf(p - 1.0))?);
        }
        Op::Scale(a, c) => {
            let c = *c;
            push(a, g.map(|v| v * c));
        }
        Op::AddScalar(a) => push(a, g.clone()),
        Op::SumTo(a) => push(a, g.broadcast_to(a.shape())?),
        Op::BroadcastTo(a) => push(a, g.sum_to(a.shape())?),
        Op::Reshape(a) => push(a, g.reshape(a.shape())?),
        Op::Gather(a, idx) => push(a, g.scatter_add(idx, a.shape())?),
        Op::ScatterAdd(a, idx) => push(a, g.gather(idx, a.shape())?),
    }
    Ok(res)
}

/// Gradients of the scalar `y` with respect to each of `wrt`.
///
/// Inputs that `y` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients stay connected to the graph, which
/// is what differentiating through an optimisation step needs; otherwise
/// they are plain constants.
pub fn grad(y: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    if y.value().len() != 1 {
        return Err(TapeError::Shape(format!(
            "grad needs a scalar output, got shape {:?}",
            y.shape()
        )));
    }
    if !y.requires_grad() {
        return Ok(zeros_like_all(wrt));
    }

    let mut wanted: IdMap<Vec<usize>> = IdMap::default();
    for (i, w) in wrt.iter().enumerate() {
        wanted.entry(w.id()).or_default().push(i);
    }

    // Collect every node that feeds `y` and carries gradient.
    let mut nodes: Vec<Var> = Vec::new();
    let mut seen: IdMap<()> = IdMap::default();
    let mut stack = vec![y.clone()];
    seen.insert(y.id(), ());
    while let Some(v) = stack.pop() {
        for p in v.0.op.parents().into_iter().flatten() {
            if p.requires_grad() && seen.insert(p.id(), ()).is_none() {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    nodes.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    if !create_graph {
        let mut acc: IdMap<Tensor> = IdMap::default();
        acc.insert(y.id(), Tensor::ones(y.shape()));
        let mut out: Vec<Option<Tensor>> = vec![None; wrt.len()];
        for node in &nodes {
            let Some(g) = acc.remove(&node.id()) else { continue };
            if let Some(slots) = wanted.get(&node.id()) {
                for &s in slots {
                    out[s] = Some(g.clone());
                }
            }
            for (parent, gp) in vjp_tensor(node, &g)? {
                let merged = match acc.remove(&parent.id()) {
                    Some(prev) => prev.add_same(&gp)?,
                    None => gp,
                };
                acc.insert(parent.id(), merged);
            }
        }
        return Ok(out
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| Var::constant(g.unwrap_or_else(|| Tensor::zeros(w.shape()))))
            .collect());
    }

    let mut out: Vec<Option<Var>> = vec![None; wrt.len()];
    let mut acc: IdMap<Var> = IdMap::default();
    acc.insert(y.id(), Var::constant(Tensor::ones(y.shape())));
    for node in &nodes {
        let Some(g) = acc.remove(&node.id()) else { continue };
        if let Some(slots) = wanted.get(&node.id()) {
            for &s in slots {
                out[s] = Some(g.clone());
            }
        }
        for (parent, gp) in vjp(node, &g, create_graph)? {
            let merged = match acc.remove(&parent.id()) {
                Some(prev) => prev.add(&gp)?,
                None => gp,
            };
            acc.insert(parent.id(), merged);
        }
    }

    Ok(out
        .into_iter()
        .zip(wrt)
        .map(|(g, w)| g.unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape()))))
        .collect())
}

fn zeros_like_all(wrt: &[Var]) -> Vec<Var> {
    wrt.iter().map(|w| Var::constant(Tensor::zeros(w.shape()))).collect()
}

/// Shape two operands would broadcast to, as an error-returning helper.
pub fn broadcast(a: &Var, b: &Var) -> Result<Vec<usize>> {
    broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TapeError::Shape(format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))
}

macro_rules! binop {
    ($trait:ident, $method:ident, $inner:ident) => {
        impl ops::$trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                self.$inner(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);
binop!(Div, div, div);

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_derivative_of_product() {
        let x = Var::param(Tensor::scalar(3.0));
        let y = Var::param(Tensor::scalar(4.0));
        let f = &x * &y;
        let g = grad(&f, &[x.clone(), y.clone()], false).unwrap();
        assert_eq!(g[0].item(), 4.0);
        assert_eq!(g[1].item(), 3.0);
        assert!(!g[0].requires_grad());
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Var::param(Tensor::scalar(2.0));
        let f = x.powf(3.0);
        let g = grad(&f, &[x.clone()], true).unwrap().remove(0);
        assert!((g.item() - 12.0).abs() < 1e-12);
        let h = grad(&g, &[x.clone()], false).unwrap().remove(0);
        assert!((h.item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn unrelated_input_gets_zero() {
        let x = Var::param(Tensor::vector(&[1.0, 2.0]));
        let z = Var::param(Tensor::vector(&[5.0]));
        let f = x.square().sum();
        let g = grad(&f, &[z], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Var::param(Tensor::scalar(2.0));
        let f = &x.detach() * &x;
        let g = grad(&f, &[x.clone()], false).unwrap();
        assert_eq!(g[0].item(), 2.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Var::param(Tensor::scalar(1.5));
        let f = &(&x * &x) + &x.tanh();
        let g = grad(&f, &[x.clone()], false).unwrap()[0].item();
        let expected = 3.0 + (1.0 - 1.5f64.tanh().powi(2));
        assert!((g - expected).abs() < 1e-14);
    }

    #[test]
    fn constants_do_not_build_graph() {
        let a = Var::constant(Tensor::scalar(1.0));
        let b = &a + &a;
        assert!(!b.requires_grad());
        assert!(matches!(b.0.op, Op::Leaf));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Var::param(Tensor::vector(&[1.0, 2.0]));
        assert!(grad(&x, &[x.clone()], false).is_err());
    }
}
