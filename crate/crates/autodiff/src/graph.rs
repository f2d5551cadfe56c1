use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::error::{AdError, Result};

pub type Tensor = ArrayD<f64>;

/// Flat gather index meaning "no source; contributes zero".
pub const PAD: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Tanh(usize),
    Relu(usize),
    MatMul(usize, usize),
    Sum(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    Gather(usize, Rc<Vec<usize>>),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    MaskGrad(usize, Rc<Tensor>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run tape. Build a fresh graph per evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(AdError::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

fn unbroadcast(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn as_2d(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("checked 2-d")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.len() != 1 {
            return Err(AdError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(ArrayD::ones(IxDyn(&shape)));

        let acc = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let g = match &nodes[id].op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let val = |i: usize| &*nodes[i].value;
            match &nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, unbroadcast(g.clone(), val(*a).shape()));
                    acc(&mut grads, *b, unbroadcast(g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, unbroadcast(g.clone(), val(*a).shape()));
                    acc(&mut grads, *b, unbroadcast(-g, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, unbroadcast(&g * val(*b), val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, unbroadcast(&g * val(*a), val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, unbroadcast(&g / y, x.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = -(&g * x) / &(y * y);
                        acc(&mut grads, *b, unbroadcast(gb, y.shape()));
                    }
                }
                Op::Neg(a) => acc(&mut grads, *a, -g),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Exp(a) => acc(&mut grads, *a, g * &*nodes[id].value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Powf(a, p) => {
                    let d = val(*a).mapv(|x| p * x.powf(p - 1.0));
                    acc(&mut grads, *a, g * &d);
                }
                Op::Tanh(a) => {
                    let d = nodes[id].value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * &d);
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * &d);
                }
                Op::MatMul(a, b) => {
                    let g2 = as_2d(&g);
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, g2.dot(&as_2d(val(*b)).t()).into_dyn());
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, as_2d(val(*a)).t().dot(&g2).into_dyn());
                    }
                }
                Op::Sum(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    acc(&mut grads, *a, ArrayD::from_elem(val(*a).raw_dim(), s));
                }
                Op::SumAxis(a, axis) => {
                    let shape = val(*a).raw_dim();
                    let e = g.insert_axis(Axis(*axis)).broadcast(shape).expect("reduced axis").to_owned();
                    acc(&mut grads, *a, e);
                }
                Op::Softmax(a, axis) => {
                    let y = &*nodes[id].value;
                    let gy = &g * y;
                    let s = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    acc(&mut grads, *a, gy - &(y * &s));
                }
                Op::Gather(a, idx) => {
                    let src = val(*a);
                    let mut out = vec![0.0; src.len()];
                    let gs = g.as_standard_layout();
                    for (&i, &gv) in idx.iter().zip(gs.iter()) {
                        if i != PAD {
                            out[i] += gv;
                        }
                    }
                    acc(&mut grads, *a, ArrayD::from_shape_vec(src.raw_dim(), out).expect("source shape"));
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0isize;
                    for &p in parts {
                        let len = val(p).shape()[*axis] as isize;
                        if nodes[p].requires_grad {
                            let piece = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                            acc(&mut grads, p, piece);
                        }
                        start += len;
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    let r = g.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&shape)).expect("same size");
                    acc(&mut grads, *a, r);
                }
                Op::MaskGrad(a, mask) => acc(&mut grads, *a, g * &**mask),
            }
        }
        let keep: Vec<Option<Tensor>> = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| if matches!(n.op, Op::Leaf) && n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads: keep })
    }
}

/// Gradients of the root with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros if the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))
    }
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    if t.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AdError::NonFinite(format!("{name} produced a non-finite value")))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Value of a single-element node.
    pub fn item(&self) -> Result<f64> {
        let v = self.value();
        if v.len() != 1 {
            return Err(AdError::ShapeMismatch(format!("expected a scalar, got {:?}", v.shape())));
        }
        Ok(*v.iter().next().expect("one element"))
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(AdError::ShapeMismatch("operands belong to different graphs".into()))
        }
    }

    pub fn add(&self, o: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&o)?;
        let (a, b) = (self.value(), o.value());
        broadcast_shape(a.shape(), b.shape())?;
        Ok(self.binary(o, &*a + &*b, Op::Add(self.id, o.id)))
    }

    pub fn sub(&self, o: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&o)?;
        let (a, b) = (self.value(), o.value());
        broadcast_shape(a.shape(), b.shape())?;
        Ok(self.binary(o, &*a - &*b, Op::Sub(self.id, o.id)))
    }

    pub fn mul(&self, o: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&o)?;
        let (a, b) = (self.value(), o.value());
        broadcast_shape(a.shape(), b.shape())?;
        Ok(self.binary(o, &*a * &*b, Op::Mul(self.id, o.id)))
    }

    pub fn div(&self, o: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&o)?;
        let (a, b) = (self.value(), o.value());
        broadcast_shape(a.shape(), b.shape())?;
        if b.iter().any(|&x| x == 0.0) {
            return Err(AdError::Domain("division by zero".into()));
        }
        Ok(self.binary(o, &*a / &*b, Op::Div(self.id, o.id)))
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(-&*self.value(), Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(&*self.value() * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g>> {
        self.add(self.graph.scalar(c))
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        let v = self.value().mapv(f64::exp);
        check_finite("exp", &v)?;
        Ok(self.unary(v, Op::Exp(self.id)))
    }

    pub fn log(&self) -> Result<Var<'g>> {
        let x = self.value();
        if x.iter().any(|&v| !(v > 0.0)) {
            return Err(AdError::Domain("log of a non-positive value".into()));
        }
        Ok(self.unary(x.mapv(f64::ln), Op::Log(self.id)))
    }

    pub fn powf(&self, p: f64) -> Result<Var<'g>> {
        let x = self.value();
        let integral = p.fract() == 0.0;
        if x.iter().any(|&v| (v < 0.0 && !integral) || (v == 0.0 && p < 1.0 && p != 0.0)) {
            return Err(AdError::Domain(format!("power {p} outside its domain")));
        }
        Ok(self.unary(x.mapv(|v| v.powf(p)), Op::Powf(self.id, p)))
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(self.value().mapv(|v| v * v), Op::Powf(self.id, 2.0))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(self.value().mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(self.value().mapv(|v| v.max(0.0)), Op::Relu(self.id))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, o: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&o)?;
        let (a, b) = (self.value(), o.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(AdError::ShapeMismatch(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let v = as_2d(&a).dot(&as_2d(&b)).into_dyn();
        Ok(self.binary(o, v, Op::MatMul(self.id, o.id)))
    }

    /// `self @ w + b` with `b` broadcast over rows.
    pub fn affine(&self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.matmul(w)?.add(b)
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        let nd = self.value().ndim();
        if axis >= nd {
            return Err(AdError::ShapeMismatch(format!("axis {axis} out of range for rank {nd}")));
        }
        Ok(())
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        let v = self.value().sum_axis(Axis(axis));
        Ok(self.unary(v, Op::SumAxis(self.id, axis)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        let x = self.value();
        let m = x.map_axis(Axis(axis), |l| l.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).insert_axis(Axis(axis));
        let e = (&*x - &m).mapv(f64::exp);
        let s = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Ok(self.unary(e / &s, Op::Softmax(self.id, axis)))
    }

    /// Picks `src.flat[idx[i]]` (standard layout) into an array of `shape`;
    /// [`PAD`] entries read as zero. Gradients scatter back additively.
    pub fn gather(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let src = self.value();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(AdError::ShapeMismatch(format!("{} indices for output shape {shape:?}", idx.len())));
        }
        let flat = src.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            out.push(if i == PAD {
                0.0
            } else {
                *flat.get(i).ok_or_else(|| AdError::ShapeMismatch(format!("gather index {i} out of range")))?
            });
        }
        let v = ArrayD::from_shape_vec(IxDyn(shape), out).expect("checked size");
        Ok(self.unary(v, Op::Gather(self.id, idx)))
    }

    /// Slice `index` of `axis`, removing the axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        let shape = self.shape();
        if index >= shape[axis] {
            return Err(AdError::ShapeMismatch(format!("index {index} out of range on axis {axis}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + index) * inner;
            idx.extend(base..base + inner);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.gather(Rc::new(idx), &out_shape)
    }

    /// Maximum over `axis` with the gradient routed to the first maximiser.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.check_axis(axis)?;
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, len, inner) =
            (shape[..axis].iter().product::<usize>(), shape[axis], shape[axis + 1..].iter().product::<usize>());
        let flat = x.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let mut idx = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for j in 1..len {
                    let cand = (o * len + j) * inner + i;
                    if flat[cand] > flat[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.gather(Rc::new(idx), &out_shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.len() {
            return Err(AdError::ShapeMismatch(format!("reshape {:?} to {shape:?}", x.shape())));
        }
        let v = x.as_standard_layout().into_owned().into_shape_with_order(IxDyn(shape)).expect("checked size");
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Identity forward; backward multiplies the incoming gradient by `mask`.
    pub fn mask_grad(&self, mask: Tensor) -> Result<Var<'g>> {
        let x = self.value();
        if mask.shape() != x.shape() {
            return Err(AdError::ShapeMismatch(format!("mask {:?} vs value {:?}", mask.shape(), x.shape())));
        }
        Ok(self.unary((*x).clone(), Op::MaskGrad(self.id, Rc::new(mask))))
    }

    /// A constant copy cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}

/// Concatenate along `axis`.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| AdError::ShapeMismatch("concat of nothing".into()))?;
    for p in parts {
        first.same_graph(p)?;
    }
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = concatenate(Axis(axis), &views).map_err(|e| AdError::ShapeMismatch(format!("concat: {e}")))?;
    let rg = parts.iter().any(Var::requires_grad);
    Ok(first.graph.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg))
}

/// Indices picked from gradient-free scores, applied under gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetachedSelection {
    pub indices: Vec<usize>,
}

impl DetachedSelection {
    /// The `count` largest entries, descending; ties keep the lower index.
    pub fn top(values: &[f64], count: usize) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        order.truncate(count);
        DetachedSelection { indices: order }
    }

    /// Gathers the selected entries of a 1-D node.
    pub fn gather<'g>(&self, v: Var<'g>) -> Result<Var<'g>> {
        if v.shape().len() != 1 {
            return Err(AdError::ShapeMismatch("detached selection expects a vector".into()));
        }
        v.gather(Rc::new(self.indices.clone()), &[self.indices.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn t(v: &[f64]) -> Tensor {
        arr1(v).into_dyn()
    }

    #[test]
    fn square_derivative() {
        let g = Graph::new();
        let x = g.param(t(&[3.0]));
        let y = x.square().sum();
        assert_eq!(g.backward(y).unwrap().wrt(x), t(&[6.0]));
    }

    #[test]
    fn softmax_two_way() {
        let g = Graph::new();
        let x = g.param(t(&[0.0, 0.0]));
        let s = x.softmax(0).unwrap();
        assert_eq!(*s.value(), t(&[0.5, 0.5]));
        let first = s.select(0, 0).unwrap();
        let gr = g.backward(first).unwrap().wrt(x);
        assert!((gr[[0]] - 0.25).abs() < 1e-15 && (gr[[1]] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gather_scatters_one_hot() {
        let g = Graph::new();
        let x = g.param(t(&[1.0, 2.0, 3.0, 4.0]));
        let y = x.gather(Rc::new(vec![2, PAD]), &[2]).unwrap();
        assert_eq!(*y.value(), t(&[3.0, 0.0]));
        let gr = g.backward(y.sum()).unwrap().wrt(x);
        assert_eq!(gr, t(&[0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn sum_of_leaf_and_chain() {
        let g = Graph::new();
        let x = g.param(t(&[1.0, -2.0, 0.5]));
        assert_eq!(g.backward(x.sum()).unwrap().wrt(x), t(&[1.0, 1.0, 1.0]));
        // d/dx (x^2)^3 = 6 x^5
        let g = Graph::new();
        let x = g.param(t(&[1.5]));
        let y = x.square().powf(3.0).unwrap().sum();
        assert!((g.backward(y).unwrap().wrt(x)[[0]] - 6.0 * 1.5f64.powi(5)).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_root_is_refused() {
        let g = Graph::new();
        let x = g.param(t(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AdError::NonScalarRoot(_))));
    }

    #[test]
    fn domain_and_shape_errors() {
        let g = Graph::new();
        let x = g.param(t(&[0.0, 1.0]));
        assert!(x.log().is_err());
        assert!(g.scalar(1.0).div(x).is_err());
        let y = g.param(t(&[1.0, 2.0, 3.0]));
        assert!(x.add(y).is_err());
        assert!(x.matmul(y).is_err());
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let g = Graph::new();
        let a = g.param(ArrayD::ones(IxDyn(&[3, 2])));
        let b = g.param(t(&[2.0, 5.0]));
        let y = a.mul(b).unwrap().sum();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.wrt(b), t(&[3.0, 3.0]));
        assert_eq!(gr.wrt(a).shape(), &[3, 2]);
    }

    #[test]
    fn max_axis_first_index_on_ties() {
        let g = Graph::new();
        let x = g.param(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 4.0, 4.0, 7.0, 2.0, 7.0]).unwrap());
        let m = x.max_axis(1).unwrap();
        assert_eq!(*m.value(), t(&[4.0, 7.0]));
        let gr = g.backward(m.sum()).unwrap().wrt(x);
        assert_eq!(gr.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_grad_is_identity_forward() {
        let g = Graph::new();
        let x = g.param(t(&[2.0, 3.0]));
        let y = x.mask_grad(t(&[1.0, 0.0])).unwrap();
        assert_eq!(*y.value(), t(&[2.0, 3.0]));
        let gr = g.backward(y.square().sum()).unwrap().wrt(x);
        assert_eq!(gr, t(&[4.0, 0.0]));
    }

    #[test]
    fn concat_and_reshape_round_gradients() {
        let g = Graph::new();
        let a = g.param(t(&[1.0, 2.0]));
        let b = g.param(t(&[3.0]));
        let c = concat(&[a, b], 0).unwrap().reshape(&[3, 1]).unwrap();
        let w = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1]), vec![2.0]).unwrap());
        let y = c.matmul(w).unwrap().sum();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.wrt(a), t(&[2.0, 2.0]));
        assert_eq!(gr.wrt(b), t(&[2.0]));
    }

    #[test]
    fn detached_selection_ignores_unselected() {
        let g = Graph::new();
        let x = g.param(t(&[0.3, 0.9, 0.1, 0.7]));
        let sel = DetachedSelection::top(&x.value().iter().copied().collect::<Vec<_>>(), 2);
        assert_eq!(sel.indices, vec![1, 3]);
        let y = sel.gather(x).unwrap().square().sum();
        let gr = g.backward(y).unwrap().wrt(x);
        assert_eq!(gr, t(&[0.0, 1.8, 0.0, 1.4]));
    }
}
