//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded coarse-grained (one node per matrix product,
//! activation, reduction), which keeps tape overhead negligible next to the
//! arithmetic. A [`Tape`] is single-threaded; run one tape per worker when
//! differentiating many examples in parallel.
//!
//! Model code is written once against [`TensorOps`] and runs either eagerly
//! on `Arc<Tensor>` or traced on [`Var`]. Both paths call the same tensor
//! kernels, so an untraced forward pass is bit-identical to a traced one.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{axpy, Tensor};

/// Operations shared by eager tensors and traced variables.
pub trait TensorOps: Sized + Clone {
    fn value(&self) -> &Tensor;
    fn matmul(&self, rhs: &Self) -> Result<Self>;
    fn add(&self, rhs: &Self) -> Result<Self>;
    fn sub(&self, rhs: &Self) -> Result<Self>;
    fn mul(&self, rhs: &Self) -> Result<Self>;
    fn scale(&self, k: f64) -> Self;
    fn add_scalar(&self, k: f64) -> Self;
    fn relu(&self) -> Self;
    /// Elementwise absolute value; differentiates as `sign(x)` with 0 at 0.
    fn abs(&self) -> Self;
    fn exp(&self) -> Self;
    fn square(&self) -> Self;
    fn log(&self) -> Result<Self>;
    fn softmax(&self) -> Result<Self>;
    fn log_softmax(&self) -> Result<Self>;
    /// Scalar `log Σ exp(x_i)`.
    fn log_sum_exp(&self) -> Result<Self>;
    /// Scalar sum of all entries.
    fn sum(&self) -> Self;
    /// Scalar entry `i` of a vector.
    fn pick(&self, i: usize) -> Result<Self>;
    /// Takes `self` where `mask` is true and `other` elsewhere.
    fn select(&self, other: &Self, mask: &[bool]) -> Result<Self>;
    /// Stacks scalars into a vector.
    fn stack(items: &[Self]) -> Result<Self>;
    /// Replaces the value with a constant carrying no gradient.
    fn detach_to(&self, value: f64) -> Self;
}

fn check_index(t: &Tensor, i: usize) -> Result<()> {
    if t.rank() > 1 || i >= t.len() {
        return Err(Error::usage(format!("index {i} out of range for tensor of shape {:?}", t.shape())));
    }
    Ok(())
}

fn select_values(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<Tensor> {
    a.check_same_shape(b, "select")?;
    if mask.len() != a.len() {
        return Err(Error::dim("select", format!("mask of {} for {} values", mask.len(), a.len())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask)
        .map(|((&x, &y), &m)| if m { x } else { y })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn stack_values<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    for t in items {
        if t.len() != 1 {
            return Err(Error::dim("stack", format!("expected scalars, got shape {:?}", t.shape())));
        }
        data.push(t.data()[0]);
    }
    if data.is_empty() {
        return Err(Error::usage("stack of zero items"));
    }
    Ok(Tensor::vector(data))
}

impl TensorOps for Arc<Tensor> {
    fn value(&self) -> &Tensor {
        self
    }
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        Tensor::matmul(self, rhs).map(Arc::new)
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        Tensor::add(self, rhs).map(Arc::new)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        Tensor::sub(self, rhs).map(Arc::new)
    }
    fn mul(&self, rhs: &Self) -> Result<Self> {
        Tensor::mul(self, rhs).map(Arc::new)
    }
    fn scale(&self, k: f64) -> Self {
        Arc::new(Tensor::scale(self, k))
    }
    fn add_scalar(&self, k: f64) -> Self {
        Arc::new(Tensor::add_scalar(self, k))
    }
    fn relu(&self) -> Self {
        Arc::new(Tensor::relu(self))
    }
    fn abs(&self) -> Self {
        Arc::new(Tensor::abs(self))
    }
    fn exp(&self) -> Self {
        Arc::new(Tensor::exp(self))
    }
    fn square(&self) -> Self {
        Arc::new(Tensor::square(self))
    }
    fn log(&self) -> Result<Self> {
        Tensor::log(self).map(Arc::new)
    }
    fn softmax(&self) -> Result<Self> {
        Tensor::softmax(self).map(Arc::new)
    }
    fn log_softmax(&self) -> Result<Self> {
        Tensor::log_softmax(self).map(Arc::new)
    }
    fn log_sum_exp(&self) -> Result<Self> {
        Tensor::log_sum_exp(self).map(|v| Arc::new(Tensor::scalar(v)))
    }
    fn sum(&self) -> Self {
        Arc::new(Tensor::scalar(Tensor::sum(self)))
    }
    fn pick(&self, i: usize) -> Result<Self> {
        check_index(self, i)?;
        Ok(Arc::new(Tensor::scalar(self.data()[i])))
    }
    fn select(&self, other: &Self, mask: &[bool]) -> Result<Self> {
        select_values(self, other, mask).map(Arc::new)
    }
    fn stack(items: &[Self]) -> Result<Self> {
        stack_values(items.iter().map(|t| t.as_ref())).map(Arc::new)
    }
    fn detach_to(&self, value: f64) -> Self {
        Arc::new(Tensor::scalar(value))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    Exp(usize),
    Square(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Sum(usize),
    Pick(usize, usize),
    Select(usize, usize, Vec<bool>),
    Stack(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended after their inputs, so
/// the node list is already a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: Arc<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.push(value.into(), Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.push(value.into(), Op::Constant, false)
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Arc::clone(&value),
            op,
            requires_grad,
        });
        Var { tape: self, id, value }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(Arc::new(value), op, rg)
    }

    /// Reverse pass from a scalar output. Each recorded node is visited at
    /// most once, in reverse recording order.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::usage("backward: output was not recorded on this tape"));
        }
        if output.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward: output must be scalar, got shape {:?}",
                output.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::full(output.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let push = |target: usize, contribution: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        if bv.rank() == 1 {
                            for i in 0..m {
                                let gi = g.data()[i];
                                if gi != 0.0 {
                                    axpy(gi, bv.data(), &mut ga[i * k..(i + 1) * k]);
                                }
                            }
                        } else {
                            ga = g.matmul(&bv.transpose()?)?.into_data();
                        }
                        push(*a, Tensor::matrix(m, k, ga)?, &mut grads);
                    }
                    if nodes[*b].requires_grad {
                        let gb = if bv.rank() == 1 {
                            let mut gb = vec![0.0; k];
                            for i in 0..m {
                                let gi = g.data()[i];
                                if gi != 0.0 {
                                    axpy(gi, &av.data()[i * k..(i + 1) * k], &mut gb);
                                }
                            }
                            Tensor::vector(gb)
                        } else {
                            av.transpose()?.matmul(&g)?
                        };
                        push(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    push(*a, g.clone(), &mut grads);
                    push(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    push(*b, g.scale(-1.0), &mut grads);
                    push(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&nodes[*b].value)?;
                    let gb = g.mul(&nodes[*a].value)?;
                    push(*a, ga, &mut grads);
                    push(*b, gb, &mut grads);
                }
                Op::Scale(a, k) => push(*a, g.scale(*k), &mut grads),
                Op::AddScalar(a) => push(*a, g, &mut grads),
                Op::Relu(a) => {
                    let gi = g.zip_map(&nodes[*a].value, "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    push(*a, gi, &mut grads);
                }
                Op::Abs(a) => {
                    let gi = g.zip_map(&nodes[*a].value, "abs'", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    push(*a, gi, &mut grads);
                }
                Op::Exp(a) => push(*a, g.mul(&node.value)?, &mut grads),
                Op::Square(a) => {
                    let gi = g.zip_map(&nodes[*a].value, "square'", |g, x| 2.0 * x * g)?;
                    push(*a, gi, &mut grads);
                }
                Op::Log(a) => {
                    let gi = g.zip_map(&nodes[*a].value, "log'", |g, x| g / x)?;
                    push(*a, gi, &mut grads);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let gs: f64 = g.data().iter().zip(s.data()).map(|(g, s)| g * s).sum();
                    let gi = g.zip_map(s, "softmax'", |g, s| s * (g - gs))?;
                    push(*a, gi, &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let total = g.sum();
                    let s = Tensor::exp(&node.value);
                    let gi = g.zip_map(&s, "log_softmax'", |g, s| g - s * total)?;
                    push(*a, gi, &mut grads);
                }
                Op::LogSumExp(a) => {
                    let s = Tensor::softmax(&nodes[*a].value)?;
                    push(*a, s.scale(g.item()), &mut grads);
                }
                Op::Sum(a) => {
                    push(*a, Tensor::full(nodes[*a].value.shape(), g.item()), &mut grads);
                }
                Op::Pick(a, i) => {
                    let mut gi = Tensor::zeros(nodes[*a].value.shape());
                    gi.data_mut()[*i] = g.item();
                    push(*a, gi, &mut grads);
                }
                Op::Select(a, b, mask) => {
                    let ga = g.map_indexed(|i, v| if mask[i] { v } else { 0.0 });
                    let gb = g.map_indexed(|i, v| if mask[i] { 0.0 } else { v });
                    push(*a, ga, &mut grads);
                    push(*b, gb, &mut grads);
                }
                Op::Stack(items) => {
                    for (k, &item) in items.iter().enumerate() {
                        let shape = nodes[item].value.shape().to_vec();
                        let gi = Tensor::new(shape, vec![g.data()[k]])?;
                        push(item, gi, &mut grads);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Tensor {
    fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let data = self.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::usage("operands recorded on different tapes"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.record(value, op, &[self.id])
    }

    fn binary(&self, rhs: &Var<'_>, value: Tensor, op: Op) -> Var<'t> {
        self.tape.record(value, op, &[self.id, rhs.id])
    }
}

impl<'t> TensorOps for Var<'t> {
    fn value(&self) -> &Tensor {
        &self.value
    }
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = Tensor::matmul(&self.value, &rhs.value)?;
        Ok(self.binary(rhs, v, Op::MatMul(self.id, rhs.id)))
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = Tensor::add(&self.value, &rhs.value)?;
        Ok(self.binary(rhs, v, Op::Add(self.id, rhs.id)))
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = Tensor::sub(&self.value, &rhs.value)?;
        Ok(self.binary(rhs, v, Op::Sub(self.id, rhs.id)))
    }
    fn mul(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs)?;
        let v = Tensor::mul(&self.value, &rhs.value)?;
        Ok(self.binary(rhs, v, Op::Mul(self.id, rhs.id)))
    }
    fn scale(&self, k: f64) -> Self {
        self.unary(Tensor::scale(&self.value, k), Op::Scale(self.id, k))
    }
    fn add_scalar(&self, k: f64) -> Self {
        self.unary(Tensor::add_scalar(&self.value, k), Op::AddScalar(self.id))
    }
    fn relu(&self) -> Self {
        self.unary(Tensor::relu(&self.value), Op::Relu(self.id))
    }
    fn abs(&self) -> Self {
        self.unary(Tensor::abs(&self.value), Op::Abs(self.id))
    }
    fn exp(&self) -> Self {
        self.unary(Tensor::exp(&self.value), Op::Exp(self.id))
    }
    fn square(&self) -> Self {
        self.unary(Tensor::square(&self.value), Op::Square(self.id))
    }
    fn log(&self) -> Result<Self> {
        let v = Tensor::log(&self.value)?;
        Ok(self.unary(v, Op::Log(self.id)))
    }
    fn softmax(&self) -> Result<Self> {
        let v = Tensor::softmax(&self.value)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }
    fn log_softmax(&self) -> Result<Self> {
        let v = Tensor::log_softmax(&self.value)?;
        Ok(self.unary(v, Op::LogSoftmax(self.id)))
    }
    fn log_sum_exp(&self) -> Result<Self> {
        let v = Tensor::log_sum_exp(&self.value)?;
        Ok(self.unary(Tensor::scalar(v), Op::LogSumExp(self.id)))
    }
    fn sum(&self) -> Self {
        self.unary(Tensor::scalar(Tensor::sum(&self.value)), Op::Sum(self.id))
    }
    fn pick(&self, i: usize) -> Result<Self> {
        check_index(&self.value, i)?;
        Ok(self.unary(Tensor::scalar(self.value.data()[i]), Op::Pick(self.id, i)))
    }
    fn select(&self, other: &Self, mask: &[bool]) -> Result<Self> {
        self.same_tape(other)?;
        let v = select_values(&self.value, &other.value, mask)?;
        Ok(self.binary(other, v, Op::Select(self.id, other.id, mask.to_vec())))
    }
    fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::usage("stack of zero items"))?;
        for it in items {
            first.same_tape(it)?;
        }
        let v = stack_values(items.iter().map(|t| t.value.as_ref()))?;
        let ids: Vec<usize> = items.iter().map(|t| t.id).collect();
        Ok(first.tape.record(v, Op::Stack(ids.clone()), &ids))
    }
    fn detach_to(&self, value: f64) -> Self {
        self.tape.constant(Tensor::scalar(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).item(), 6.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let loss = z.log_softmax().unwrap().pick(0).unwrap().scale(-1.0);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&z).data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_foreign_or_vector_output() {
        let a = Tape::new();
        let b = Tape::new();
        let x = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.backward(&x), Err(Error::Usage(_))));
        let v = a.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(a.backward(&v), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = w.matmul(&x).unwrap().sum();
        let g = tape.backward(&y).unwrap();
        assert!(g.get(&x).is_none());
        assert_eq!(g.wrt(&w).data(), &[3.0, 4.0]);
    }

    /// Loss through every differentiable op, as a function of two leaves.
    fn composite<T: TensorOps>(w: &T, x: &T) -> Result<T> {
        let h = w.matmul(x)?; // [3]
        let a = h.relu().add(&h.abs().scale(0.3))?;
        let b = a.exp().scale(0.1).add_scalar(1.0).log()?;
        let c = b.mul(&h)?.sub(&a.square().scale(0.05))?;
        let s = c.softmax()?.add(&c.log_softmax()?.scale(0.2))?;
        let mask = [true, false, true];
        let sel = s.select(&c, &mask)?;
        let parts = [sel.pick(0)?, sel.pick(2)?.scale(2.0), sel.sum()];
        T::stack(&parts)?.log_sum_exp()?.add(&c.pick(1)?)
    }

    #[test]
    fn reverse_mode_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let wv: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let xv: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tape = Tape::new();
            let w = tape.leaf(Tensor::matrix(3, 4, wv.clone()).unwrap());
            let x = tape.leaf(Tensor::vector(xv.clone()));
            let out = composite(&w, &x).unwrap();
            let g = tape.backward(&out).unwrap();

            let eval = |wv: &[f64], xv: &[f64]| {
                let w = Arc::new(Tensor::matrix(3, 4, wv.to_vec()).unwrap());
                let x = Arc::new(Tensor::vector(xv.to_vec()));
                composite(&w, &x).unwrap().item()
            };
            let h = 1e-5;
            let check = |analytic: f64, numeric: f64| {
                let scale = analytic.abs().max(numeric.abs()).max(1e-3);
                assert!((analytic - numeric).abs() / scale < 1e-4, "analytic {analytic} numeric {numeric}");
            };
            for i in 0..wv.len() {
                let (mut p, mut m) = (wv.clone(), wv.clone());
                p[i] += h;
                m[i] -= h;
                check(g.wrt(&w).data()[i], (eval(&p, &xv) - eval(&m, &xv)) / (2.0 * h));
            }
            for i in 0..xv.len() {
                let (mut p, mut m) = (xv.clone(), xv.clone());
                p[i] += h;
                m[i] -= h;
                check(g.wrt(&x).data()[i], (eval(&wv, &p) - eval(&wv, &m)) / (2.0 * h));
            }
        }
    }

    #[test]
    fn traced_and_eager_values_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wv: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xv: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let traced = composite(
            &tape.leaf(Tensor::matrix(3, 4, wv.clone()).unwrap()),
            &tape.constant(Tensor::vector(xv.clone())),
        )
        .unwrap();
        let eager = composite(&Arc::new(Tensor::matrix(3, 4, wv).unwrap()), &Arc::new(Tensor::vector(xv))).unwrap();
        assert_eq!(traced.value().item().to_bits(), eager.value().item().to_bits());
    }
}
