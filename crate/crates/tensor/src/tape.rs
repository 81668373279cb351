use std::cell::RefCell;

use crate::kernels::{self, ConvGeom};
use crate::tensor::numel;
use crate::{Real, Result, Tensor, TensorError};

/// A user-supplied differentiable operation. The caller computes the forward
/// value and registers it with [`Tape::custom`]; the tape calls back during
/// [`Tape::backward`].
pub trait CustomOp<T: Real> {
    /// Returns one gradient buffer per input, each of the input's length.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Clamp { x: usize, lo: T, hi: T },
    Reshape(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    BatchMatMul(usize, usize),
    TransposeLast2(usize),
    SoftmaxLast(usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run recording of a computation. Build a fresh tape per forward
/// pass; nothing persists between passes.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Records an input that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers an externally computed value with a custom backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var<'t, T>> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(value, Op::Custom { inputs: ids.clone(), op }, &ids))
    }

    fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("variables belong to different tapes".into()))
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(&loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a single-element output, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contrib) in local_grads(&nodes, node, &g) {
                if !nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, or `None` when it does not influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Gradient of `var`, zeros when absent.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).unwrap_or_else(|| {
            let shape = self.shapes[var.id].clone();
            let n = numel(&shape);
            Tensor::from_parts(shape, vec![T::zero(); n])
        })
    }
}

fn local_grads<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let val = |i: usize| &nodes[i].value;
    let need = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()),
                (*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()),
            ]
        }
        Op::Scale(a, s) => vec![(*a, g.iter().map(|&v| v * *s).collect())],
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Mean(a) => {
            let n = val(*a).len();
            vec![(*a, vec![g[0] / T::lit(n as f64); n])]
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            vec![(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x).data();
            vec![(
                *x,
                g.iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect(),
            )]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Conv2d { x, w, b, geom } => {
            let need_b = b.is_some_and(need);
            let grads = kernels::conv2d_backward(
                geom,
                val(*x).data(),
                val(*w).data(),
                g,
                (need(*x), need(*w), need_b),
            );
            let mut out = Vec::new();
            if let Some(gx) = grads.x {
                out.push((*x, gx));
            }
            if let Some(gw) = grads.w {
                out.push((*w, gw));
            }
            if let (Some(b), Some(gb)) = (b, grads.b) {
                out.push((*b, gb));
            }
            out
        }
        Op::AvgPool2(a) => {
            let s = val(*a).shape();
            vec![(*a, kernels::avg_pool2_backward(g, (s[0], s[1], s[2], s[3])))]
        }
        Op::GlobalAvgPool(a) => {
            let s = val(*a).shape();
            let plane = s[2] * s[3];
            let inv = T::lit(1.0 / plane as f64);
            let mut gx = Vec::with_capacity(val(*a).len());
            for &gv in g {
                gx.extend(std::iter::repeat(gv * inv).take(plane));
            }
            vec![(*a, gx)]
        }
        Op::Linear { x, w, b } => {
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let (n, i, o) = (xs[0], xs[1], ws[0]);
            let (xv, wv) = (val(*x).data(), val(*w).data());
            let mut out = Vec::new();
            if need(*x) {
                let mut gx = vec![T::zero(); n * i];
                for r in 0..n {
                    for j in 0..o {
                        let gv = g[r * o + j];
                        for (d, &wj) in gx[r * i..(r + 1) * i].iter_mut().zip(&wv[j * i..(j + 1) * i]) {
                            *d += gv * wj;
                        }
                    }
                }
                out.push((*x, gx));
            }
            if need(*w) {
                let mut gw = vec![T::zero(); o * i];
                for r in 0..n {
                    for j in 0..o {
                        let gv = g[r * o + j];
                        for (d, &xv) in gw[j * i..(j + 1) * i].iter_mut().zip(&xv[r * i..(r + 1) * i]) {
                            *d += gv * xv;
                        }
                    }
                }
                out.push((*w, gw));
            }
            if let Some(b) = b.filter(|&b| need(b)) {
                let mut gb = vec![T::zero(); o];
                for row in g.chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                out.push((b, gb));
            }
            out
        }
        Op::BatchMatMul(a, c) => {
            let (as_, cs) = (val(*a).shape(), val(*c).shape());
            let (batch, m, k, n) = (as_[0], as_[1], as_[2], cs[2]);
            let mut out = Vec::new();
            if need(*a) {
                let ct = kernels::transpose_last2(val(*c).data(), batch, k, n);
                out.push((*a, kernels::bmm_forward(g, &ct, batch, m, n, k)));
            }
            if need(*c) {
                let at = kernels::transpose_last2(val(*a).data(), batch, m, k);
                out.push((*c, kernels::bmm_forward(&at, g, batch, k, m, n)));
            }
            out
        }
        Op::TransposeLast2(a) => {
            let s = val(*a).shape();
            let (batch, rows, cols) = (s[0], s[1], s[2]);
            vec![(*a, kernels::transpose_last2(g, batch, cols, rows))]
        }
        Op::SoftmaxLast(a) => {
            let cols = *val(*a).shape().last().unwrap();
            vec![(*a, kernels::softmax_rows_backward(node.value.data(), g, cols))]
        }
        Op::CrossEntropy { logits, labels } => {
            let k = val(*logits).shape()[1];
            vec![(
                *logits,
                kernels::cross_entropy_backward(val(*logits).data(), labels, k, g[0]),
            )]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            inputs
                .iter()
                .copied()
                .zip(op.backward(&ins, &node.value, g))
                .collect()
        }
    }
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Runs `f` on the stored value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn unary(&self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let value = self.with_value(f)?;
        Ok(self.tape.push(value, op, &[self.id]))
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        self.tape.check_owner(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(value, op, &[self.id, other.id]))
    }

    fn zip_same(a: &Tensor<T>, b: &Tensor<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(mismatch(what, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    fn map(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            Self::zip_same(a, b, "add", |x, y| x + y)
        })
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            Self::zip_same(a, b, "sub", |x, y| x - y)
        })
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            Self::zip_same(a, b, "mul", |x, y| x * y)
        })
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        let s = T::lit(s);
        self.unary(Op::Scale(self.id, s), |a| Ok(Self::map(a, |v| v * s)))
    }

    pub fn sum(&self) -> Result<Self> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.data().iter().copied().sum())))
    }

    pub fn mean(&self) -> Result<Self> {
        self.unary(Op::Mean(self.id), |a| {
            let s: T = a.data().iter().copied().sum();
            Ok(Tensor::scalar(s / T::lit(a.len() as f64)))
        })
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(Op::Relu(self.id), |a| Ok(Self::map(a, |v| v.max(T::zero()))))
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input lies in the
    /// closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Self> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(Op::Clamp { x: self.id, lo, hi }, |a| {
            Ok(Self::map(a, |v| v.max(lo).min(hi)))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.unary(Op::Reshape(self.id), |a| a.clone().reshape(shape))
    }

    /// Stride-1 convolution of an `N×C×H×W` input with an `O×C×k×k` kernel.
    pub fn conv2d(&self, w: Var<'t, T>, b: Option<Var<'t, T>>, pad: usize) -> Result<Self> {
        self.tape.check_owner(&w)?;
        if let Some(b) = &b {
            self.tape.check_owner(b)?;
        }
        let (value, geom) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt) = (&nodes[self.id].value, &nodes[w.id].value);
            let geom = ConvGeom::new(x.shape(), wt.shape(), pad)?;
            let bias = match b {
                Some(b) => {
                    let bt = &nodes[b.id].value;
                    if bt.shape() != [geom.o] {
                        return Err(mismatch("conv2d bias", bt.shape(), &[geom.o]));
                    }
                    Some(bt.data())
                }
                None => None,
            };
            let out = kernels::conv2d_forward(&geom, x.data(), wt.data(), bias);
            (Tensor::from_parts(vec![geom.n, geom.o, geom.oh, geom.ow], out), geom)
        };
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom,
        };
        Ok(self.tape.push(value, op, &parents))
    }

    pub fn avg_pool2(&self) -> Result<Self> {
        self.unary(Op::AvgPool2(self.id), |a| {
            let (n, c, h, w) = a.dims4()?;
            if h < 2 || w < 2 {
                return Err(TensorError::ShapeMismatch(format!(
                    "avg_pool2 needs spatial size >= 2, got {h}x{w}"
                )));
            }
            let out = kernels::avg_pool2_forward(a.data(), (n, c, h, w));
            Ok(Tensor::from_parts(vec![n, c, h / 2, w / 2], out))
        })
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Self> {
        self.unary(Op::GlobalAvgPool(self.id), |a| {
            let (n, c, h, w) = a.dims4()?;
            let inv = T::lit(1.0 / (h * w) as f64);
            let out = a
                .data()
                .chunks(h * w)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            Ok(Tensor::from_parts(vec![n, c], out))
        })
    }

    /// `x[N, I] · w[O, I]ᵀ + b[O]`.
    pub fn linear(&self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Self> {
        self.tape.check_owner(&w)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, wt) = (&nodes[self.id].value, &nodes[w.id].value);
            let (&[n, i], &[o, wi]) = (x.shape(), wt.shape()) else {
                return Err(mismatch("linear expects rank-2 operands", x.shape(), wt.shape()));
            };
            if wi != i {
                return Err(mismatch("linear", x.shape(), wt.shape()));
            }
            let bias = match b {
                Some(b) => {
                    self.tape.check_owner(&b)?;
                    let bt = &nodes[b.id].value;
                    if bt.shape() != [o] {
                        return Err(mismatch("linear bias", bt.shape(), &[o]));
                    }
                    Some(bt.data())
                }
                None => None,
            };
            Tensor::from_parts(vec![n, o], kernels::linear_forward(x.data(), wt.data(), bias, n, i, o))
        };
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        Ok(self.tape.push(value, op, &parents))
    }

    /// Batched matrix product `[B, M, K] · [B, K, N] → [B, M, N]`.
    pub fn bmm(&self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Op::BatchMatMul(self.id, other.id), |a, c| {
            let (&[b1, m, k], &[b2, k2, n]) = (a.shape(), c.shape()) else {
                return Err(mismatch("bmm expects rank-3 operands", a.shape(), c.shape()));
            };
            if b1 != b2 || k != k2 {
                return Err(mismatch("bmm", a.shape(), c.shape()));
            }
            Ok(Tensor::from_parts(
                vec![b1, m, n],
                kernels::bmm_forward(a.data(), c.data(), b1, m, k, n),
            ))
        })
    }

    /// `[B, R, C] → [B, C, R]`.
    pub fn transpose_last2(&self) -> Result<Self> {
        self.unary(Op::TransposeLast2(self.id), |a| {
            let &[b, r, c] = a.shape() else {
                return Err(mismatch("transpose expects rank 3", a.shape(), &[0, 0, 0]));
            };
            Ok(Tensor::from_parts(vec![b, c, r], kernels::transpose_last2(a.data(), b, r, c)))
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Self> {
        self.unary(Op::SoftmaxLast(self.id), |a| {
            let cols = *a.shape().last().unwrap();
            Ok(Tensor::from_parts(a.shape().to_vec(), kernels::softmax_rows(a.data(), cols)))
        })
    }

    /// Mean cross-entropy of `N×K` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let op = Op::CrossEntropy {
            logits: self.id,
            labels: labels.to_vec(),
        };
        self.unary(op, |a| {
            let &[n, k] = a.shape() else {
                return Err(mismatch("cross_entropy expects N×K logits", a.shape(), &[0, 0]));
            };
            if labels.len() != n {
                return Err(TensorError::Contract(format!(
                    "{} labels for {n} rows of logits",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(TensorError::Contract(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            Ok(Tensor::scalar(kernels::cross_entropy_forward(a.data(), labels, k)))
        })
    }
}
