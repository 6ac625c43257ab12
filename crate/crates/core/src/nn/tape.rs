//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output; `backward` walks the nodes
//! in reverse insertion order, which is a valid reverse topological order
//! because a node can only reference earlier nodes.

use rand::Rng;

use super::tensor::{gemm, Gradients, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Param(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(String),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ScaleRows {
        x: Var,
        gates: Var,
    },
    Segment {
        x: Var,
        offsets: Vec<usize>,
        mean: bool,
    },
    LogSoftmax(Var),
    Softmax(Var),
    Exp(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    SumLast(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass over parameters borrowed from a store.
pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node<'p>>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite value produced by {what}"
        )))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!(
            "{what}: expected a matrix, got shape {s:?}"
        ))),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant or differentiable input.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad, "input")
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        self.nodes.push(Node {
            value: Value::Param(t),
            op: Op::Param(name.to_string()),
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `y = x W^T + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = require_2d(xt, "affine input")?;
        let (dout, win) = require_2d(wt, "affine weight")?;
        if win != din || bt.shape() != [dout] {
            return Err(Error::Shape(format!(
                "affine: x {:?}, W {:?}, b {:?}",
                xt.shape(),
                wt.shape(),
                bt.shape()
            )));
        }
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(bt.data());
        }
        gemm(
            n,
            din,
            dout,
            xt.data(),
            (din as isize, 1),
            wt.data(),
            (1, din as isize),
            &mut y,
            true,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::matrix(n, dout, y)?,
            Op::Affine { x, w, b },
            needs,
            "affine",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = map(self.value(x), |v| v.max(0.0));
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs, "relu")
    }

    /// Inverted dropout. With `rng == None` (evaluation) or a zero rate this
    /// is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if mask.len() != xt.len() {
            return Err(Error::Shape(format!(
                "dropout mask has {} entries for {} values",
                mask.len(),
                xt.len()
            )));
        }
        let y = Tensor::new(
            xt.shape().to_vec(),
            xt.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let needs = self.needs(x);
        self.push(y, Op::Dropout { x, mask }, needs, "dropout")
    }

    /// Multiplies row `i` of `x: [n, c]` by `gates[i]`.
    pub fn scale_rows(&mut self, x: Var, gates: Var) -> Result<Var> {
        let (xt, gt) = (self.value(x), self.value(gates));
        let (n, c) = require_2d(xt, "scale_rows input")?;
        if gt.shape() != [n] {
            return Err(Error::Shape(format!(
                "scale_rows: {n} rows but gates of shape {:?}",
                gt.shape()
            )));
        }
        let mut y = xt.data().to_vec();
        for (row, g) in y.chunks_exact_mut(c.max(1)).zip(gt.data()) {
            row.iter_mut().for_each(|v| *v *= g);
        }
        let needs = self.needs(x) || self.needs(gates);
        self.push(
            Tensor::matrix(n, c, y)?,
            Op::ScaleRows { x, gates },
            needs,
            "scale_rows",
        )
    }

    /// Sums (or averages) contiguous row segments of `x: [n, c]`. Segment `s`
    /// covers rows `offsets[s]..offsets[s + 1]`; empty segments give zeros.
    pub fn segment_reduce(&mut self, x: Var, offsets: Vec<usize>, mean: bool) -> Result<Var> {
        let xt = self.value(x);
        let (n, c) = require_2d(xt, "segment input")?;
        if offsets.is_empty()
            || offsets[0] != 0
            || *offsets.last().unwrap() != n
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Shape(format!(
                "segment offsets {offsets:?} do not partition {n} rows"
            )));
        }
        let b = offsets.len() - 1;
        let mut y = vec![0.0; b * c];
        for s in 0..b {
            let out = &mut y[s * c..(s + 1) * c];
            for r in offsets[s]..offsets[s + 1] {
                for (o, v) in out.iter_mut().zip(xt.row(r)) {
                    *o += v;
                }
            }
            let count = offsets[s + 1] - offsets[s];
            if mean && count > 0 {
                let k = 1.0 / count as f64;
                out.iter_mut().for_each(|v| *v *= k);
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::matrix(b, c, y)?,
            Op::Segment { x, offsets, mean },
            needs,
            "segment_reduce",
        )
    }

    /// Row-wise log-softmax of `x: [b, k]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (b, k) = require_2d(xt, "log_softmax input")?;
        let mut y = xt.data().to_vec();
        for row in y.chunks_exact_mut(k.max(1)).take(b) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::matrix(b, k, y)?,
            Op::LogSoftmax(x),
            needs,
            "log_softmax",
        )
    }

    /// Row-wise softmax of `x: [b, k]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (b, k) = require_2d(xt, "softmax input")?;
        let mut y = xt.data().to_vec();
        for row in y.chunks_exact_mut(k.max(1)).take(b) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push(Tensor::matrix(b, k, y)?, Op::Softmax(x), needs, "softmax")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let y = map(self.value(x), f64::exp);
        let needs = self.needs(x);
        self.push(y, Op::Exp(x), needs, "exp")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Mul(a, b), needs, "mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Sub(a, b), needs, "sub")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let y = map(self.value(a), |v| v * k);
        let needs = self.needs(a);
        self.push(y, Op::Scale(a, k), needs, "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let y = map(self.value(a), |v| v * v);
        let needs = self.needs(a);
        self.push(y, Op::Square(a), needs, "square")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs, "sum")
    }

    /// Sums `x: [b, k]` over its last axis, giving `[b]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (b, _) = require_2d(xt, "sum_last input")?;
        let y: Vec<f64> = (0..b).map(|r| xt.row(r).iter().sum()).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b], y)?, Op::SumLast(x), needs, "sum_last")
    }

    /// Picks `x[r, idx[r]]` from every row, giving `[b]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        let (b, k) = require_2d(xt, "gather input")?;
        if idx.len() != b || idx.iter().any(|&i| i >= k) {
            return Err(Error::Shape(format!(
                "gather: {} indices into [{b}, {k}]",
                idx.len()
            )));
        }
        let y: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| xt.row(r)[i]).collect();
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b], y)?,
            Op::Gather { x, idx },
            needs,
            "gather",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = Tensor::new(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        self.push(y, Op::Reshape(x), needs, "reshape")
    }

    /// Activation patterns of every ReLU node, in tape order.
    pub fn relu_patterns(&self) -> Vec<Vec<bool>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > 0.0).collect()),
                _ => None,
            })
            .collect()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }

        let mut params = self.params.zeros_like();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                params.get_mut(name)?.add_assign(g);
            }
        }
        for (name, g) in params.iter() {
            check_finite(g, name)?;
        }
        Ok(Backward {
            node_grads: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node<'_>, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = node.value.get();
        let send = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, din) = (xt.rows(), xt.cols());
                let dout = wt.rows();
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        gy.data(),
                        (dout as isize, 1),
                        wt.data(),
                        (din as isize, 1),
                        &mut dx,
                        false,
                    );
                    send(*x, Tensor::matrix(n, din, dx)?, grads);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        gy.data(),
                        (1, dout as isize),
                        xt.data(),
                        (din as isize, 1),
                        &mut dw,
                        false,
                    );
                    send(*w, Tensor::matrix(dout, din, dw)?, grads);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; dout];
                    for r in 0..n {
                        for (d, g) in db.iter_mut().zip(gy.row(r)) {
                            *d += g;
                        }
                    }
                    send(*b, Tensor::new(vec![dout], db)?, grads);
                }
            }
            Op::Relu(x) => send(
                *x,
                zip_map(gy, y, |g, v| if v > 0.0 { g } else { 0.0 }),
                grads,
            ),
            Op::Dropout { x, mask } => {
                let g = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
                )?;
                send(*x, g, grads);
            }
            Op::ScaleRows { x, gates } => {
                let (xt, gt) = (self.value(*x), self.value(*gates));
                let c = xt.cols();
                if self.needs(*x) {
                    let mut dx = gy.data().to_vec();
                    for (row, g) in dx.chunks_exact_mut(c.max(1)).zip(gt.data()) {
                        row.iter_mut().for_each(|v| *v *= g);
                    }
                    send(*x, Tensor::new(xt.shape().to_vec(), dx)?, grads);
                }
                if self.needs(*gates) {
                    let dg: Vec<f64> = (0..xt.rows())
                        .map(|r| xt.row(r).iter().zip(gy.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*gates, Tensor::new(gt.shape().to_vec(), dg)?, grads);
                }
            }
            Op::Segment { x, offsets, mean } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for s in 0..offsets.len() - 1 {
                    let count = offsets[s + 1] - offsets[s];
                    let k = if *mean && count > 0 {
                        1.0 / count as f64
                    } else {
                        1.0
                    };
                    let g = gy.row(s);
                    for r in offsets[s]..offsets[s + 1] {
                        for (d, v) in dx[r * c..(r + 1) * c].iter_mut().zip(g) {
                            *d = v * k;
                        }
                    }
                }
                send(*x, Tensor::new(xt.shape().to_vec(), dx)?, grads);
            }
            Op::LogSoftmax(x) => {
                let k = y.cols();
                let mut dx = gy.data().to_vec();
                for (r, row) in dx.chunks_exact_mut(k.max(1)).enumerate() {
                    let total: f64 = gy.row(r).iter().sum();
                    for (d, ly) in row.iter_mut().zip(y.row(r)) {
                        *d -= ly.exp() * total;
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), dx)?, grads);
            }
            Op::Softmax(x) => {
                let k = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, row) in dx.chunks_exact_mut(k.max(1)).enumerate() {
                    let dot: f64 = gy.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((d, g), p) in row.iter_mut().zip(gy.row(r)).zip(y.row(r)) {
                        *d = p * (g - dot);
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), dx)?, grads);
            }
            Op::Exp(x) => send(*x, zip_map(gy, y, |g, v| g * v), grads),
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    send(*a, zip_map(gy, bt, |g, v| g * v), grads);
                }
                if self.needs(*b) {
                    send(*b, zip_map(gy, at, |g, v| g * v), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, map(gy, |g| -g), grads);
            }
            Op::Scale(a, k) => send(*a, map(gy, |g| g * k), grads),
            Op::Square(a) => send(*a, zip_map(gy, self.value(*a), |g, v| 2.0 * g * v), grads),
            Op::Sum(a) => {
                let g = gy.data()[0];
                send(*a, Tensor::filled(self.value(*a).shape(), g), grads);
            }
            Op::SumLast(x) => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for (row, g) in dx.chunks_exact_mut(c.max(1)).zip(gy.data()) {
                    row.fill(*g);
                }
                send(*x, Tensor::new(xt.shape().to_vec(), dx)?, grads);
            }
            Op::Gather { x, idx } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for (r, (&i, g)) in idx.iter().zip(gy.data()).enumerate() {
                    dx[r * c + i] = *g;
                }
                send(*x, Tensor::new(xt.shape().to_vec(), dx)?, grads);
            }
            Op::Reshape(x) => {
                let xt = self.value(*x);
                send(
                    *x,
                    Tensor::new(xt.shape().to_vec(), gy.data().to_vec())?,
                    grads,
                );
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Backward {
    node_grads: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Backward {
    /// Gradient with respect to any node that required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients; parameters not reached by the loss are zero.
    pub fn into_params(self) -> Gradients {
        self.params
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
