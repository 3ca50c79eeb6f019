use std::cell::RefCell;

use super::tensor::{broadcast_index_map, broadcast_shape};
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum { a: usize, axis: usize },
    Mean { a: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Narrow { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Conv2d { x: usize, w: usize, pad: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Relu(usize),
    Silu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Clamp { a: usize, min: f64, max: f64 },
    Softmax(usize),
    SoftmaxCrossEntropy { logits: usize, target: Tensor, probs: Tensor },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_ran: bool,
}

/// Records operations in creation order; node ids are topologically sorted
/// by construction.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, requires_grad, op });
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.inner.borrow(), |i| &i.nodes[id].value)
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn record(&self, op_name: &'static str, value: Tensor, operands: &[usize], op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let rg = self.requires_grad(operands);
        Ok(self.push(value, rg, op))
    }

    /// Gradient of the last backward pass with respect to `var`, if one was
    /// written.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(inner.nodes[var.id].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.backward_ran = false;
    }

    /// Accumulates d(loss)/d(node) into every `requires_grad` node that
    /// `loss` depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        if inner.backward_ran {
            return Err(AutodiffError::BackwardTwice);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(AutodiffError::NonScalar(loss_shape));
        }
        inner.backward_ran = true;
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if inner.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
            for id in (0..=loss.id).rev() {
                if let Some(g) = grads[id].take() {
                    propagate(&inner.nodes, id, &g, &mut grads);
                    grads[id] = Some(g);
                }
            }
        }
        inner.grads = grads;
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a gradient laid out in `out_shape` back down to a broadcast
/// operand of shape `src`.
fn reduce_to(src: &[usize], out_shape: &[usize], g: &[f64], scale: impl Fn(usize) -> f64) -> Vec<f64> {
    let n: usize = src.iter().product();
    if src == out_shape {
        return g.iter().enumerate().map(|(i, v)| v * scale(i)).collect();
    }
    let map = broadcast_index_map(src, out_shape);
    let mut out = vec![0.0; n];
    for (i, &m) in map.iter().enumerate() {
        out[m] += g[i] * scale(i);
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ga = reduce_to(val(*a).shape(), out.shape(), g, |_| 1.0);
            let gb = reduce_to(val(*b).shape(), out.shape(), g, |_| 1.0);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Sub(a, b) => {
            let ga = reduce_to(val(*a).shape(), out.shape(), g, |_| 1.0);
            let gb = reduce_to(val(*b).shape(), out.shape(), g, |_| -1.0);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let ma = broadcast_index_map(ta.shape(), out.shape());
            let mb = broadcast_index_map(tb.shape(), out.shape());
            let (da, db) = (ta.data(), tb.data());
            let is_div = matches!(nodes[id].op, Op::Div(..));
            if nodes[*a].requires_grad {
                let ga = if is_div {
                    reduce_to(ta.shape(), out.shape(), g, |i| 1.0 / db[mb[i]])
                } else {
                    reduce_to(ta.shape(), out.shape(), g, |i| db[mb[i]])
                };
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = if is_div {
                    reduce_to(tb.shape(), out.shape(), g, |i| -da[ma[i]] / (db[mb[i]] * db[mb[i]]))
                } else {
                    reduce_to(tb.shape(), out.shape(), g, |i| da[ma[i]])
                };
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if nodes[*a].requires_grad {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; m * k];
                let bd = tb.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * n];
                let ad = ta.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sum { a, axis } | Op::Mean { a, axis } => {
            let src = val(*a);
            let (outer, len, inner) = split_axis(src.shape(), *axis);
            let scale = if matches!(nodes[id].op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
            let mut ga = vec![0.0; src.numel()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        ga[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::MeanAll(a) => {
            let n = val(*a).numel();
            accumulate(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::Narrow { a, axis, start } => {
            let src = val(*a);
            let (outer, len, inner) = split_axis(src.shape(), *axis);
            let w = out.shape()[*axis];
            let mut ga = vec![0.0; src.numel()];
            for o in 0..outer {
                for l in 0..w {
                    let s = (o * len + start + l) * inner;
                    let d = (o * w + l) * inner;
                    ga[s..s + inner].copy_from_slice(&g[d..d + inner]);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[*axis];
                if nodes[p].requires_grad {
                    let mut gp = vec![0.0; val(p).numel()];
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        let d = o * w * inner;
                        gp[d..d + w * inner].copy_from_slice(&g[s..s + w * inner]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += w;
            }
        }
        Op::Conv2d { x, w, pad } => {
            let (tx, tw) = (val(*x), val(*w));
            let (gx, gw) = conv2d_backward(tx, tw, *pad, out.shape(), g);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *w, gw);
        }
        Op::MaxPool2d { x, argmax } => {
            let mut gx = vec![0.0; val(*x).numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Relu(a) => {
            let d = val(*a).data();
            accumulate(nodes, grads, *a, g.iter().zip(d).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
        }
        Op::Silu(a) => {
            let d = val(*a).data();
            let ga = g
                .iter()
                .zip(d)
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        Op::Log(a) => accumulate(nodes, grads, *a, g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect()),
        Op::Square(a) => {
            accumulate(nodes, grads, *a, g.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * x * g).collect())
        }
        Op::Sqrt(a) => {
            accumulate(nodes, grads, *a, g.iter().zip(out.data()).map(|(g, y)| g / (2.0 * y)).collect())
        }
        Op::Clamp { a, min, max } => {
            let ga = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x >= *min && *x <= *max { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax(a) => {
            let k = *out.shape().last().unwrap();
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for r in 0..y.len() / k {
                let row = r * k..(r + 1) * k;
                let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                for i in row {
                    ga[i] = y[i] * (g[i] - dot);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SoftmaxCrossEntropy { logits, target, probs } => {
            let k = *probs.shape().last().unwrap();
            let rows = probs.numel() / k;
            let (p, t) = (probs.data(), target.data());
            let mut ga = vec![0.0; p.len()];
            for r in 0..rows {
                let row = r * k..(r + 1) * k;
                let mass: f64 = t[row.clone()].iter().sum();
                for i in row {
                    ga[i] = g[0] * (p[i] * mass - t[i]) / rows as f64;
                }
            }
            accumulate(nodes, grads, *logits, ga);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Option<(usize, usize)> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if hp < kh || wp < kw {
        return None;
    }
    Some((hp - kh + 1, wp - kw + 1))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (oh, ow) = conv_out_dims(h, wd, kh, kw, pad).unwrap();
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            let obase = (bi * o + oc) * oh * ow;
            for ic in 0..c {
                let xbase = (bi * c + ic) * h * wd;
                let wbase = (oc * c + ic) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[wbase + ki * kw + kj];
                        for oi in 0..oh {
                            let ii = oi + ki;
                            if ii < pad || ii - pad >= h {
                                continue;
                            }
                            let xrow = xbase + (ii - pad) * wd;
                            let orow = obase + oi * ow;
                            for oj in 0..ow {
                                let jj = oj + kj;
                                if jj < pad || jj - pad >= wd {
                                    continue;
                                }
                                out[orow + oj] += wv * xd[xrow + jj - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, o, oh, ow], out).unwrap()
}

fn conv2d_backward(x: &Tensor, w: &Tensor, pad: usize, out_shape: &[usize], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (xd, wdat) = (x.data(), w.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for bi in 0..b {
        for oc in 0..o {
            let obase = (bi * o + oc) * oh * ow;
            for ic in 0..c {
                let xbase = (bi * c + ic) * h * wd;
                let wbase = (oc * c + ic) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[wbase + ki * kw + kj];
                        let mut acc = 0.0;
                        for oi in 0..oh {
                            let ii = oi + ki;
                            if ii < pad || ii - pad >= h {
                                continue;
                            }
                            let xrow = xbase + (ii - pad) * wd;
                            let orow = obase + oi * ow;
                            for oj in 0..ow {
                                let jj = oj + kj;
                                if jj < pad || jj - pad >= wd {
                                    continue;
                                }
                                let gv = g[orow + oj];
                                acc += gv * xd[xrow + jj - pad];
                                gx[xrow + jj - pad] += gv * wv;
                            }
                        }
                        gw[wbase + ki * kw + kj] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).data()[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::invalid("binary op", "operands live on different tapes".into()))
        }
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
                Tensor::new(&shape, data)?
            } else {
                let (ma, mb) = (broadcast_index_map(a.shape(), &shape), broadcast_index_map(b.shape(), &shape));
                let (da, db) = (a.data(), b.data());
                let data = ma.iter().zip(&mb).map(|(i, j)| f(da[*i], db[*j])).collect();
                Tensor::new(&shape, data)?
            }
        };
        self.tape.record(name, value, &[self.id, other.id], op)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let value = self.tape.value_of(self.id).map(f);
        self.tape.record(name, value, &[self.id], op)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar(self.id))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(AutodiffError::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(&[m, n], out)?
        };
        self.tape.record("matmul", value, &[self.id, other.id], Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if a.ndim() != 2 {
                return Err(AutodiffError::invalid("transpose", format!("needs 2-D input, got {:?}", a.shape())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let d = a.data();
            Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r])
        };
        self.tape.record("transpose", value, &[self.id], Op::Transpose(self.id))
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let name = if mean { "mean" } else { "sum" };
        let value = {
            let a = self.tape.value_of(self.id);
            if axis >= a.ndim() {
                return Err(AutodiffError::invalid(name, format!("axis {axis} out of range for {:?}", a.shape())));
            }
            let (outer, len, inner) = split_axis(a.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let d = a.data();
            for o in 0..outer {
                for l in 0..len {
                    let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape: Vec<usize> = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(&shape, out)?
        };
        let op = if mean { Op::Mean { a: self.id, axis } } else { Op::Sum { a: self.id, axis } };
        self.tape.record(name, value, &[self.id], op)
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, dropping it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s: f64 = self.tape.value_of(self.id).data().iter().sum();
        self.tape.record("sum", Tensor::scalar(s), &[self.id], Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let s = {
            let a = self.tape.value_of(self.id);
            a.data().iter().sum::<f64>() / a.numel() as f64
        };
        self.tape.record("mean", Tensor::scalar(s), &[self.id], Op::MeanAll(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value_of(self.id).reshaped(shape)?;
        self.tape.record("reshape", value, &[self.id], Op::Reshape(self.id))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if axis >= a.ndim() || len == 0 || start + len > a.shape()[axis] {
                return Err(AutodiffError::invalid(
                    "narrow",
                    format!("range {start}..{} on axis {axis} of {:?}", start + len, a.shape()),
                ));
            }
            let (outer, full, inner) = split_axis(a.shape(), axis);
            let d = a.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, out)?
        };
        self.tape.record("narrow", value, &[self.id], Op::Narrow { a: self.id, axis, start })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| AutodiffError::invalid("concat", "no operands".into()))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p)?;
                    Ok(tape.value_of(p.id))
                })
                .collect::<Result<_>>()?;
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(AutodiffError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != base.len() || s.iter().enumerate().any(|(i, d)| i != axis && *d != base[i]) {
                    return Err(AutodiffError::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let w = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(&shape, out)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record("concat", value, &ids, Op::Concat { parts: ids.clone(), axis })
    }

    /// Stride-1 2-D convolution: `[B, C, H, W] * [O, C, kh, kw]`, zero padding `pad`.
    pub fn conv2d(self, weight: Var<'t>, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let value = {
            let (x, w) = (self.tape.value_of(self.id), self.tape.value_of(weight.id));
            if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] {
                return Err(AutodiffError::shape("conv2d", x.shape(), w.shape()));
            }
            if conv_out_dims(x.shape()[2], x.shape()[3], w.shape()[2], w.shape()[3], pad).is_none() {
                return Err(AutodiffError::shape("conv2d", x.shape(), w.shape()));
            }
            conv2d_forward(&x, &w, pad)
        };
        self.tape.record("conv2d", value, &[self.id, weight.id], Op::Conv2d { x: self.id, w: weight.id, pad })
    }

    /// Non-overlapping `k x k` max pooling over the trailing two axes.
    pub fn max_pool2d(self, k: usize) -> Result<Var<'t>> {
        let (value, argmax) = {
            let x = self.tape.value_of(self.id);
            if x.ndim() != 4 || k == 0 || x.shape()[2] < k || x.shape()[3] < k {
                return Err(AutodiffError::invalid("max_pool2d", format!("kernel {k} on {:?}", x.shape())));
            }
            let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let (oh, ow) = (h / k, w / k);
            let d = x.data();
            let mut out = Vec::with_capacity(b * c * oh * ow);
            let mut arg = Vec::with_capacity(b * c * oh * ow);
            for plane in 0..b * c {
                let base = plane * h * w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = base + oi * k * w + oj * k;
                        for di in 0..k {
                            for dj in 0..k {
                                let idx = base + (oi * k + di) * w + oj * k + dj;
                                if d[idx] > d[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(d[best]);
                        arg.push(best);
                    }
                }
            }
            (Tensor::new(&[b, c, oh, ow], out)?, arg)
        };
        self.tape.record("max_pool2d", value, &[self.id], Op::MaxPool2d { x: self.id, argmax })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Result<Var<'t>> {
        self.unary("silu", |v| v * sigmoid(v), Op::Silu(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |v| v * v, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    /// Clamp to `[min, max]`; the gradient is zero outside the interval.
    pub fn clamp(self, min: f64, max: f64) -> Result<Var<'t>> {
        self.unary("clamp", |v| v.clamp(min, max), Op::Clamp { a: self.id, min, max })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let value = softmax_rows(&self.tape.value_of(self.id));
        self.tape.record("softmax", value, &[self.id], Op::Softmax(self.id))
    }

    /// Mean over rows of `-Σ_k target·log softmax(logits)`, computed with a
    /// log-sum-exp shift. `target` rows may be soft labels.
    pub fn softmax_cross_entropy(self, target: &Tensor) -> Result<Var<'t>> {
        let (loss, probs) = {
            let logits = self.tape.value_of(self.id);
            if logits.shape() != target.shape() {
                return Err(AutodiffError::shape("softmax_cross_entropy", logits.shape(), target.shape()));
            }
            if !target.is_finite() {
                return Err(AutodiffError::NonFinite { op: "softmax_cross_entropy" });
            }
            let k = *logits.shape().last().unwrap();
            let rows = logits.numel() / k;
            let (l, t) = (logits.data(), target.data());
            let mut total = 0.0;
            for r in 0..rows {
                let row = &l[r * k..(r + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += t[r * k..(r + 1) * k].iter().zip(row).map(|(t, v)| t * (lse - v)).sum::<f64>();
            }
            (total / rows as f64, softmax_rows(&logits))
        };
        self.tape.record(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            &[self.id],
            Op::SoftmaxCrossEntropy { logits: self.id, target: target.clone(), probs },
        )
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(t.shape(), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 1.0])).unwrap();
        let y = x.silu().unwrap().value();
        assert_eq!(y.data()[0], 0.0);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y.data()[1] - expected).abs() < 1e-15);
        assert!((y.data()[1] - 0.731058).abs() < 1e-6);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = tape.constant(a.clone()).unwrap();
        let i = tape.constant(Tensor::eye(2)).unwrap();
        assert_eq!(x.matmul(i).unwrap().value(), a);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![3.0])).unwrap();
        let loss = x.mul(x).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_writes_no_grads() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0)).unwrap();
        let other = tape.param(Tensor::scalar(1.0)).unwrap();
        let loss = c.scale(3.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(c.grad().is_none());
        assert!(other.grad().is_none());
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![2.0])).unwrap();
        let x = tape.param(Tensor::from_vec(vec![5.0])).unwrap();
        let loss = w.mul(x).unwrap().mean().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[5.0]);
        assert_eq!(x.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn unreachable_leaf_untouched() {
        let tape = Tape::new();
        let a = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = tape.param(Tensor::from_vec(vec![1.0])).unwrap();
        let loss = a.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(b.grad().is_none());
        assert_eq!(a.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let a = tape.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(a), Err(AutodiffError::NonScalar(_))));
        let s = a.sum().unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(AutodiffError::BackwardTwice));
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert!(matches!(Tape::new().backward(s), Err(AutodiffError::EmptyTape)));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = a.matmul(b).unwrap_err();
        assert_eq!(err, AutodiffError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
        let c = tape.constant(Tensor::zeros(&[4])).unwrap();
        assert!(matches!(a.add(c), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let tape = Tape::new();
        assert!(tape.constant(Tensor::from_vec(vec![f64::NAN])).is_err());
        let z = tape.constant(Tensor::from_vec(vec![0.0])).unwrap();
        assert_eq!(z.log().unwrap_err(), AutodiffError::NonFinite { op: "log" });
        let big = tape.constant(Tensor::from_vec(vec![1000.0])).unwrap();
        assert!(big.exp().is_err());
    }

    #[test]
    fn broadcast_bias_add() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let b = tape.param(Tensor::from_vec(vec![10.0, 20.0, 30.0])).unwrap();
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn axis_reductions_and_concat() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.mean_axis(1).unwrap().value().data(), &[2.0, 5.0]);
        let c = Var::concat(&[x, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 6]);
        assert_eq!(c.value().row(1), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
        let n = x.narrow(1, 1, 2).unwrap();
        assert_eq!(n.value().data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(x.transpose().unwrap().value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn conv_and_pool_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 1, 4, 4])).unwrap();
        let w = tape.constant(Tensor::ones(&[3, 1, 3, 3])).unwrap();
        let y = x.conv2d(w, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 4, 4]);
        // corner sees 4 ones, centre sees 9
        assert_eq!(y.value().data()[0], 4.0);
        assert_eq!(y.value().data()[5], 9.0);
        assert_eq!(y.max_pool2d(2).unwrap().shape(), vec![2, 3, 2, 2]);
    }

    #[test]
    fn softmax_ce_stable_for_confident_logits() {
        let tape = Tape::new();
        let l = tape.param(Tensor::new(&[1, 2], vec![800.0, 0.0]).unwrap()).unwrap();
        let t = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let loss = l.softmax_cross_entropy(&t).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin())).unwrap();
            let w = tape.constant(Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos())).unwrap();
            x.matmul(w).unwrap().silu().unwrap().softmax().unwrap().value()
        };
        assert_eq!(run().data(), run().data());
    }
}
