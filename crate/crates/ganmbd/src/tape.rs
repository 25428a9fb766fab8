//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends one node; creation order is the topological
//! order, so `backward` is a single reverse sweep that visits each node
//! exactly once. A tape is confined to one thread (`RefCell` inside);
//! independent tapes can run concurrently.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, InstanceNormStats};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{rel_err, Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Floor used when clamping logs inside losses: log(max(v, 1e-8)).
pub const LOG_EPS: f64 = 1e-8;

enum Op<S: Scalar> {
    Leaf { param: Option<ParamId> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Dense { x: Var, w: Var, b: Option<Var> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: InstanceNormStats<S> },
    LeakyRelu { x: Var, slope: S },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    Abs { x: Var },
    LogClamped { x: Var },
    ConcatC { a: Var, b: Var },
    Mean { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    SliceCols { x: Var, from: usize, to: usize },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    LogSoftmax { x: Var },
    Softmax { x: Var },
    NearestResize { x: Var },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
}

pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>) -> Var {
        debug_assert!(value.is_finite(), "non-finite values produced by a forward op");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad: None, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` call w.r.t. `v` (if reached).
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    // ---- graph inputs ---------------------------------------------------

    /// Constant input: gradients are still tracked internally but the value
    /// is not bound to any parameter.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Alias of `constant` used where the caller intends to read the
    /// gradient back (grad_check, tests).
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.constant(value)
    }

    /// Leaf bound to a parameter in `params`; gradients accumulate per
    /// parameter across all uses of the same id.
    pub fn param(&self, params: &ParamStore<S>, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// Cut the graph: same value, no history.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    // ---- primitive ops --------------------------------------------------

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::usage("conv2d expects 4-d input and weight"));
        }
        if xs[1] != ws[1] {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        let geom = ConvGeom::new(ws[1], ws[0], ws[2], stride, pad, xs[2], xs[3])?;
        let out = {
            let nodes = self.nodes.borrow();
            kernels::conv2d_forward(
                &geom,
                &nodes[x.0].value,
                &nodes[w.0].value,
                b.map(|bv| &nodes[bv.0].value),
            )
        };
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed conv; `w` is [Cin,Cout,k,k] (Cin = channels of `x`).
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::usage("conv_transpose2d expects 4-d input and weight"));
        }
        if xs[1] != ws[0] {
            return Err(Error::config(format!(
                "conv_transpose2d channel mismatch: input has {} channels, weight expects {}",
                xs[1], ws[0]
            )));
        }
        let out_side = kernels::convt_out_side(xs[2], ws[2], stride, pad)?;
        // Geometry of the adjoint convolution (convt output -> convt input).
        let geom = ConvGeom::new(ws[1], ws[0], ws[2], stride, pad, out_side, out_side)?;
        if geom.ho != xs[2] || geom.wo != xs[3] {
            return Err(Error::config("transposed conv geometry does not round-trip"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::convt2d_forward(
                &geom,
                &nodes[x.0].value,
                &nodes[w.0].value,
                b.map(|bv| &nodes[bv.0].value),
            )
        };
        Ok(self.push(out, Op::ConvT2d { x, w, b, geom }))
    }

    pub fn dense(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::config(format!(
                "dense dimension mismatch: input {:?} vs weight {:?}",
                xs, ws
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::dense_forward(&nodes[x.0].value, &nodes[w.0].value, b.map(|bv| &nodes[bv.0].value))
        };
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::config("instance_norm affine params must match channel count"));
        }
        let (out, stats) = {
            let nodes = self.nodes.borrow();
            kernels::instance_norm_forward(&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value)
        };
        Ok(self.push(out, Op::InstanceNorm { x, gamma, beta, stats }))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = S::from_f64(slope);
        let out = self.with_value(x, |v| v.map(|e| if e > S::zero() { e } else { e * s }));
        self.push(out, Op::LeakyRelu { x, slope: s })
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.with_value(x, |v| v.map(|e| e.max(S::zero())));
        self.push(out, Op::Relu { x })
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.with_value(x, |v| v.map(|e| e.tanh()));
        self.push(out, Op::Tanh { x })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let one = S::one();
        let out = self.with_value(x, |v| v.map(|e| one / (one + (-e).exp())));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let out = self.with_value(x, |v| v.map(|e| e * cs));
        self.push(out, Op::Scale { x, c: cs })
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn abs(&self, x: Var) -> Var {
        let out = self.with_value(x, |v| v.map(|e| e.abs()));
        self.push(out, Op::Abs { x })
    }

    /// log(max(v, 1e-8)); the clamp keeps adversarial losses finite as
    /// discriminator outputs approach 0.
    pub fn log_clamped(&self, x: Var) -> Var {
        let eps = S::from_f64(LOG_EPS);
        let out = self.with_value(x, |v| v.map(|e| e.max(eps).ln()));
        self.push(out, Op::LogClamped { x })
    }

    /// Concatenate two [N,C,H,W] tensors along channels.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::usage(format!(
                "concat_channels shape mismatch: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut out = Tensor::zeros(vec![n, ca + cb, sa[2], sa[3]]);
        {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            for i in 0..n {
                let dst = &mut out.data_mut()[i * (ca + cb) * hw..(i + 1) * (ca + cb) * hw];
                dst[..ca * hw].copy_from_slice(&va.data()[i * ca * hw..(i + 1) * ca * hw]);
                dst[ca * hw..].copy_from_slice(&vb.data()[i * cb * hw..(i + 1) * cb * hw]);
            }
        }
        Ok(self.push(out, Op::ConcatC { a, b }))
    }

    /// Mean over all elements -> scalar.
    pub fn mean(&self, x: Var) -> Var {
        let out = self.with_value(x, |v| {
            let mut s = S::zero();
            for &e in v.data() {
                s += e;
            }
            Tensor::scalar(s / S::from_f64(v.numel() as f64))
        });
        self.push(out, Op::Mean { x })
    }

    /// Sum over all elements -> scalar.
    pub fn sum(&self, x: Var) -> Var {
        let out = self.with_value(x, |v| {
            let mut s = S::zero();
            for &e in v.data() {
                s += e;
            }
            Tensor::scalar(s)
        });
        self.push(out, Op::Sum { x })
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Column slice of a [N,F] tensor -> [N, to-from].
    pub fn slice_cols(&self, x: Var, from: usize, to: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || to > xs[1] || from >= to {
            return Err(Error::usage(format!("bad column slice {from}..{to} of {:?}", xs)));
        }
        let (n, f, cols) = (xs[0], xs[1], to - from);
        let out = self.with_value(x, |v| {
            let mut o = Tensor::zeros(vec![n, cols]);
            for i in 0..n {
                o.data_mut()[i * cols..(i + 1) * cols]
                    .copy_from_slice(&v.data()[i * f + from..i * f + to]);
            }
            o
        });
        Ok(self.push(out, Op::SliceCols { x, from, to }))
    }

    /// AdaIN-style modulation: out[n,c,h,w] = x * (1 + gamma[n,c]) + beta[n,c].
    pub fn channel_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (n, c) = (xs[0], xs[1]);
        if self.shape(gamma) != [n, c] || self.shape(beta) != [n, c] {
            return Err(Error::config(format!(
                "channel_affine: modulation shape must be [{n}, {c}] (2 x channels when split)"
            )));
        }
        let hw: usize = xs[2..].iter().product();
        let mut out = Tensor::zeros(xs.clone());
        {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            for i in 0..n {
                for ch in 0..c {
                    let scale = S::one() + gv.data()[i * c + ch];
                    let shift = bv.data()[i * c + ch];
                    let at = (i * c + ch) * hw;
                    for (o, &v) in out.data_mut()[at..at + hw].iter_mut().zip(&xv.data()[at..at + hw]) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        Ok(self.push(out, Op::ChannelAffine { x, gamma, beta }))
    }

    /// Row-wise log-softmax of a [N,K] tensor.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::usage("log_softmax expects [N,K]"));
        }
        let (n, k) = (xs[0], xs[1]);
        let out = self.with_value(x, |v| {
            let mut o = Tensor::zeros(vec![n, k]);
            for i in 0..n {
                let row = &v.data()[i * k..(i + 1) * k];
                let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut lse = S::zero();
                for &e in row {
                    lse += (e - mx).exp();
                }
                let lse = lse.ln() + mx;
                for (o, &e) in o.data_mut()[i * k..(i + 1) * k].iter_mut().zip(row) {
                    *o = e - lse;
                }
            }
            o
        });
        Ok(self.push(out, Op::LogSoftmax { x }))
    }

    /// Row-wise softmax of a [N,K] tensor.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let ls = self.log_softmax(x)?;
        let out = self.with_value(ls, |v| v.map(|e| e.exp()));
        Ok(self.push(out, Op::Softmax { x: ls }))
    }

    /// Nearest-neighbor resize of [N,C,H,W] to a square `to_side` output.
    pub fn nearest_resize(&self, x: Var, to_side: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || to_side == 0 {
            return Err(Error::usage("nearest_resize expects 4-d input and positive side"));
        }
        let out = self.with_value(x, |v| kernels::nearest_resize_forward(v, to_side));
        Ok(self.push(out, Op::NearestResize { x }))
    }

    fn zip_elementwise(&self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::usage(format!("elementwise shape mismatch: {:?} vs {:?}", sa, sb)));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(sa, data)?
        };
        Ok(self.push(out, op))
    }

    fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor<S>) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns the gradient map for
    /// `params`: every `requires_grad` parameter gets an entry, zero when the
    /// parameter is not on any path to the loss.
    pub fn backward(&self, loss: Var, params: &ParamStore<S>) -> Result<GradMap<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage("backward requires a scalar loss"));
        }
        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[loss.0].grad = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = nodes[i].grad.take() else {
                continue;
            };
            let op_grads = accumulate_op_grads(&nodes, i, &g);
            for (parent, pg) in op_grads {
                match &mut nodes[parent.0].grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            nodes[i].grad = Some(g);
        }

        let mut map = GradMap::zeros(params);
        for n in nodes.iter() {
            if let (Op::Leaf { param: Some(pid) }, Some(g)) = (&n.op, &n.grad) {
                if params.requires_grad(*pid) {
                    let acc = &mut map.grads[pid.index()];
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
        }
        Ok(map)
    }
}

/// Gradients keyed by parameter id, aligned with a `ParamStore`.
pub struct GradMap<S: Scalar = f32> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> GradMap<S> {
    fn zeros(params: &ParamStore<S>) -> Self {
        GradMap { grads: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId::from_index(i), t))
    }

    pub fn add_assign(&mut self, other: &GradMap<S>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }
}

/// Compute per-parent gradient contributions for one node.
fn accumulate_op_grads<S: Scalar>(
    nodes: &[Node<S>],
    index: usize,
    g: &Tensor<S>,
) -> Vec<(Var, Tensor<S>)> {
    let node = &nodes[index];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf { .. } => vec![],
        Op::Conv2d { x, w, b, geom } => {
            let gin = kernels::conv2d_input_grad(geom, g, val(*w));
            let (gw, gb) = kernels::conv2d_weight_grad(geom, val(*x), g);
            let mut out = vec![(*x, gin), (*w, gw)];
            if let Some(bv) = b {
                out.push((*bv, gb));
            }
            out
        }
        Op::ConvT2d { x, w, b, geom } => {
            let gin = kernels::convt2d_input_grad(geom, g, val(*w));
            let (gw, gb) = kernels::convt2d_weight_grad(geom, val(*x), g);
            let mut out = vec![(*x, gin), (*w, gw)];
            if let Some(bv) = b {
                out.push((*bv, gb));
            }
            out
        }
        Op::Dense { x, w, b } => {
            let (gin, gw, gb) = kernels::dense_backward(val(*x), val(*w), g);
            let mut out = vec![(*x, gin), (*w, gw)];
            if let Some(bv) = b {
                out.push((*bv, gb));
            }
            out
        }
        Op::InstanceNorm { x, gamma, beta, stats } => {
            let (gin, gg, gb) = kernels::instance_norm_backward(val(*x), val(*gamma), stats, g);
            vec![(*x, gin), (*gamma, gg), (*beta, gb)]
        }
        Op::LeakyRelu { x, slope } => {
            let xin = val(*x);
            let data = g
                .data()
                .iter()
                .zip(xin.data())
                .map(|(&gv, &xv)| if xv > S::zero() { gv } else { gv * *slope })
                .collect();
            vec![(*x, Tensor::from_vec(xin.shape().to_vec(), data).unwrap())]
        }
        Op::Relu { x } => {
            let xin = val(*x);
            let data = g
                .data()
                .iter()
                .zip(xin.data())
                .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                .collect();
            vec![(*x, Tensor::from_vec(xin.shape().to_vec(), data).unwrap())]
        }
        Op::Tanh { x } => {
            let y = &node.value;
            let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * (S::one() - yv * yv)).collect();
            vec![(*x, Tensor::from_vec(y.shape().to_vec(), data).unwrap())]
        }
        Op::Sigmoid { x } => {
            let y = &node.value;
            let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv * (S::one() - yv)).collect();
            vec![(*x, Tensor::from_vec(y.shape().to_vec(), data).unwrap())]
        }
        Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let ga = g.data().iter().zip(vb.data()).map(|(&gv, &bv)| gv * bv).collect();
            let gb = g.data().iter().zip(va.data()).map(|(&gv, &av)| gv * av).collect();
            vec![
                (*a, Tensor::from_vec(va.shape().to_vec(), ga).unwrap()),
                (*b, Tensor::from_vec(vb.shape().to_vec(), gb).unwrap()),
            ]
        }
        Op::Scale { x, c } => vec![(*x, g.map(|v| v * *c))],
        Op::Abs { x } => {
            let xin = val(*x);
            let data = g
                .data()
                .iter()
                .zip(xin.data())
                .map(|(&gv, &xv)| {
                    if xv > S::zero() {
                        gv
                    } else if xv < S::zero() {
                        -gv
                    } else {
                        S::zero()
                    }
                })
                .collect();
            vec![(*x, Tensor::from_vec(xin.shape().to_vec(), data).unwrap())]
        }
        Op::LogClamped { x } => {
            let eps = S::from_f64(LOG_EPS);
            let xin = val(*x);
            // Below the clamp the output is constant, so the gradient is zero.
            let data = g
                .data()
                .iter()
                .zip(xin.data())
                .map(|(&gv, &xv)| if xv > eps { gv / xv } else { S::zero() })
                .collect();
            vec![(*x, Tensor::from_vec(xin.shape().to_vec(), data).unwrap())]
        }
        Op::ConcatC { a, b } => {
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
            let mut ga = Tensor::zeros(sa.clone());
            let mut gb = Tensor::zeros(sb.clone());
            for i in 0..n {
                let src = &g.data()[i * (ca + cb) * hw..(i + 1) * (ca + cb) * hw];
                ga.data_mut()[i * ca * hw..(i + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
                gb.data_mut()[i * cb * hw..(i + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Mean { x } => {
            let xin = val(*x);
            let c = g.data()[0] / S::from_f64(xin.numel() as f64);
            vec![(*x, Tensor::full(xin.shape().to_vec(), c))]
        }
        Op::Sum { x } => {
            let xin = val(*x);
            vec![(*x, Tensor::full(xin.shape().to_vec(), g.data()[0]))]
        }
        Op::Reshape { x } => {
            let xin = val(*x);
            let gr = g.clone().reshaped(xin.shape().to_vec()).unwrap();
            vec![(*x, gr)]
        }
        Op::SliceCols { x, from, to } => {
            let xin = val(*x);
            let (n, f, cols) = (xin.shape()[0], xin.shape()[1], to - from);
            let mut gx = Tensor::zeros(xin.shape().to_vec());
            for i in 0..n {
                gx.data_mut()[i * f + from..i * f + to]
                    .copy_from_slice(&g.data()[i * cols..(i + 1) * cols]);
            }
            vec![(*x, gx)]
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let xin = val(*x);
            let gv = val(*gamma);
            let (n, c) = (xin.shape()[0], xin.shape()[1]);
            let hw: usize = xin.shape()[2..].iter().product();
            let mut gx = Tensor::zeros(xin.shape().to_vec());
            let mut gg = Tensor::zeros(vec![n, c]);
            let mut gb = Tensor::zeros(vec![n, c]);
            for i in 0..n {
                for ch in 0..c {
                    let at = (i * c + ch) * hw;
                    let scale = S::one() + gv.data()[i * c + ch];
                    let mut sg = S::zero();
                    let mut sgx = S::zero();
                    for j in 0..hw {
                        let gvj = g.data()[at + j];
                        gx.data_mut()[at + j] = gvj * scale;
                        sg += gvj;
                        sgx += gvj * xin.data()[at + j];
                    }
                    gg.data_mut()[i * c + ch] = sgx;
                    gb.data_mut()[i * c + ch] = sg;
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::LogSoftmax { x } => {
            // d/dx_j = g_j - softmax_j * sum(g)
            let y = &node.value;
            let (n, k) = (y.shape()[0], y.shape()[1]);
            let mut gx = Tensor::zeros(vec![n, k]);
            for i in 0..n {
                let mut sum_g = S::zero();
                for j in 0..k {
                    sum_g += g.data()[i * k + j];
                }
                for j in 0..k {
                    let sm = y.data()[i * k + j].exp();
                    gx.data_mut()[i * k + j] = g.data()[i * k + j] - sm * sum_g;
                }
            }
            vec![(*x, gx)]
        }
        Op::Softmax { x } => {
            // node.value = softmax; parent x holds log-softmax: dL/dls_j = g_j * y_j
            let y = &node.value;
            let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
            vec![(*x, Tensor::from_vec(y.shape().to_vec(), data).unwrap())]
        }
        Op::NearestResize { x } => {
            let xin = val(*x);
            vec![(*x, kernels::nearest_resize_backward(xin.shape(), g))]
        }
    }
}

/// Maximum relative error between analytic and central finite-difference
/// gradients of a scalar-valued function, in the caller's precision.
pub fn grad_check<S: Scalar>(
    f: impl Fn(&Tape<S>, Var) -> Result<Var>,
    x: &Tensor<S>,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::usage("grad_check eps must be positive"));
    }
    let eval = |pt: &Tensor<S>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(pt.clone());
        let out = f(&tape, v)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::usage("grad_check requires a scalar-valued function"));
        }
        let y = tape.scalar_value(out).to_f64();
        if !y.is_finite() {
            return Err(Error::eval("grad_check: function value is not finite"));
        }
        Ok(y)
    };

    // analytic gradient
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::usage("grad_check requires a scalar-valued function"));
    }
    let empty = ParamStore::new();
    tape.backward(out, &empty)?;
    let analytic = tape
        .grad(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::from_f64(eps);
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - S::from_f64(eps);
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic.data()[i].to_f64(), numeric));
    }
    Ok(max_err)
}

/// Convenience: collect gradients for a list of ad-hoc leaves (test helper).
pub fn leaf_grads<S: Scalar>(tape: &Tape<S>, leaves: &[Var]) -> HashMap<usize, Tensor<S>> {
    leaves
        .iter()
        .enumerate()
        .filter_map(|(i, v)| tape.grad(*v).map(|g| (i, g)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_all_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss, &ParamStore::new()).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_half_sum_squares_is_x() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_vec(vec![4], vec![1.0, -2.0, 3.0, 0.25]).unwrap();
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.scale(tape.sum(sq), 0.5);
        tape.backward(loss, &ParamStore::new()).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.max_abs_diff(&xv) < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.backward(x, &ParamStore::new()), Err(Error::Usage(_))));
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(vec![5], 0.5, &mut rng);
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-4).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![6], 0.5, &mut rng);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_sigmoid_log_loss_core() {
        // the Eq-1 style loss core log(sigmoid(x)) around D(x) = 0.5 (x = 0)
        let x = Tensor::<f64>::from_vec(vec![3], vec![0.0, 0.1, -0.1]).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.sigmoid(v);
                let l = t.log_clamped(s);
                Ok(t.mean(l))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn grad_check_composite_conv_norm_lrelu_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], 0.4, &mut rng);
        let b = Tensor::<f64>::randn(vec![3], 0.2, &mut rng);
        let gamma = Tensor::<f64>::randn(vec![3], 0.3, &mut rng).map(|v| v + 1.0);
        let beta = Tensor::<f64>::randn(vec![3], 0.2, &mut rng);
        let x = Tensor::<f64>::randn(vec![1, 2, 4, 4], 0.8, &mut rng);

        // check gradient w.r.t. the input of the composite graph
        let err = grad_check(
            |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let gv = t.constant(gamma.clone());
                let be = t.constant(beta.clone());
                let c = t.conv2d(v, wv, Some(bv), 1, 1)?;
                let n = t.instance_norm(c, gv, be)?;
                let a = t.leaky_relu(n, 0.2);
                Ok(t.mean(a))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "input grad err = {err}");

        // and w.r.t. the weight
        let err = grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let gv = t.constant(gamma.clone());
                let be = t.constant(beta.clone());
                let c = t.conv2d(xv, v, Some(bv), 1, 1)?;
                let n = t.instance_norm(c, gv, be)?;
                let a = t.leaky_relu(n, 0.2);
                Ok(t.mean(a))
            },
            &w,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "weight grad err = {err}");
    }

    #[test]
    fn grad_check_every_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x44 = Tensor::<f64>::randn(vec![1, 2, 4, 4], 0.6, &mut rng);
        let cases: Vec<(&str, Box<dyn Fn(&Tape<f64>, Var) -> Result<Var>>)> = vec![
            ("relu", Box::new(|t, v| Ok(t.mean(t.relu(v))))),
            ("leaky_relu", Box::new(|t, v| Ok(t.mean(t.leaky_relu(v, 0.2))))),
            ("tanh", Box::new(|t, v| Ok(t.mean(t.tanh(v))))),
            ("sigmoid", Box::new(|t, v| Ok(t.mean(t.sigmoid(v))))),
            ("abs", Box::new(|t, v| Ok(t.mean(t.abs(v))))),
            ("scale", Box::new(|t, v| Ok(t.mean(t.scale(v, -2.5))))),
            (
                "add_mul",
                Box::new(|t, v| {
                    let w = t.scale(v, 0.5);
                    let m = t.mul(v, w)?;
                    let a = t.add(m, v)?;
                    Ok(t.mean(a))
                }),
            ),
            (
                "sub",
                Box::new(|t, v| {
                    let w = t.tanh(v);
                    let d = t.sub(v, w)?;
                    Ok(t.mean(d))
                }),
            ),
            (
                "concat",
                Box::new(|t, v| {
                    let w = t.scale(v, 2.0);
                    let c = t.concat_channels(v, w)?;
                    Ok(t.mean(c))
                }),
            ),
            (
                "nearest_resize",
                Box::new(|t, v| {
                    let r = t.nearest_resize(v, 8)?;
                    let s = t.mul(r, r)?;
                    Ok(t.mean(s))
                }),
            ),
            (
                "channel_affine",
                Box::new(|t, v| {
                    let flat = t.reshape(v, vec![1, 32])?;
                    let gamma = t.slice_cols(flat, 0, 2)?;
                    let beta = t.slice_cols(flat, 2, 4)?;
                    let m = t.channel_affine(v, gamma, beta)?;
                    Ok(t.mean(m))
                }),
            ),
        ];
        for (name, f) in cases {
            let err = grad_check(f.as_ref(), &x44, 1e-4).unwrap();
            assert!(err < 1e-4, "{name}: err = {err}");
        }

        // log_softmax / softmax on a 2-d input
        let x2 = Tensor::<f64>::randn(vec![3, 4], 0.8, &mut rng);
        let err = grad_check(
            |t, v| {
                let ls = t.log_softmax(v)?;
                let sq = t.mul(ls, ls)?;
                Ok(t.mean(sq))
            },
            &x2,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "log_softmax err = {err}");
        let err = grad_check(
            |t, v| {
                let s = t.softmax(v)?;
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
            &x2,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "softmax err = {err}");

        // dense and transposed conv against finite differences
        let xd = Tensor::<f64>::randn(vec![2, 5], 0.7, &mut rng);
        let wd = Tensor::<f64>::randn(vec![5, 3], 0.7, &mut rng);
        let err = grad_check(
            |t, v| {
                let w = t.constant(wd.clone());
                let d = t.dense(v, w, None)?;
                let s = t.mul(d, d)?;
                Ok(t.mean(s))
            },
            &xd,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "dense err = {err}");

        let wt = Tensor::<f64>::randn(vec![2, 3, 4, 4], 0.4, &mut rng);
        let xt = Tensor::<f64>::randn(vec![1, 2, 3, 3], 0.7, &mut rng);
        for (name, probe_weight) in [("convt input", false), ("convt weight", true)] {
            let err = if probe_weight {
                grad_check(
                    |t, v| {
                        let x = t.constant(xt.clone());
                        let y = t.conv_transpose2d(x, v, None, 2, 1)?;
                        let s = t.mul(y, y)?;
                        Ok(t.mean(s))
                    },
                    &wt,
                    1e-4,
                )
                .unwrap()
            } else {
                grad_check(
                    |t, v| {
                        let w = t.constant(wt.clone());
                        let y = t.conv_transpose2d(v, w, None, 2, 1)?;
                        let s = t.mul(y, y)?;
                        Ok(t.mean(s))
                    },
                    &xt,
                    1e-4,
                )
                .unwrap()
            };
            assert!(err < 1e-4, "{name}: err = {err}");
        }
    }

    #[test]
    fn backward_linearity_and_isolation() {
        // backward of a sum of losses equals the sum of individual passes,
        // and a disconnected leaf gets no gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::<f64>::randn(vec![4], 1.0, &mut rng);

        let run = |combined: bool| -> (Tensor<f64>, Option<Tensor<f64>>) {
            let tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone());
            let unused = tape.leaf(Tensor::<f64>::full(vec![2], 3.0));
            let l1 = tape.sum(x);
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.mean(sq);
            let loss = if combined { tape.add(l1, l2).unwrap() } else { l1 };
            tape.backward(loss, &ParamStore::new()).unwrap();
            (tape.grad(x).unwrap(), tape.grad(unused))
        };

        let (g_combined, unused_grad) = run(true);
        assert!(unused_grad.is_none(), "disconnected leaf must receive no gradient");

        // individual passes
        let tape = Tape::<f64>::new();
        let x = tape.leaf(xv.clone());
        let l1 = tape.sum(x);
        tape.backward(l1, &ParamStore::new()).unwrap();
        let g1 = tape.grad(x).unwrap();

        let tape2 = Tape::<f64>::new();
        let x2 = tape2.leaf(xv.clone());
        let sq = tape2.mul(x2, x2).unwrap();
        let l2 = tape2.mean(sq);
        tape2.backward(l2, &ParamStore::new()).unwrap();
        let g2 = tape2.grad(x2).unwrap();

        for i in 0..4 {
            let s = g1.data()[i] + g2.data()[i];
            assert!((g_combined.data()[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f32>::randn(vec![1, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(vec![4, 3, 3, 3], 0.2, &mut rng);
        let run = || {
            let tape = Tape::<f32>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let a = tape.tanh(y);
            tape.value(a)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.data(), b.data(), "identical inputs must be bit-identical");
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![3], 2.0));
        let d = tape.detach(x);
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &ParamStore::new()).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
