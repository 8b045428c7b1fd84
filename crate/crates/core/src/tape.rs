//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Tape` records every executed operation in topological order. Each node
//! owns its forward value, an accumulated gradient buffer, and a backward
//! rule that maps the node's adjoint to adjoints of its inputs. The tape is
//! rebuilt on every forward pass; parameters live outside the tape and are
//! re-registered as leaves each pass.
//!
//! `backward` computes adjoints into a scratch buffer and then adds them into
//! the persistent per-node gradients, so repeated calls accumulate and each
//! node's rule fires exactly once per call.

use rand::Rng;

use crate::error::{Error, Result};
use crate::quantum::{self, GroupCircuitParams, GROUP_PARAM_COUNT};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    LeakyRelu02,
    Silu,
    Elu,
    Gelu,
    Sigmoid,
    Tanh,
    ScaledTanh3,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::LeakyRelu02 => {
                if x > 0.0 {
                    x
                } else {
                    0.2 * x
                }
            }
            ActivationKind::Silu => x * sigmoid(x),
            ActivationKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            ActivationKind::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::ScaledTanh3 => {
                // tanh rounds to exactly 1.0 for |x| > ~19; clamp one ulp
                // inside so the open-interval (-3, 3) contract survives.
                const LIMIT: f64 = 2.999_999_999_999_999_6;
                (3.0 * x.tanh()).clamp(-LIMIT, LIMIT)
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::LeakyRelu02 => {
                if x > 0.0 {
                    1.0
                } else {
                    0.2
                }
            }
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            ActivationKind::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::ScaledTanh3 => {
                let t = x.tanh();
                3.0 * (1.0 - t * t)
            }
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leaky_relu_0.2" => Ok(ActivationKind::LeakyRelu02),
            "silu" => Ok(ActivationKind::Silu),
            "elu" => Ok(ActivationKind::Elu),
            "gelu" => Ok(ActivationKind::Gelu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "scaled_tanh_3" => Ok(ActivationKind::ScaledTanh3),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Running statistics of one batch-normalization layer. Not trainable;
/// updated in train mode and consumed in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
    inputs: Vec<ValueId>,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that does not ask for a gradient (gradients still flow through it
    /// to others; its own adjoint is computed but usually ignored).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient the caller will read back (a parameter or a
    /// gradient-checked input).
    pub fn variable(&mut self, value: Tensor) -> ValueId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, requires_grad, inputs: Vec::new(), backward: None });
        ValueId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: Vec<ValueId>, backward: BackFn) -> ValueId {
        debug_assert!(value.all_finite(), "operation produced non-finite values");
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, requires_grad, inputs, backward: Some(backward) });
        ValueId(self.nodes.len() - 1)
    }

    /// Clear accumulated gradients on every node.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    /// Reverse sweep from a scalar loss. Adjoints are computed fresh in a
    /// scratch buffer and then added into the persistent gradients, so
    /// calling this twice without `zero_grads` doubles every gradient.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adjoint: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            if let Some(back) = self.nodes[i].backward.as_ref() {
                let input_grads = back(&g);
                debug_assert_eq!(input_grads.len(), self.nodes[i].inputs.len());
                let ids = self.nodes[i].inputs.clone();
                for (vid, gi) in ids.into_iter().zip(input_grads) {
                    match &mut adjoint[vid.0] {
                        Some(t) => t.add_assign(&gi),
                        slot => *slot = Some(gi),
                    }
                }
            }
            self.nodes[i].grad.add_assign(&g);
        }
        Ok(())
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(v, vec![a, b], Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(v, vec![a, b], Box::new(|g| vec![g.clone(), g.map(|x| -x)])))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = av.zip(&bv, |x, y| x * y)?;
        Ok(self.push_op(
            v,
            vec![a, b],
            Box::new(move |g| {
                vec![
                    g.zip(&bv, |gi, y| gi * y).expect("shapes fixed at record time"),
                    g.zip(&av, |gi, x| gi * x).expect("shapes fixed at record time"),
                ]
            }),
        ))
    }

    pub fn activation(&mut self, kind: ActivationKind, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let v = xv.map(|t| kind.apply(t));
        self.push_op(
            v,
            vec![x],
            Box::new(move |g| {
                vec![g
                    .zip(&xv.map(|t| kind.derivative(t)), |gi, d| gi * d)
                    .expect("shapes fixed at record time")]
            }),
        )
    }

    pub fn softplus(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x).clone();
        let v = xv.map(softplus);
        self.push_op(
            v,
            vec![x],
            Box::new(move |g| {
                vec![g.zip(&xv.map(sigmoid), |gi, s| gi * s).expect("shapes fixed at record time")]
            }),
        )
    }

    // -- shape plumbing ----------------------------------------------------

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(x).reshaped(shape)?;
        let old_shape = self.value(x).shape().to_vec();
        Ok(self.push_op(
            v,
            vec![x],
            Box::new(move |g| vec![g.reshaped(&old_shape).expect("same element count")]),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        let rank = xv.shape().len();
        if rank < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {:?}", xv.shape())));
        }
        let v = transpose_last2_raw(xv);
        Ok(self.push_op(v, vec![x], Box::new(|g| vec![transpose_last2_raw(g)])))
    }

    /// Take `len` slots starting at `start` along `axis`.
    pub fn narrow(&mut self, x: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = xv.data();
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            v,
            vec![x],
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&shape);
                let dst = dx.data_mut();
                let gs = g.data();
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    let gbase = o * len * inner;
                    dst[base..base + len * inner]
                        .copy_from_slice(&gs[gbase..gbase + len * inner]);
                }
                vec![dx]
            }),
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, axis: usize, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat shapes differ off-axis: {:?} vs {:?}",
                    s, first
                )));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &l) in parts.iter().zip(&lens) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_base = (o * total + offset) * inner;
                let src_base = o * l * inner;
                data[dst_base..dst_base + l * inner]
                    .copy_from_slice(&src[src_base..src_base + l * inner]);
            }
            offset += l;
        }
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            v,
            parts.to_vec(),
            Box::new(move |g| {
                let gs = g.data();
                let mut out = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for &l in &lens {
                    let mut shape = first.clone();
                    shape[axis] = l;
                    let mut part = Tensor::zeros(&shape);
                    let dst = part.data_mut();
                    for o in 0..outer {
                        let src_base = (o * total + offset) * inner;
                        let dst_base = o * l * inner;
                        dst[dst_base..dst_base + l * inner]
                            .copy_from_slice(&gs[src_base..src_base + l * inner]);
                    }
                    out.push(part);
                    offset += l;
                }
                out
            }),
        ))
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let v = Tensor::scalar(xv.data().iter().sum());
        self.push_op(
            v,
            vec![x],
            Box::new(move |g| vec![Tensor::full(&shape, g.item())]),
        )
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let n = xv.numel() as f64;
        let v = Tensor::scalar(xv.data().iter().sum::<f64>() / n);
        self.push_op(
            v,
            vec![x],
            Box::new(move |g| vec![Tensor::full(&shape, g.item() / n)]),
        )
    }

    // -- linear algebra ----------------------------------------------------

    /// Affine map along the last axis: `[.., n_in] x [n_in, n_out] + [n_out]`.
    pub fn linear(&mut self, x: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let bv = self.value(bias);
        if wv.shape().len() != 2 {
            return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", wv.shape())));
        }
        let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
        if xv.shape().is_empty() || *xv.shape().last().unwrap() != n_in {
            return Err(Error::Shape(format!(
                "linear input {:?} does not end in n_in={n_in}",
                xv.shape()
            )));
        }
        if bv.shape() != [n_out] {
            return Err(Error::Shape(format!(
                "linear bias must be [{n_out}], got {:?}",
                bv.shape()
            )));
        }
        let rows = xv.numel() / n_in;
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n_out;
        let mut data = vec![0.0; rows * n_out];
        {
            let xd = xv.data();
            let wd = wv.data();
            let bd = bv.data();
            for r in 0..rows {
                let xrow = &xd[r * n_in..(r + 1) * n_in];
                let orow = &mut data[r * n_out..(r + 1) * n_out];
                orow.copy_from_slice(bd);
                for (i, &xi) in xrow.iter().enumerate() {
                    let wrow = &wd[i * n_out..(i + 1) * n_out];
                    for (o, w) in orow.iter_mut().zip(wrow) {
                        *o += xi * w;
                    }
                }
            }
        }
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            v,
            vec![x, weight, bias],
            Box::new(move |g| {
                let gd = g.data();
                let xd = xv.data();
                let wd = wv.data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                let mut db = Tensor::zeros(&[n_out]);
                {
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        let grow = &gd[r * n_out..(r + 1) * n_out];
                        let dxrow = &mut dxd[r * n_in..(r + 1) * n_in];
                        for i in 0..n_in {
                            let wrow = &wd[i * n_out..(i + 1) * n_out];
                            dxrow[i] += grow.iter().zip(wrow).map(|(g, w)| g * w).sum::<f64>();
                        }
                    }
                }
                {
                    let dwd = dw.data_mut();
                    let dbd = db.data_mut();
                    for r in 0..rows {
                        let xrow = &xd[r * n_in..(r + 1) * n_in];
                        let grow = &gd[r * n_out..(r + 1) * n_out];
                        for (i, &xi) in xrow.iter().enumerate() {
                            let dwrow = &mut dwd[i * n_out..(i + 1) * n_out];
                            for (dwv, gv) in dwrow.iter_mut().zip(grow) {
                                *dwv += xi * gv;
                            }
                        }
                        for (dbv, gv) in dbd.iter_mut().zip(grow) {
                            *dbv += gv;
                        }
                    }
                }
                vec![dx, dw, db]
            }),
        ))
    }

    /// Width-3 temporal convolution over `[.., L, K_in]` with same-length
    /// zero padding; kernel is `[3, K_in, K_out]`.
    pub fn conv1d_temporal(&mut self, x: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId> {
        let xv = self.value(x).clone();
        let kv = self.value(kernel).clone();
        let bv = self.value(bias);
        if xv.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "conv1d input needs rank >= 2 [.., L, K], got {:?}",
                xv.shape()
            )));
        }
        if kv.shape().len() != 3 || kv.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "conv1d kernel must be [3, K_in, K_out], got {:?}",
                kv.shape()
            )));
        }
        let rank = xv.shape().len();
        let (len, k_in) = (xv.shape()[rank - 2], xv.shape()[rank - 1]);
        let k_out = kv.shape()[2];
        if kv.shape()[1] != k_in {
            return Err(Error::Shape(format!(
                "conv1d kernel K_in {} != input channels {k_in}",
                kv.shape()[1]
            )));
        }
        if bv.shape() != [k_out] {
            return Err(Error::Shape(format!("conv1d bias must be [{k_out}], got {:?}", bv.shape())));
        }
        if len == 0 {
            return Err(Error::Shape("conv1d input has empty temporal axis".into()));
        }
        let batch = xv.numel() / (len * k_in);
        let mut out_shape = xv.shape().to_vec();
        out_shape[rank - 1] = k_out;
        let mut data = vec![0.0; batch * len * k_out];
        {
            let xd = xv.data();
            let kd = kv.data();
            let bd = bv.data();
            for bi in 0..batch {
                let xb = &xd[bi * len * k_in..(bi + 1) * len * k_in];
                let ob = &mut data[bi * len * k_out..(bi + 1) * len * k_out];
                for l in 0..len {
                    let orow = &mut ob[l * k_out..(l + 1) * k_out];
                    orow.copy_from_slice(bd);
                    for t in 0..3usize {
                        let src = l as isize + t as isize - 1;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let xrow = &xb[src as usize * k_in..(src as usize + 1) * k_in];
                        let kt = &kd[t * k_in * k_out..(t + 1) * k_in * k_out];
                        for (i, &xi) in xrow.iter().enumerate() {
                            let krow = &kt[i * k_out..(i + 1) * k_out];
                            for (o, kvv) in orow.iter_mut().zip(krow) {
                                *o += xi * kvv;
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            v,
            vec![x, kernel, bias],
            Box::new(move |g| {
                let gd = g.data();
                let xd = xv.data();
                let kd = kv.data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut db = Tensor::zeros(&[k_out]);
                let dxd = dx.data_mut();
                let dkd = dk.data_mut();
                let dbd = db.data_mut();
                for bi in 0..batch {
                    let xb = &xd[bi * len * k_in..(bi + 1) * len * k_in];
                    let gb = &gd[bi * len * k_out..(bi + 1) * len * k_out];
                    let dxb = &mut dxd[bi * len * k_in..(bi + 1) * len * k_in];
                    for l in 0..len {
                        let grow = &gb[l * k_out..(l + 1) * k_out];
                        for (dbv, gv) in dbd.iter_mut().zip(grow) {
                            *dbv += gv;
                        }
                        for t in 0..3usize {
                            let src = l as isize + t as isize - 1;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let s = src as usize;
                            let kt = &kd[t * k_in * k_out..(t + 1) * k_in * k_out];
                            let dkt = &mut dkd[t * k_in * k_out..(t + 1) * k_in * k_out];
                            for i in 0..k_in {
                                let xi = xb[s * k_in + i];
                                let krow = &kt[i * k_out..(i + 1) * k_out];
                                let dkrow = &mut dkt[i * k_out..(i + 1) * k_out];
                                let mut acc = 0.0;
                                for o in 0..k_out {
                                    acc += grow[o] * krow[o];
                                    dkrow[o] += xi * grow[o];
                                }
                                dxb[s * k_in + i] += acc;
                            }
                        }
                    }
                }
                vec![dx, dk, db]
            }),
        ))
    }

    /// Valid 2x2 depthwise convolution over `[.., C, H, W]`; one kernel per
    /// channel, no cross-channel mixing. Output is `[.., C, H-1, W-1]`.
    pub fn conv2d_depthwise(&mut self, x: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId> {
        let xv = self.value(x).clone();
        let kv = self.value(kernel).clone();
        let bv = self.value(bias);
        if xv.shape().len() < 3 {
            return Err(Error::Shape(format!(
                "depthwise conv input needs rank >= 3 [.., C, H, W], got {:?}",
                xv.shape()
            )));
        }
        let rank = xv.shape().len();
        let (c, h, w) = (xv.shape()[rank - 3], xv.shape()[rank - 2], xv.shape()[rank - 1]);
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("depthwise conv needs H,W >= 2, got {h}x{w}")));
        }
        if kv.shape() != [c, 2, 2] {
            return Err(Error::Shape(format!(
                "depthwise kernel must be [{c}, 2, 2], got {:?}",
                kv.shape()
            )));
        }
        if bv.shape() != [c] {
            return Err(Error::Shape(format!("depthwise bias must be [{c}], got {:?}", bv.shape())));
        }
        let (oh, ow) = (h - 1, w - 1);
        let batch = xv.numel() / (c * h * w);
        let mut out_shape = xv.shape().to_vec();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        let mut data = vec![0.0; batch * c * oh * ow];
        {
            let xd = xv.data();
            let kd = kv.data();
            let bd = bv.data();
            for bi in 0..batch {
                for ch in 0..c {
                    let xb = &xd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                    let ob = &mut data[(bi * c + ch) * oh * ow..(bi * c + ch + 1) * oh * ow];
                    let k = &kd[ch * 4..ch * 4 + 4];
                    for i in 0..oh {
                        for j in 0..ow {
                            ob[i * ow + j] = bd[ch]
                                + k[0] * xb[i * w + j]
                                + k[1] * xb[i * w + j + 1]
                                + k[2] * xb[(i + 1) * w + j]
                                + k[3] * xb[(i + 1) * w + j + 1];
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            v,
            vec![x, kernel, bias],
            Box::new(move |g| {
                let gd = g.data();
                let xd = xv.data();
                let kd = kv.data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut db = Tensor::zeros(&[c]);
                let dxd = dx.data_mut();
                let dkd = dk.data_mut();
                let dbd = db.data_mut();
                for bi in 0..batch {
                    for ch in 0..c {
                        let xb = &xd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                        let gb = &gd[(bi * c + ch) * oh * ow..(bi * c + ch + 1) * oh * ow];
                        let dxb = &mut dxd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                        let k = &kd[ch * 4..ch * 4 + 4];
                        let dkc = &mut dkd[ch * 4..ch * 4 + 4];
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = gb[i * ow + j];
                                dbd[ch] += gv;
                                dxb[i * w + j] += gv * k[0];
                                dxb[i * w + j + 1] += gv * k[1];
                                dxb[(i + 1) * w + j] += gv * k[2];
                                dxb[(i + 1) * w + j + 1] += gv * k[3];
                                dkc[0] += gv * xb[i * w + j];
                                dkc[1] += gv * xb[i * w + j + 1];
                                dkc[2] += gv * xb[(i + 1) * w + j];
                                dkc[3] += gv * xb[(i + 1) * w + j + 1];
                            }
                        }
                    }
                }
                vec![dx, dk, db]
            }),
        ))
    }

    /// Per-channel max over all spatial positions of `[.., C, H, W]`.
    /// Backward routes the gradient to the first maximal element in
    /// row-major order.
    pub fn maxpool_spatial(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.value(x);
        if xv.shape().len() < 3 {
            return Err(Error::Shape(format!(
                "maxpool input needs rank >= 3 [.., C, H, W], got {:?}",
                xv.shape()
            )));
        }
        let rank = xv.shape().len();
        let (c, h, w) = (xv.shape()[rank - 3], xv.shape()[rank - 2], xv.shape()[rank - 1]);
        let spatial = h * w;
        let batch = xv.numel() / (c * spatial);
        let out_shape: Vec<usize> = xv.shape()[..rank - 2].to_vec();
        let xd = xv.data();
        let mut data = vec![0.0; batch * c];
        let mut argmax = vec![0usize; batch * c];
        for bc in 0..batch * c {
            let slice = &xd[bc * spatial..(bc + 1) * spatial];
            let mut best = slice[0];
            let mut best_at = 0;
            for (p, &v) in slice.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_at = p;
                }
            }
            data[bc] = best;
            argmax[bc] = bc * spatial + best_at;
        }
        let in_shape = xv.shape().to_vec();
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push_op(
            v,
            vec![x],
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&in_shape);
                let dxd = dx.data_mut();
                for (bc, &pos) in argmax.iter().enumerate() {
                    dxd[pos] += g.data()[bc];
                }
                vec![dx]
            }),
        ))
    }

    // -- normalization and regularization -----------------------------------

    /// Batch normalization with per-channel statistics over every non-channel
    /// axis. Input is `[B, K]` or `[B, L, K]` with channels last. Train mode
    /// uses batch statistics and updates `state` (momentum 0.1); eval mode
    /// reads `state`. Epsilon is 1e-5.
    pub fn batchnorm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<ValueId> {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta);
        let rank = xv.shape().len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "batchnorm input needs rank >= 2 [B, .., K], got {:?}",
                xv.shape()
            )));
        }
        let k = *xv.shape().last().unwrap();
        if gv.shape() != [k] || bv.shape() != [k] {
            return Err(Error::Shape(format!(
                "batchnorm gamma/beta must be [{k}], got {:?}/{:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        if state.running_mean.len() != k {
            return Err(Error::Shape(format!(
                "batchnorm state has {} channels, input has {k}",
                state.running_mean.len()
            )));
        }
        let batch = xv.shape()[0];
        if mode == Mode::Train && batch < 2 {
            return Err(Error::Batch(format!(
                "batchnorm train mode needs batch size >= 2, got {batch}"
            )));
        }
        let m = xv.numel() / k;
        let xd = xv.data();

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; k];
                let mut var = vec![0.0; k];
                for row in 0..m {
                    for ch in 0..k {
                        mean[ch] += xd[row * k + ch];
                    }
                }
                for mu in &mut mean {
                    *mu /= m as f64;
                }
                for row in 0..m {
                    for ch in 0..k {
                        let d = xd[row * k + ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                for s in &mut var {
                    *s /= m as f64;
                }
                for ch in 0..k {
                    state.running_mean[ch] =
                        (1.0 - BN_MOMENTUM) * state.running_mean[ch] + BN_MOMENTUM * mean[ch];
                    state.running_var[ch] =
                        (1.0 - BN_MOMENTUM) * state.running_var[ch] + BN_MOMENTUM * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut data = vec![0.0; xv.numel()];
        {
            let gd = gv.data();
            let bd = bv.data();
            for row in 0..m {
                for ch in 0..k {
                    let xh = (xd[row * k + ch] - mean[ch]) * inv_std[ch];
                    xhat[row * k + ch] = xh;
                    data[row * k + ch] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let v = Tensor::from_vec(xv.shape(), data)?;
        let x_shape = xv.shape().to_vec();
        Ok(self.push_op(
            v,
            vec![x, gamma, beta],
            Box::new(move |g| {
                let gd = g.data();
                let gam = gv.data();
                let mut dgamma = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                for row in 0..m {
                    for ch in 0..k {
                        dgamma[ch] += gd[row * k + ch] * xhat[row * k + ch];
                        dbeta[ch] += gd[row * k + ch];
                    }
                }
                let mut dx = Tensor::zeros(&x_shape);
                let dxd = dx.data_mut();
                match mode {
                    Mode::Train => {
                        // dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat))
                        for row in 0..m {
                            for ch in 0..k {
                                let idx = row * k + ch;
                                dxd[idx] = gam[ch]
                                    * inv_std[ch]
                                    * (gd[idx]
                                        - dbeta[ch] / m as f64
                                        - xhat[idx] * dgamma[ch] / m as f64);
                            }
                        }
                    }
                    Mode::Eval => {
                        for row in 0..m {
                            for ch in 0..k {
                                let idx = row * k + ch;
                                dxd[idx] = gd[idx] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![
                    dx,
                    Tensor::from_vec(&[k], dgamma).expect("fixed shape"),
                    Tensor::from_vec(&[k], dbeta).expect("fixed shape"),
                ]
            }),
        ))
    }

    /// Inverted dropout: train mode zeroes each element with probability `p`
    /// and scales survivors by 1/(1-p); eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: ValueId,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let xv = self.value(x);
        match mode {
            Mode::Eval => {
                let v = xv.clone();
                Ok(self.push_op(v, vec![x], Box::new(|g| vec![g.clone()])))
            }
            Mode::Train => {
                let scale = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..xv.numel())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
                    .collect();
                let mask = Tensor::from_vec(xv.shape(), mask)?;
                let v = xv.zip(&mask, |a, m| a * m)?;
                Ok(self.push_op(
                    v,
                    vec![x],
                    Box::new(move |g| {
                        vec![g.zip(&mask, |gi, m| gi * m).expect("shapes fixed at record time")]
                    }),
                ))
            }
        }
    }

    // -- fused recurrence steps ---------------------------------------------

    /// One step of the diagonal selective state recurrence:
    /// `h[b,c,n] = exp(delta[b,c] * a[c,n]) * h_prev[b,c,n] + delta[b,c] * b_in[b,n] * x[b,c]`.
    pub fn ssm_step(
        &mut self,
        h_prev: ValueId,
        x: ValueId,
        delta: ValueId,
        b_in: ValueId,
        a: ValueId,
    ) -> Result<ValueId> {
        let hv = self.value(h_prev).clone();
        let xv = self.value(x).clone();
        let dv = self.value(delta).clone();
        let bv = self.value(b_in).clone();
        let av = self.value(a).clone();
        let (bsz, d, n) = match hv.shape() {
            [b, d, n] => (*b, *d, *n),
            s => return Err(Error::Shape(format!("ssm_step state must be [B, d, N], got {s:?}"))),
        };
        if xv.shape() != [bsz, d]
            || dv.shape() != [bsz, d]
            || bv.shape() != [bsz, n]
            || av.shape() != [d, n]
        {
            return Err(Error::Shape(format!(
                "ssm_step operand shapes inconsistent: h {:?} x {:?} delta {:?} b {:?} a {:?}",
                hv.shape(),
                xv.shape(),
                dv.shape(),
                bv.shape(),
                av.shape()
            )));
        }
        let mut data = vec![0.0; bsz * d * n];
        {
            let hd = hv.data();
            let xd = xv.data();
            let dd = dv.data();
            let bd = bv.data();
            let ad = av.data();
            for b in 0..bsz {
                for c in 0..d {
                    let dt = dd[b * d + c];
                    let xs = xd[b * d + c];
                    for j in 0..n {
                        let abar = (dt * ad[c * n + j]).exp();
                        data[(b * d + c) * n + j] =
                            abar * hd[(b * d + c) * n + j] + dt * bd[b * n + j] * xs;
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[bsz, d, n], data)?;
        Ok(self.push_op(
            v,
            vec![h_prev, x, delta, b_in, a],
            Box::new(move |g| {
                let gd = g.data();
                let hd = hv.data();
                let xd = xv.data();
                let dd = dv.data();
                let bd = bv.data();
                let ad = av.data();
                let mut dh = Tensor::zeros(&[bsz, d, n]);
                let mut dx = Tensor::zeros(&[bsz, d]);
                let mut ddelta = Tensor::zeros(&[bsz, d]);
                let mut db = Tensor::zeros(&[bsz, n]);
                let mut da = Tensor::zeros(&[d, n]);
                let dhd = dh.data_mut();
                let dxd = dx.data_mut();
                let ddd = ddelta.data_mut();
                let dbd = db.data_mut();
                let dad = da.data_mut();
                for b in 0..bsz {
                    for c in 0..d {
                        let dt = dd[b * d + c];
                        let xs = xd[b * d + c];
                        let mut acc_delta = 0.0;
                        let mut acc_x = 0.0;
                        for j in 0..n {
                            let idx = (b * d + c) * n + j;
                            let aval = ad[c * n + j];
                            let abar = (dt * aval).exp();
                            let gv = gd[idx];
                            dhd[idx] = gv * abar;
                            acc_delta += gv * (aval * abar * hd[idx] + bd[b * n + j] * xs);
                            acc_x += gv * dt * bd[b * n + j];
                            dbd[b * n + j] += gv * dt * xs;
                            dad[c * n + j] += gv * dt * abar * hd[idx];
                        }
                        ddd[b * d + c] = acc_delta;
                        dxd[b * d + c] = acc_x;
                    }
                }
                vec![dh, dx, ddelta, db, da]
            }),
        ))
    }

    /// Read-out of the state recurrence:
    /// `y[b,c] = sum_n c_in[b,n] * h[b,c,n] + d_skip[c] * x[b,c]`.
    pub fn ssm_read(
        &mut self,
        h: ValueId,
        c_in: ValueId,
        x: ValueId,
        d_skip: ValueId,
    ) -> Result<ValueId> {
        let hv = self.value(h).clone();
        let cv = self.value(c_in).clone();
        let xv = self.value(x).clone();
        let sv = self.value(d_skip).clone();
        let (bsz, d, n) = match hv.shape() {
            [b, d, n] => (*b, *d, *n),
            s => return Err(Error::Shape(format!("ssm_read state must be [B, d, N], got {s:?}"))),
        };
        if cv.shape() != [bsz, n] || xv.shape() != [bsz, d] || sv.shape() != [d] {
            return Err(Error::Shape(format!(
                "ssm_read operand shapes inconsistent: h {:?} c {:?} x {:?} d {:?}",
                hv.shape(),
                cv.shape(),
                xv.shape(),
                sv.shape()
            )));
        }
        let mut data = vec![0.0; bsz * d];
        {
            let hd = hv.data();
            let cd = cv.data();
            let xd = xv.data();
            let sd = sv.data();
            for b in 0..bsz {
                for c in 0..d {
                    let mut acc = sd[c] * xd[b * d + c];
                    for j in 0..n {
                        acc += cd[b * n + j] * hd[(b * d + c) * n + j];
                    }
                    data[b * d + c] = acc;
                }
            }
        }
        let v = Tensor::from_vec(&[bsz, d], data)?;
        Ok(self.push_op(
            v,
            vec![h, c_in, x, d_skip],
            Box::new(move |g| {
                let gd = g.data();
                let hd = hv.data();
                let cd = cv.data();
                let xd = xv.data();
                let sd = sv.data();
                let mut dh = Tensor::zeros(&[bsz, d, n]);
                let mut dc = Tensor::zeros(&[bsz, n]);
                let mut dx = Tensor::zeros(&[bsz, d]);
                let mut ds = Tensor::zeros(&[d]);
                let dhd = dh.data_mut();
                let dcd = dc.data_mut();
                let dxd = dx.data_mut();
                let dsd = ds.data_mut();
                for b in 0..bsz {
                    for c in 0..d {
                        let gv = gd[b * d + c];
                        dxd[b * d + c] = gv * sd[c];
                        dsd[c] += gv * xd[b * d + c];
                        for j in 0..n {
                            let idx = (b * d + c) * n + j;
                            dhd[idx] = gv * cd[b * n + j];
                            dcd[b * n + j] += gv * hd[idx];
                        }
                    }
                }
                vec![dh, dc, dx, ds]
            }),
        ))
    }

    // -- quantum bridge ------------------------------------------------------

    /// Run one 3-qubit group circuit per (batch row, variable). Input is
    /// `[B, V, 3]` embedding angles, `angles` is `[V, 11]` trainable angles.
    /// Backward uses the parameter-shift rule for both operands, so gradient
    /// flows into the embedding angles as well.
    pub fn quantum_groups(&mut self, x: ValueId, angles: ValueId) -> Result<ValueId> {
        let xv = self.value(x).clone();
        let av = self.value(angles).clone();
        let (bsz, vars) = match xv.shape() {
            [b, v, 3] => (*b, *v),
            s => {
                return Err(Error::Shape(format!(
                    "quantum_groups input must be [B, V, 3], got {s:?}"
                )))
            }
        };
        if av.shape() != [vars, GROUP_PARAM_COUNT] {
            return Err(Error::Shape(format!(
                "quantum_groups angles must be [{vars}, {GROUP_PARAM_COUNT}], got {:?}",
                av.shape()
            )));
        }
        let mut params = Vec::with_capacity(vars);
        for v in 0..vars {
            params.push(GroupCircuitParams::from_flat(
                &av.data()[v * GROUP_PARAM_COUNT..(v + 1) * GROUP_PARAM_COUNT],
            )?);
        }
        let mut data = vec![0.0; bsz * vars * 3];
        for b in 0..bsz {
            for v in 0..vars {
                let base = (b * vars + v) * 3;
                let inputs = [xv.data()[base], xv.data()[base + 1], xv.data()[base + 2]];
                let out = quantum::run_group_circuit(inputs, &params[v]);
                data[base..base + 3].copy_from_slice(&out);
            }
        }
        let out = Tensor::from_vec(&[bsz, vars, 3], data)?;
        Ok(self.push_op(
            out,
            vec![x, angles],
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = Tensor::zeros(&[bsz, vars, 3]);
                let mut da = Tensor::zeros(&[vars, GROUP_PARAM_COUNT]);
                let dxd = dx.data_mut();
                let dad = da.data_mut();
                for b in 0..bsz {
                    for v in 0..vars {
                        let base = (b * vars + v) * 3;
                        let upstream = [gd[base], gd[base + 1], gd[base + 2]];
                        if upstream == [0.0; 3] {
                            continue;
                        }
                        let inputs =
                            [xv.data()[base], xv.data()[base + 1], xv.data()[base + 2]];
                        let (ig, pg) = quantum::param_shift_grad(inputs, &params[v], upstream);
                        dxd[base..base + 3].copy_from_slice(&ig);
                        for (slot, gi) in
                            dad[v * GROUP_PARAM_COUNT..(v + 1) * GROUP_PARAM_COUNT]
                                .iter_mut()
                                .zip(pg)
                        {
                            *slot += gi;
                        }
                    }
                }
                vec![dx, da]
            }),
        ))
    }
}

fn transpose_last2_raw(x: &Tensor) -> Tensor {
    let rank = x.shape().len();
    let (m, n) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let outer: usize = x.shape()[..rank - 2].iter().product();
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = n;
    shape[rank - 1] = m;
    let src = x.data();
    let mut data = vec![0.0; x.numel()];
    for o in 0..outer {
        let base = o * m * n;
        for i in 0..m {
            for j in 0..n {
                data[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    Tensor::from_vec(&shape, data).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_tape_grads, projection};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Push inputs away from zero so piecewise activations are probed away
    /// from their kinks.
    fn off_kink(t: &Tensor, margin: f64) -> Tensor {
        t.map(|x| x + margin * x.signum())
    }

    fn check_grads(
        inputs: &[Tensor],
        build: &dyn Fn(&mut Tape, &[ValueId]) -> ValueId,
        h: f64,
        tol: f64,
        floor: f64,
    ) {
        let worst = check_tape_grads(inputs, build, h, floor);
        assert!(worst < tol, "gradient mismatch: worst relative error {worst:.3e} >= {tol:.1e}");
    }

    fn classical_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[ValueId]) -> ValueId) {
        check_grads(inputs, build, 1e-5, 1e-4, 1e-6);
    }

    // -- linear ---------------------------------------------------------

    #[test]
    fn linear_identity_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_summation_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.linear(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[4, 3], -1.5, 1.5);
            let w = rand_tensor(&mut rng, &[3, 5], -1.5, 1.5);
            let b = rand_tensor(&mut rng, &[5], -1.5, 1.5);
            classical_check(&[x, w, b], &|t, ids| t.linear(ids[0], ids[1], ids[2]).unwrap());
        }
    }

    // -- conv1d -----------------------------------------------------------

    #[test]
    fn conv1d_identity_tap() {
        // kernel [0,1,0] per channel, zero bias: output equals input
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[4, 2], (1..=8).map(f64::from).collect()).unwrap());
        let mut k = Tensor::zeros(&[3, 2, 2]);
        k.data_mut()[1 * 4 + 0 * 2 + 0] = 1.0; // t=1, in 0 -> out 0
        k.data_mut()[1 * 4 + 1 * 2 + 1] = 1.0; // t=1, in 1 -> out 1
        let k = tape.constant(k);
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv1d_temporal(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv1d_hand_evaluated() {
        // all-ones input L=3 K=1 with kernel [1,1,1]: edges see one zero pad
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 1], 1.0));
        let k = tape.constant(Tensor::full(&[3, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d_temporal(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 2.0]);
    }

    #[test]
    fn conv1d_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let k = tape.constant(Tensor::zeros(&[3, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.conv1d_temporal(x, k, b).is_err());
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[3, 7], -1.5, 1.5);
            let k = rand_tensor(&mut rng, &[3, 7, 4], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
            classical_check(&[x, k, b], &|t, ids| {
                t.conv1d_temporal(ids[0], ids[1], ids[2]).unwrap()
            });
        }
    }

    // -- conv2d depthwise ---------------------------------------------------

    #[test]
    fn conv2d_corner_pick() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d_depthwise(x, k, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv2d_hand_evaluated_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap(),
        );
        let k = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d_depthwise(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_rejects_small_spatial_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3]));
        let k = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.conv2d_depthwise(x, k, b).is_err());
    }

    #[test]
    fn conv2d_channels_stay_independent() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let x = rand_tensor(&mut rng, &[3, 3, 3], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 2, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let ki = tape.constant(k.clone());
            let bi = tape.constant(b.clone());
            let y = tape.conv2d_depthwise(xi, ki, bi).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        let mut perturbed = x.clone();
        perturbed.data_mut()[1 * 9 + 4] += 0.5; // channel 1 only
        let out = run(&perturbed);
        for c in 0..3 {
            let changed = (0..4).any(|i| base.data()[c * 4 + i] != out.data()[c * 4 + i]);
            assert_eq!(changed, c == 1);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[2, 3, 3], -1.5, 1.5);
            let k = rand_tensor(&mut rng, &[2, 2, 2], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
            classical_check(&[x, k, b], &|t, ids| {
                t.conv2d_depthwise(ids[0], ids[1], ids[2]).unwrap()
            });
        }
    }

    // -- maxpool -------------------------------------------------------------

    #[test]
    fn maxpool_picks_max() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool_spatial(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::full(&[1, 2, 2], 7.0));
        let y = tape.maxpool_spatial(x).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradients_match_finite_differences() {
        // fixed, well-separated values keep the argmax stable under probing
        let x = Tensor::from_vec(
            &[2, 2, 3],
            vec![0.1, 0.9, -0.4, 0.3, -0.8, 0.5, -0.2, 0.6, 1.3, 0.0, -0.5, 0.7],
        )
        .unwrap();
        classical_check(&[x], &|t, ids| t.maxpool_spatial(ids[0]).unwrap());
    }

    // -- activations ----------------------------------------------------------

    #[test]
    fn activation_fixed_points() {
        assert_eq!(ActivationKind::LeakyRelu02.apply(-1.0), -0.2);
        assert_eq!(ActivationKind::LeakyRelu02.apply(2.0), 2.0);
        assert_eq!(ActivationKind::ScaledTanh3.apply(0.0), 0.0);
        assert!((ActivationKind::ScaledTanh3.apply(50.0) - 3.0).abs() < 1e-12);
        assert_eq!(ActivationKind::Silu.apply(0.0), 0.0);
        assert_eq!(ActivationKind::Gelu.apply(0.0), 0.0);
        assert_eq!(ActivationKind::Elu.apply(0.0), 0.0);
    }

    #[test]
    fn activation_parse_rejects_unknown() {
        assert!("relu".parse::<ActivationKind>().is_err());
        assert_eq!("silu".parse::<ActivationKind>().unwrap(), ActivationKind::Silu);
        assert_eq!(
            "leaky_relu_0.2".parse::<ActivationKind>().unwrap(),
            ActivationKind::LeakyRelu02
        );
    }

    #[test]
    fn scaled_tanh_stays_strictly_inside_bounds() {
        for &x in &[-700.0, -10.0, -1.0, 0.0, 1.0, 10.0, 700.0, f64::MAX] {
            let y = ActivationKind::ScaledTanh3.apply(x);
            assert!(y > -3.0 && y < 3.0, "stanh3({x}) = {y} escapes (-3, 3)");
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let kinds = [
            ActivationKind::LeakyRelu02,
            ActivationKind::Silu,
            ActivationKind::Elu,
            ActivationKind::Gelu,
            ActivationKind::Sigmoid,
            ActivationKind::Tanh,
            ActivationKind::ScaledTanh3,
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(59);
        for kind in kinds {
            for _ in 0..15 {
                let x = off_kink(&rand_tensor(&mut rng, &[3, 4], -1.5, 1.5), 0.2);
                classical_check(&[x], &|t, ids| t.activation(kind, ids[0]));
            }
        }
    }

    #[test]
    fn softplus_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        for _ in 0..15 {
            let x = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
            classical_check(&[x], &|t, ids| t.softplus(ids[0]));
        }
    }

    // -- batchnorm --------------------------------------------------------------

    #[test]
    fn batchnorm_on_standardized_batch_is_nearly_identity() {
        // batch [4, 1] with mean 0 and variance 1
        let vals = vec![-1.0, 1.0, -1.0, 1.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[4, 1], vals.clone()).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut st = BnState::new(1);
        let y = tape.batchnorm(x, g, b, &mut st, Mode::Train).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(&vals) {
            assert!((o - i).abs() < 1e-4); // eps-induced shrink only
        }
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut rng = ChaCha12Rng::seed_from_u64(67);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 2, 4], -2.0, 2.0));
        let g = tape.constant(Tensor::zeros(&[4]));
        let b = tape.constant(Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let mut st = BnState::new(4);
        let y = tape.batchnorm(x, g, b, &mut st, Mode::Train).unwrap();
        for row in 0..6 {
            assert_eq!(&tape.value(y).data()[row * 4..row * 4 + 4], &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn batchnorm_rejects_small_batches_in_train_mode() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let mut st = BnState::new(4);
        assert!(matches!(
            tape.batchnorm(x, g, b, &mut st, Mode::Train),
            Err(Error::Batch(_))
        ));
        // eval mode accepts batch size 1
        assert!(tape.batchnorm(x, g, b, &mut st, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_updates_running_stats_with_momentum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut st = BnState::new(1);
        tape.batchnorm(x, g, b, &mut st, Mode::Train).unwrap();
        // mean 2, biased var 1: running = 0.9 * init + 0.1 * batch
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        for mode in [Mode::Train, Mode::Eval] {
            for _ in 0..10 {
                let x = rand_tensor(&mut rng, &[4, 3, 2], -2.0, 2.0);
                let g = rand_tensor(&mut rng, &[2], 0.5, 1.5);
                let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
                classical_check(&[x, g, b], &|t, ids| {
                    let mut st = BnState::new(2);
                    st.running_mean = vec![0.3, -0.2];
                    st.running_var = vec![1.4, 0.8];
                    t.batchnorm(ids[0], ids[1], ids[2], &mut st, mode).unwrap()
                });
            }
        }
    }

    // -- dropout -----------------------------------------------------------------

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(73);
        let x = rand_tensor(&mut rng, &[5, 5], -2.0, 2.0);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let y = tape.dropout(xi, 0.2, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn dropout_zero_probability_is_identity_in_train_mode() {
        let mut rng = ChaCha12Rng::seed_from_u64(79);
        let x = rand_tensor(&mut rng, &[5, 5], -2.0, 2.0);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let y = tape.dropout(xi, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = ChaCha12Rng::seed_from_u64(83);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));
        assert!(matches!(tape.dropout(x, -0.1, Mode::Train, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_keep_rate_is_calibrated() {
        let mut rng = ChaCha12Rng::seed_from_u64(89);
        let n = 100_000;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let y = tape.dropout(x, 0.2, Mode::Train, &mut rng).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.8).abs() < 0.01, "keep rate {rate}");
        // survivors are scaled by 1/(1-p)
        let survivor = tape.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.25).abs() < 1e-12);
    }

    #[test]
    fn dropout_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(97);
        let x = rand_tensor(&mut rng, &[4, 4], -1.5, 1.5);
        classical_check(&[x], &|t, ids| {
            let mut rng = ChaCha12Rng::seed_from_u64(5); // same mask on every probe
            t.dropout(ids[0], 0.2, Mode::Train, &mut rng).unwrap()
        });
    }

    // -- backward mechanics ---------------------------------------------------

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates_and_zero_grads_resets() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let first = tape.grad(x).data().to_vec();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data()[0], 2.0 * first[0]);
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), first.as_slice());
    }

    #[test]
    fn reshape_backward_is_reshape_of_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap());
        let r = tape.reshape(x, &[3, 2]).unwrap();
        let w = tape.constant(projection(&[3, 2]));
        let p = tape.mul(r, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).shape(), &[2, 3]);
        assert_eq!(tape.grad(x).data(), projection(&[3, 2]).data());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let a = rand_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let ai = tape.constant(a.clone());
        let bi = tape.constant(b.clone());
        let cat = tape.concat(1, &[ai, bi]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 6, 3]);
        let back_a = tape.narrow(cat, 1, 0, 2).unwrap();
        let back_b = tape.narrow(cat, 1, 2, 4).unwrap();
        assert_eq!(tape.value(back_a).data(), a.data());
        assert_eq!(tape.value(back_b).data(), b.data());
    }

    #[test]
    fn shape_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(103);
        let a = rand_tensor(&mut rng, &[2, 3, 2], -1.5, 1.5);
        let b = rand_tensor(&mut rng, &[2, 2, 2], -1.5, 1.5);
        classical_check(&[a.clone(), b], &|t, ids| {
            let cat = t.concat(1, &[ids[0], ids[1]]).unwrap();
            let cut = t.narrow(cat, 1, 1, 3).unwrap();
            let tr = t.transpose_last2(cut).unwrap();
            t.reshape(tr, &[2, 6]).unwrap()
        });
        classical_check(&[a], &|t, ids| t.mean(ids[0]));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(107);
        let a = rand_tensor(&mut rng, &[3, 3], -1.5, 1.5);
        let b = rand_tensor(&mut rng, &[3, 3], -1.5, 1.5);
        classical_check(&[a.clone(), b.clone()], &|t, ids| t.add(ids[0], ids[1]).unwrap());
        classical_check(&[a.clone(), b.clone()], &|t, ids| t.sub(ids[0], ids[1]).unwrap());
        classical_check(&[a, b], &|t, ids| t.mul(ids[0], ids[1]).unwrap());
    }

    // -- fused recurrence ops ----------------------------------------------------

    #[test]
    fn ssm_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(109);
        for _ in 0..10 {
            let h = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
            let d = rand_tensor(&mut rng, &[2, 3], 0.05, 0.5);
            let b = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
            let a = rand_tensor(&mut rng, &[3, 4], -1.5, -0.2);
            classical_check(&[h, x, d, b, a], &|t, ids| {
                t.ssm_step(ids[0], ids[1], ids[2], ids[3], ids[4]).unwrap()
            });

            let h = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let c = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
            let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
            let s = rand_tensor(&mut rng, &[3], -1.0, 1.0);
            classical_check(&[h, c, x, s], &|t, ids| {
                t.ssm_read(ids[0], ids[1], ids[2], ids[3]).unwrap()
            });
        }
    }

    // -- quantum bridge ------------------------------------------------------------

    #[test]
    fn quantum_groups_matches_direct_circuit() {
        let mut rng = ChaCha12Rng::seed_from_u64(113);
        let x = rand_tensor(&mut rng, &[2, 3, 3], -2.0, 2.0);
        let angles = rand_tensor(&mut rng, &[3, 11], -2.0, 2.0);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let ai = tape.constant(angles.clone());
        let y = tape.quantum_groups(xi, ai).unwrap();
        for b in 0..2 {
            for v in 0..3 {
                let base = (b * 3 + v) * 3;
                let inputs = [x.data()[base], x.data()[base + 1], x.data()[base + 2]];
                let p =
                    GroupCircuitParams::from_flat(&angles.data()[v * 11..(v + 1) * 11]).unwrap();
                let direct = quantum::run_group_circuit(inputs, &p);
                for k in 0..3 {
                    assert_eq!(tape.value(y).data()[base + k], direct[k]);
                }
            }
        }
    }

    #[test]
    fn quantum_groups_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(127);
        let x = rand_tensor(&mut rng, &[2, 2, 3], -2.0, 2.0);
        let angles = rand_tensor(&mut rng, &[2, 11], -2.0, 2.0);
        check_grads(
            &[x, angles],
            &|t, ids| t.quantum_groups(ids[0], ids[1]).unwrap(),
            1e-6,
            1e-6,
            1e-3,
        );
    }
}
