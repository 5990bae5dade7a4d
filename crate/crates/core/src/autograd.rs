//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted graph node. Nodes only keep their inputs
//! alive when at least one input requires a gradient, so a forward pass over
//! frozen parameters frees intermediates as soon as they go out of scope.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::metrics::{huber_elem, huber_elem_grad, ssim_plane, ssim_plane_grad, SsimParams};
use crate::scalar::{lit, matmul_new, matmul_nt, matmul_tn_new, Scalar};
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements per chunk of samples.
const COL_BUDGET: usize = 1 << 24;

/// Convolution geometry. `out_pad` only applies to transposed convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kernel, stride, pad, out_pad: 0 }
    }

    pub fn transposed(kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Self {
        ConvGeom { kernel, stride, pad, out_pad }
    }

    fn conv_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn tconv_out(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel + self.out_pad).checked_sub(2 * self.pad)
    }
}

enum Op<T: Scalar> {
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Scale(Var<T>, T),
    Abs(Var<T>),
    Square(Var<T>),
    Relu(Var<T>),
    LeakyRelu(Var<T>, T),
    Sigmoid(Var<T>),
    Mean(Var<T>),
    Reshape(Var<T>),
    Conv2d { x: Var<T>, w: Var<T>, b: Var<T>, geom: ConvGeom },
    ConvTranspose2d { x: Var<T>, w: Var<T>, b: Var<T>, geom: ConvGeom },
    GroupNorm { x: Var<T>, gamma: Var<T>, beta: Var<T>, groups: usize, stats: Vec<(T, T)> },
    Linear { x: Var<T>, w: Var<T>, b: Var<T> },
    Huber { x: Var<T>, y: Var<T>, delta: T },
    SsimLoss { x: Var<T>, y: Var<T>, params: SsimParams },
    BceLogits { logits: Var<T>, target: Tensor<T> },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// Handle to a node in the computation graph.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Var<T> {
    fn from_op(value: Tensor<T>, op: Op<T>, inputs: &[&Var<T>]) -> Var<T> {
        let requires_grad = inputs.iter().any(|v| v.0.requires_grad);
        Var(Rc::new(Node {
            value: Arc::new(value),
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Var<T> {
        Var(Rc::new(Node { value: Arc::new(value), op: None, requires_grad: false }))
    }

    /// A leaf whose gradient is collected by [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Var<T> {
        Var(Rc::new(Node { value: Arc::new(value), op: None, requires_grad: true }))
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn shared(value: Arc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        Var(Rc::new(Node { value, op: None, requires_grad }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_meta(&self) -> bool {
        self.0.value.is_meta()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        Var(Rc::new(Node { value: Arc::clone(&self.0.value), op: None, requires_grad: false }))
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<T> {
        let v = self.value().map(f);
        Var::from_op(v, op, &[self])
    }

    fn binary(&self, other: &Var<T>, op: Op<T>, f: impl Fn(T, T) -> T, what: &str) -> Result<Var<T>> {
        same_shape(self, other, what)?;
        let v = if self.is_meta() || other.is_meta() {
            Tensor::meta(self.shape())
        } else {
            let data = self.value().data().iter().zip(other.value().data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::from_vec(self.shape(), data)?
        };
        Ok(Var::from_op(v, op, &[self, other]))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Add(self.clone(), other.clone()), |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Sub(self.clone(), other.clone()), |a, b| a - b, "sub")
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Mul(self.clone(), other.clone()), |a, b| a * b, "mul")
    }

    pub fn scale(&self, s: T) -> Var<T> {
        self.unary(Op::Scale(self.clone(), s), |a| a * s)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(Op::Abs(self.clone()), |a| a.abs())
    }

    pub fn square(&self) -> Var<T> {
        self.unary(Op::Square(self.clone()), |a| a * a)
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(Op::Relu(self.clone()), |a| if a > T::zero() { a } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        self.unary(Op::LeakyRelu(self.clone(), slope), |a| if a > T::zero() { a } else { a * slope })
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(Op::Sigmoid(self.clone()), sigmoid)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&self) -> Var<T> {
        let v = if self.is_meta() {
            Tensor::meta(&[1])
        } else {
            let n = T::from_usize(self.value().numel()).unwrap();
            Tensor::scalar(self.value().data().iter().copied().sum::<T>() / n)
        };
        Var::from_op(v, Op::Mean(self.clone()), &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let v = if self.is_meta() {
            if shape.iter().product::<usize>() != self.value().numel() {
                return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape(), shape)));
            }
            Tensor::meta(shape)
        } else {
            (*self.0.value).clone().reshaped(shape)?
        };
        Ok(Var::from_op(v, Op::Reshape(self.clone()), &[self]))
    }

    /// 2-D convolution. `w` is `[cout, cin, k, k]`, `b` is `[cout]`.
    pub fn conv2d(&self, w: &Var<T>, b: &Var<T>, geom: ConvGeom) -> Result<Var<T>> {
        let (n, cin, h, wd) = dims4(self.shape(), "conv2d input")?;
        let (cout, wcin, k1, k2) = dims4(w.shape(), "conv2d weight")?;
        if wcin != cin || k1 != geom.kernel || k2 != geom.kernel || b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}, kernel {}",
                self.shape(),
                w.shape(),
                b.shape(),
                geom.kernel
            )));
        }
        let (ho, wo) = match (geom.conv_out(h), geom.conv_out(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Shape(format!("conv2d: {h}x{wd} too small for kernel {}", geom.kernel))),
        };
        let out_shape = [n, cout, ho, wo];
        let v = if self.is_meta() || w.is_meta() {
            Tensor::meta(&out_shape)
        } else {
            let data = conv2d_forward(self.value().data(), w.value().data(), b.value().data(), n, cin, h, wd, cout, geom, ho, wo);
            Tensor::from_vec(&out_shape, data)?
        };
        Ok(Var::from_op(v, Op::Conv2d { x: self.clone(), w: w.clone(), b: b.clone(), geom }, &[self, w, b]))
    }

    /// Transposed 2-D convolution. `w` is `[cin, cout, k, k]`, `b` is `[cout]`.
    pub fn conv_transpose2d(&self, w: &Var<T>, b: &Var<T>, geom: ConvGeom) -> Result<Var<T>> {
        let (n, cin, h, wd) = dims4(self.shape(), "conv_transpose2d input")?;
        let (wcin, cout, k1, k2) = dims4(w.shape(), "conv_transpose2d weight")?;
        if wcin != cin || k1 != geom.kernel || k2 != geom.kernel || b.shape() != [cout] || geom.out_pad >= geom.stride.max(1) && geom.out_pad > 0 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input {:?}, weight {:?}, bias {:?}, geom {:?}",
                self.shape(),
                w.shape(),
                b.shape(),
                geom
            )));
        }
        let (ho, wo) = match (geom.tconv_out(h), geom.tconv_out(wd)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::Shape("conv_transpose2d: empty output".into())),
        };
        let out_shape = [n, cout, ho, wo];
        let v = if self.is_meta() || w.is_meta() {
            Tensor::meta(&out_shape)
        } else {
            let data = tconv_forward(self.value().data(), w.value().data(), b.value().data(), n, cin, h, wd, cout, geom, ho, wo);
            Tensor::from_vec(&out_shape, data)?
        };
        Ok(Var::from_op(
            v,
            Op::ConvTranspose2d { x: self.clone(), w: w.clone(), b: b.clone(), geom },
            &[self, w, b],
        ))
    }

    /// Group normalization with per-channel affine `gamma`, `beta` (`[c]`).
    pub fn group_norm(&self, gamma: &Var<T>, beta: &Var<T>, groups: usize) -> Result<Var<T>> {
        let (n, c, h, w) = dims4(self.shape(), "group_norm input")?;
        if groups == 0 || c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!("group_norm: {c} channels, {groups} groups")));
        }
        if self.is_meta() {
            let v = Tensor::meta(self.shape());
            return Ok(Var::from_op(
                v,
                Op::GroupNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), groups, stats: vec![] },
                &[self, gamma, beta],
            ));
        }
        let x = self.value().data();
        let (g, bt) = (gamma.value().data(), beta.value().data());
        let cg = c / groups;
        let m = cg * h * w;
        let eps = lit::<T>(1e-5);
        let mf = T::from_usize(m).unwrap();
        let mut out = vec![T::zero(); x.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * h * w;
                let seg = &x[start..start + m];
                let mean = seg.iter().copied().sum::<T>() / mf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let rstd = T::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = start + ci * h * w;
                    for i in off..off + h * w {
                        out[i] = (x[i] - mean) * rstd * g[ch] + bt[ch];
                    }
                }
            }
        }
        let v = Tensor::from_vec(self.shape(), out)?;
        Ok(Var::from_op(
            v,
            Op::GroupNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), groups, stats },
            &[self, gamma, beta],
        ))
    }

    /// `x · wᵀ + b` with `x` `[n, d]`, `w` `[o, d]`, `b` `[o]`.
    pub fn linear(&self, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if self.shape().len() != 2 || w.shape().len() != 2 || w.shape()[1] != self.shape()[1] || b.shape() != [w.shape()[0]] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (n, d, o) = (self.shape()[0], self.shape()[1], w.shape()[0]);
        let v = if self.is_meta() || w.is_meta() {
            Tensor::meta(&[n, o])
        } else {
            let mut out = vec![T::zero(); n * o];
            for row in out.chunks_mut(o) {
                row.copy_from_slice(b.value().data());
            }
            matmul_nt(n, d, o, self.value().data(), w.value().data(), &mut out, true);
            Tensor::from_vec(&[n, o], out)?
        };
        Ok(Var::from_op(v, Op::Linear { x: self.clone(), w: w.clone(), b: b.clone() }, &[self, w, b]))
    }

    /// Mean Huber penalty of `self − target`.
    pub fn huber_loss(&self, target: &Var<T>, delta: T) -> Result<Var<T>> {
        same_shape(self, target, "huber")?;
        let v = if self.is_meta() || target.is_meta() {
            Tensor::meta(&[1])
        } else {
            let n = T::from_usize(self.value().numel()).unwrap();
            let s: T = self
                .value()
                .data()
                .iter()
                .zip(target.value().data())
                .map(|(&a, &b)| huber_elem(a - b, delta))
                .sum();
            Tensor::scalar(s / n)
        };
        Ok(Var::from_op(v, Op::Huber { x: self.clone(), y: target.clone(), delta }, &[self, target]))
    }

    /// `1 − SSIM`, averaged over the batch; inputs are `[n, c, h, w]`.
    pub fn ssim_loss(&self, other: &Var<T>, params: &SsimParams) -> Result<Var<T>> {
        same_shape(self, other, "ssim")?;
        let (n, c, h, w) = dims4(self.shape(), "ssim input")?;
        params.validate()?;
        params.check_dims(h, w)?;
        let v = if self.is_meta() || other.is_meta() {
            Tensor::meta(&[1])
        } else {
            let planes = n * c;
            let (x, y) = (self.value().data(), other.value().data());
            let mut acc = T::zero();
            for p in 0..planes {
                let r = p * h * w..(p + 1) * h * w;
                acc += ssim_plane(&x[r.clone()], &y[r], h, w, params);
            }
            Tensor::scalar(T::one() - acc / T::from_usize(planes).unwrap())
        };
        Ok(Var::from_op(
            v,
            Op::SsimLoss { x: self.clone(), y: other.clone(), params: params.clone() },
            &[self, other],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against constant targets.
    pub fn bce_with_logits(&self, target: &Tensor<T>) -> Result<Var<T>> {
        if self.shape() != target.shape() {
            return Err(Error::Shape(format!("bce: {:?} vs {:?}", self.shape(), target.shape())));
        }
        let v = if self.is_meta() {
            Tensor::meta(&[1])
        } else {
            let n = T::from_usize(self.value().numel()).unwrap();
            let s: T = self
                .value()
                .data()
                .iter()
                .zip(target.data())
                .map(|(&l, &t)| l.max(T::zero()) - l * t + (T::one() + (-l.abs()).exp()).ln())
                .sum();
            Tensor::scalar(s / n)
        };
        Ok(Var::from_op(v, Op::BceLogits { logits: self.clone(), target: target.clone() }, &[self]))
    }

    /// Reverse-mode sweep from a one-element output. Returns gradients of every
    /// leaf that requires one.
    pub fn backward(&self) -> Result<Grads<T>> {
        if self.value().numel() != 1 || self.is_meta() {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape())));
        }
        let order = topo_order(self);
        let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        pending.insert(self.id(), Tensor::scalar(T::one()));
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            match &node.0.op {
                None => {
                    leaves.insert(node.id(), g);
                }
                Some(op) => backward_op(op, &node.0.value, &g, &mut pending),
            }
        }
        Ok(Grads { by_node: leaves })
    }
}

/// Gradients of leaf variables, keyed by node identity.
pub struct Grads<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        self.by_node.remove(&v.id())
    }
}

#[inline]
fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(Error::Shape(format!("{what}: expected 4 dims, got {shape:?}"))),
    }
}

fn inputs<T: Scalar>(op: &Op<T>) -> Vec<&Var<T>> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Sigmoid(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![a],
        Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![x, w, b],
        Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Huber { x, y, .. } | Op::SsimLoss { x, y, .. } => vec![x, y],
        Op::BceLogits { logits, .. } => vec![logits],
    }
}

fn topo_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(op) = &v.0.op {
            for inp in inputs(op) {
                if inp.0.requires_grad && !seen.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

fn accumulate<T: Scalar>(pending: &mut HashMap<usize, Tensor<T>>, v: &Var<T>, g: Tensor<T>) {
    if !v.0.requires_grad {
        return;
    }
    match pending.get_mut(&v.id()) {
        Some(acc) => acc.add_assign(&g),
        None => {
            pending.insert(v.id(), g);
        }
    }
}

fn zip_grad<T: Scalar>(v: &Var<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = v.value().data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect();
    Tensor::from_vec(v.shape(), data).expect("gradient shape")
}

fn backward_op<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, pending: &mut HashMap<usize, Tensor<T>>) {
    match op {
        Op::Add(a, b) => {
            accumulate(pending, a, g.clone());
            accumulate(pending, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(pending, a, g.clone());
            if b.requires_grad() {
                accumulate(pending, b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                accumulate(pending, a, zip_grad(b, g, |bv, gv| bv * gv));
            }
            if b.requires_grad() {
                accumulate(pending, b, zip_grad(a, g, |av, gv| av * gv));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(pending, a, g.map(|v| v * s));
        }
        Op::Abs(a) => accumulate(pending, a, zip_grad(a, g, |x, gv| if x > T::zero() { gv } else if x < T::zero() { -gv } else { T::zero() })),
        Op::Square(a) => accumulate(pending, a, zip_grad(a, g, |x, gv| lit::<T>(2.0) * x * gv)),
        Op::Relu(a) => accumulate(pending, a, zip_grad(a, g, |x, gv| if x > T::zero() { gv } else { T::zero() })),
        Op::LeakyRelu(a, s) => {
            let s = *s;
            accumulate(pending, a, zip_grad(a, g, |x, gv| if x > T::zero() { gv } else { gv * s }))
        }
        Op::Sigmoid(a) => {
            let data = out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
            accumulate(pending, a, Tensor::from_vec(a.shape(), data).unwrap());
        }
        Op::Mean(a) => {
            let n = T::from_usize(a.value().numel()).unwrap();
            accumulate(pending, a, Tensor::full(a.shape(), g.item() / n));
        }
        Op::Reshape(a) => accumulate(pending, a, g.clone().reshaped(a.shape()).unwrap()),
        Op::Conv2d { x, w, b, geom } => {
            let (n, cin, h, wd) = dims4(x.shape(), "").unwrap();
            let (cout, ho, wo) = (out.shape()[1], out.shape()[2], out.shape()[3]);
            let (gx, gw) = conv2d_backward(
                x.value().data(),
                w.value().data(),
                g.data(),
                n,
                cin,
                h,
                wd,
                cout,
                *geom,
                ho,
                wo,
                x.requires_grad(),
                w.requires_grad(),
            );
            if let Some(gx) = gx {
                accumulate(pending, x, Tensor::from_vec(x.shape(), gx).unwrap());
            }
            if let Some(gw) = gw {
                accumulate(pending, w, Tensor::from_vec(w.shape(), gw).unwrap());
            }
            if b.requires_grad() {
                accumulate(pending, b, Tensor::from_vec(b.shape(), channel_sums(g.data(), n, cout, ho * wo)).unwrap());
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (n, cin, h, wd) = dims4(x.shape(), "").unwrap();
            let (cout, ho, wo) = (out.shape()[1], out.shape()[2], out.shape()[3]);
            let (gx, gw) = tconv_backward(
                x.value().data(),
                w.value().data(),
                g.data(),
                n,
                cin,
                h,
                wd,
                cout,
                *geom,
                ho,
                wo,
                x.requires_grad(),
                w.requires_grad(),
            );
            if let Some(gx) = gx {
                accumulate(pending, x, Tensor::from_vec(x.shape(), gx).unwrap());
            }
            if let Some(gw) = gw {
                accumulate(pending, w, Tensor::from_vec(w.shape(), gw).unwrap());
            }
            if b.requires_grad() {
                accumulate(pending, b, Tensor::from_vec(b.shape(), channel_sums(g.data(), n, cout, ho * wo)).unwrap());
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, stats } => {
            let (n, c, h, w) = dims4(x.shape(), "").unwrap();
            let hw = h * w;
            let cg = c / groups;
            let m = cg * hw;
            let mf = T::from_usize(m).unwrap();
            let xs = x.value().data();
            let gam = gamma.value().data();
            let gd = g.data();
            let mut gx = vec![T::zero(); xs.len()];
            let mut ggam = vec![T::zero(); c];
            let mut gbet = vec![T::zero(); c];
            for ni in 0..n {
                for gi in 0..*groups {
                    let (mean, rstd) = stats[ni * groups + gi];
                    let start = (ni * c + gi * cg) * hw;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        for i in start + ci * hw..start + (ci + 1) * hw {
                            let xh = (xs[i] - mean) * rstd;
                            ggam[ch] += gd[i] * xh;
                            gbet[ch] += gd[i];
                            let d = gd[i] * gam[ch];
                            sum_d += d;
                            sum_dx += d * xh;
                        }
                    }
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        for i in start + ci * hw..start + (ci + 1) * hw {
                            let xh = (xs[i] - mean) * rstd;
                            let d = gd[i] * gam[ch];
                            gx[i] = rstd / mf * (mf * d - sum_d - xh * sum_dx);
                        }
                    }
                }
            }
            accumulate(pending, x, Tensor::from_vec(x.shape(), gx).unwrap());
            accumulate(pending, gamma, Tensor::from_vec(&[c], ggam).unwrap());
            accumulate(pending, beta, Tensor::from_vec(&[c], gbet).unwrap());
        }
        Op::Linear { x, w, b } => {
            let (n, d, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            if x.requires_grad() {
                let gx = matmul_new(n, o, d, g.data(), w.value().data());
                accumulate(pending, x, Tensor::from_vec(x.shape(), gx).unwrap());
            }
            if w.requires_grad() {
                let gw = matmul_tn_new(o, n, d, g.data(), x.value().data());
                accumulate(pending, w, Tensor::from_vec(w.shape(), gw).unwrap());
            }
            if b.requires_grad() {
                let mut gb = vec![T::zero(); o];
                for row in g.data().chunks(o) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                accumulate(pending, b, Tensor::from_vec(&[o], gb).unwrap());
            }
        }
        Op::Huber { x, y, delta } => {
            let n = T::from_usize(x.value().numel()).unwrap();
            let s = g.item() / n;
            let d: Vec<T> = x
                .value()
                .data()
                .iter()
                .zip(y.value().data())
                .map(|(&a, &b)| huber_elem_grad(a - b, *delta) * s)
                .collect();
            if y.requires_grad() {
                accumulate(pending, y, Tensor::from_vec(y.shape(), d.iter().map(|&v| -v).collect()).unwrap());
            }
            accumulate(pending, x, Tensor::from_vec(x.shape(), d).unwrap());
        }
        Op::SsimLoss { x, y, params } => {
            let (n, c, h, w) = dims4(x.shape(), "").unwrap();
            let planes = n * c;
            let scale = -g.item() / T::from_usize(planes).unwrap();
            let (xs, ys) = (x.value().data(), y.value().data());
            let mut gx = x.requires_grad().then(|| vec![T::zero(); xs.len()]);
            let mut gy = y.requires_grad().then(|| vec![T::zero(); ys.len()]);
            for p in 0..planes {
                let r = p * h * w..(p + 1) * h * w;
                ssim_plane_grad(
                    &xs[r.clone()],
                    &ys[r.clone()],
                    h,
                    w,
                    params,
                    scale,
                    gx.as_mut().map(|v| &mut v[r.clone()]),
                    gy.as_mut().map(|v| &mut v[r.clone()]),
                );
            }
            if let Some(gx) = gx {
                accumulate(pending, x, Tensor::from_vec(x.shape(), gx).unwrap());
            }
            if let Some(gy) = gy {
                accumulate(pending, y, Tensor::from_vec(y.shape(), gy).unwrap());
            }
        }
        Op::BceLogits { logits, target } => {
            let n = T::from_usize(logits.value().numel()).unwrap();
            let s = g.item() / n;
            let data = logits
                .value()
                .data()
                .iter()
                .zip(target.data())
                .map(|(&l, &t)| (sigmoid(l) - t) * s)
                .collect();
            accumulate(pending, logits, Tensor::from_vec(logits.shape(), data).unwrap());
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let off = (ni * c + ci) * hw;
            *o += g[off..off + hw].iter().copied().sum::<T>();
        }
    }
    out
}

/// Unfolds `nb` consecutive `c×h×w` samples into a `(c·k·k) × (nb·ho·wo)`
/// row-major column matrix appended to `out`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    nb: usize,
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    out: &mut Vec<T>,
) {
    let k = geom.kernel;
    let (s, p) = (geom.stride, geom.pad as isize);
    let zero = T::zero();
    out.reserve(c * k * k * nb * ho * wo);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let shift = kj as isize - p;
                let (lo, hi) = valid_range(shift, s, w, wo);
                for j in 0..nb {
                    let plane = &src[(j * c + ci) * h * w..(j * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            out.resize(out.len() + wo, zero);
                            continue;
                        }
                        let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        out.resize(out.len() + lo, zero);
                        if s == 1 {
                            let start = (lo as isize + shift) as usize;
                            out.extend_from_slice(&in_row[start..start + hi - lo]);
                        } else {
                            let start = (lo * s) as isize + shift;
                            out.extend(in_row[start as usize..].iter().step_by(s).take(hi - lo));
                        }
                        out.resize(out.len() + wo - hi, zero);
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + shift` lies in `[0, w)`.
fn valid_range(shift: isize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if shift < 0 { (-shift + s - 1) / s } else { 0 };
    let last = w as isize - 1 - shift;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(wo);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// Adjoint of [`im2col`]: accumulates columns back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    ld: usize,
    off: usize,
    dst: &mut [T],
) {
    let k = geom.kernel;
    let (s, p) = (geom.stride, geom.pad as isize);
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * ld + off;
                let shift = kj as isize - p;
                let (lo, hi) = valid_range(shift, s, w, wo);
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &col[base + oy * wo + lo..base + oy * wo + hi];
                    let in_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let start = (lo as isize + shift) as usize;
                        for (d, &v) in in_row[start..start + hi - lo].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in src_row.iter().enumerate() {
                            in_row[(((lo + ox) * s) as isize + shift) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn chunk_len(n: usize, per_sample: usize) -> usize {
    (COL_BUDGET / per_sample.max(1)).clamp(1, n.max(1))
}

/// Gathers `[n, c, hw]` samples `n0..n0+nb` into a `[c, nb·hw]` matrix.
fn gather<T: Scalar>(src: &[T], n0: usize, nb: usize, c: usize, hw: usize) -> Vec<T> {
    let ld = nb * hw;
    let mut out = vec![T::zero(); c * ld];
    for j in 0..nb {
        for ci in 0..c {
            let s = ((n0 + j) * c + ci) * hw;
            out[ci * ld + j * hw..ci * ld + (j + 1) * hw].copy_from_slice(&src[s..s + hw]);
        }
    }
    out
}

/// Inverse of [`gather`], accumulating into `dst`.
fn scatter_add<T: Scalar>(mat: &[T], n0: usize, nb: usize, c: usize, hw: usize, dst: &mut [T]) {
    let ld = nb * hw;
    for j in 0..nb {
        for ci in 0..c {
            let d = ((n0 + j) * c + ci) * hw;
            for (o, &v) in dst[d..d + hw].iter_mut().zip(&mat[ci * ld + j * hw..ci * ld + (j + 1) * hw]) {
                *o += v;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    wt: &[T],
    bias: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let kk = cin * geom.kernel * geom.kernel;
    let hw = ho * wo;
    let mut out = vec![T::zero(); n * cout * hw];
    for (ni, plane) in out.chunks_mut(hw).enumerate() {
        plane.iter_mut().for_each(|v| *v = bias[ni % cout]);
    }
    let chunk = chunk_len(n, kk * hw);
    let mut n0 = 0;
    while n0 < n {
        let nb = chunk.min(n - n0);
        let ld = nb * hw;
        let mut col = Vec::new();
        im2col(&x[n0 * cin * h * w..], nb, cin, h, w, geom, ho, wo, &mut col);
        let res = matmul_new(cout, kk, ld, wt, &col);
        scatter_add(&res, n0, nb, cout, hw, &mut out);
        n0 += nb;
    }
    out
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let kk = cin * geom.kernel * geom.kernel;
    let hw = ho * wo;
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); wt.len()]);
    let chunk = chunk_len(n, kk * hw);
    let mut n0 = 0;
    while n0 < n {
        let nb = chunk.min(n - n0);
        let ld = nb * hw;
        let gm = gather(g, n0, nb, cout, hw);
        if let Some(gw) = gw.as_mut() {
            let mut col = Vec::new();
            im2col(&x[n0 * cin * h * w..], nb, cin, h, w, geom, ho, wo, &mut col);
            matmul_nt(cout, ld, kk, &gm, &col, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            let gcol = matmul_tn_new(kk, cout, ld, wt, &gm);
            for j in 0..nb {
                let s = (n0 + j) * cin * h * w;
                col2im(&gcol, cin, h, w, geom, ho, wo, ld, j * hw, &mut gx[s..s + cin * h * w]);
            }
        }
        n0 += nb;
    }
    (gx, gw)
}

#[allow(clippy::too_many_arguments)]
fn tconv_forward<T: Scalar>(
    x: &[T],
    wt: &[T],
    bias: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let kk = cout * geom.kernel * geom.kernel;
    let hw = h * w;
    let ohw = ho * wo;
    let mut out = vec![T::zero(); n * cout * ohw];
    for (ni, plane) in out.chunks_mut(ohw).enumerate() {
        plane.iter_mut().for_each(|v| *v = bias[ni % cout]);
    }
    let chunk = chunk_len(n, kk * hw);
    let mut n0 = 0;
    while n0 < n {
        let nb = chunk.min(n - n0);
        let ld = nb * hw;
        let xm = gather(x, n0, nb, cin, hw);
        let col = matmul_tn_new(kk, cin, ld, wt, &xm);
        for j in 0..nb {
            let d = (n0 + j) * cout * ohw;
            col2im(&col, cout, ho, wo, geom, h, w, ld, j * hw, &mut out[d..d + cout * ohw]);
        }
        n0 += nb;
    }
    out
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn tconv_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let kk = cout * geom.kernel * geom.kernel;
    let hw = h * w;
    let ohw = ho * wo;
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); wt.len()]);
    let chunk = chunk_len(n, kk * hw);
    let mut n0 = 0;
    while n0 < n {
        let nb = chunk.min(n - n0);
        let ld = nb * hw;
        let mut gcol = Vec::new();
        im2col(&g[n0 * cout * ohw..], nb, cout, ho, wo, geom, h, w, &mut gcol);
        if let Some(gx) = gx.as_mut() {
            let res = matmul_new(cin, kk, ld, wt, &gcol);
            scatter_add(&res, n0, nb, cin, hw, gx);
        }
        if let Some(gw) = gw.as_mut() {
            let xm = gather(x, n0, nb, cin, hw);
            matmul_nt(cin, ld, kk, &xm, &gcol, gw, true);
        }
        n0 += nb;
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every leaf gradient of `f` against central differences.
    fn check(leaves: Vec<Tensor<f64>>, f: impl Fn(&[Var<f64>]) -> Var<f64>) {
        let vars: Vec<Var<f64>> = leaves.iter().cloned().map(Var::leaf).collect();
        let grads = f(&vars).backward().unwrap();
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get(&vars[li]).expect("leaf gradient");
            for i in 0..leaf.numel() {
                let eval = |delta: f64| {
                    let vs: Vec<Var<f64>> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data_mut()[i] += delta;
                            }
                            Var::constant(t)
                        })
                        .collect();
                    f(&vs).value().item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = g.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                assert!(err < 1e-5, "leaf {li} elem {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let geom = ConvGeom::new(3, 2, 1);
        let y = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), &Var::constant(b.clone()), geom).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        let (xd, wd) = (x.data(), w.data());
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..4 {
                    for ox in 0..3 {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                        acc += wd[((co * 3 + ci) * 3 + ki) * 3 + kj]
                                            * xd[((n * 3 + ci) * 7 + iy as usize) * 6 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = y.value().data()[((n * 4 + co) * 4 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> for matching geometry.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = ConvGeom::new(3, 2, 1);
        let x = rand_tensor(&[1, 2, 8, 8], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let zero_b3 = Var::constant(Tensor::zeros(&[3]));
        let zero_b2 = Var::constant(Tensor::zeros(&[2]));
        let cx = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), &zero_b3, geom).unwrap();
        let y = rand_tensor(cx.shape(), &mut rng);
        let ty = Var::constant(y.clone())
            .conv_transpose2d(&Var::constant(w), &zero_b2, ConvGeom::transposed(3, 2, 1, 1))
            .unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_tensor(&[2, 2, 5, 5], &mut rng),
            rand_tensor(&[3, 2, 3, 3], &mut rng),
            rand_tensor(&[3], &mut rng),
        ];
        check(leaves, |v| v[0].conv2d(&v[1], &v[2], ConvGeom::new(3, 2, 1)).unwrap().square().mean());
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&[2, 3, 3, 3], &mut rng),
            rand_tensor(&[3, 2, 3, 3], &mut rng),
            rand_tensor(&[2], &mut rng),
        ];
        check(leaves, |v| {
            v[0].conv_transpose2d(&v[1], &v[2], ConvGeom::transposed(3, 2, 1, 1)).unwrap().square().mean()
        });
    }

    #[test]
    fn group_norm_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            rand_tensor(&[2, 4, 3, 3], &mut rng),
            rand_tensor(&[4], &mut rng),
            rand_tensor(&[4], &mut rng),
            rand_tensor(&[2, 4, 3, 3], &mut rng),
        ];
        check(leaves, |v| {
            v[0].group_norm(&v[1], &v[2], 2)
                .unwrap()
                .leaky_relu(0.2)
                .mul(&v[3].sigmoid())
                .unwrap()
                .abs()
                .mean()
        });
    }

    #[test]
    fn linear_reshape_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![
            rand_tensor(&[3, 1, 2, 2], &mut rng),
            rand_tensor(&[5, 4], &mut rng),
            rand_tensor(&[5], &mut rng),
        ];
        let target = Tensor::from_vec(&[3, 5], (0..15).map(|i| (i % 2) as f64).collect()).unwrap();
        check(leaves, move |v| {
            let y = v[0].reshape(&[3, 4]).unwrap().linear(&v[1], &v[2]).unwrap();
            y.bce_with_logits(&target).unwrap().add(&y.scale(0.5).relu().mean()).unwrap()
        });
    }

    #[test]
    fn huber_and_ssim_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(&[2, 1, 7, 7], (0..98).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
        };
        let leaves = vec![mk(&mut rng), mk(&mut rng)];
        let p = SsimParams { window: 5, sigma: 1.0, ..SsimParams::default() };
        check(leaves, move |v| {
            v[0].huber_loss(&v[1], 0.3).unwrap().add(&v[0].ssim_loss(&v[1], &p).unwrap()).unwrap()
        });
    }

    #[test]
    fn frozen_inputs_do_not_retain_graph() {
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 1, 4, 4]));
        let y = x.relu().sigmoid().mean();
        assert!(!y.requires_grad());
        assert!(y.backward().is_ok());
    }

    #[test]
    fn meta_tensors_trace_shapes() {
        let x = Var::constant(Tensor::<f32>::meta(&[32, 1, 256, 256]));
        let w = Var::constant(Tensor::<f32>::meta(&[8, 1, 3, 3]));
        let b = Var::constant(Tensor::<f32>::meta(&[8]));
        let y = x.conv2d(&w, &b, ConvGeom::new(3, 2, 1)).unwrap();
        assert!(y.is_meta());
        assert_eq!(y.shape(), &[32, 8, 128, 128]);
    }
}
