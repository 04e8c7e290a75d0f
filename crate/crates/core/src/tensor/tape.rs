//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Parameters
//! are borrowed rather than copied, so a tape lives no longer than the
//! parameter set it reads. Gradients are kept per node and read back with
//! [`Tape::grad`] / [`Tape::take_grad`] after [`Tape::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::RegionWindow;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, T: Scalar> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T: Scalar> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p, T: Scalar> {
    value: Value<'p, T>,
    requires_grad: bool,
}

/// Operation identifier plus whatever the backward rule needs.
enum Op<T> {
    Conv2d(ConvGeom),
    MaxPool { argmax: Vec<u32> },
    Relu,
    Linear { n: usize, d: usize, e: usize },
    Dropout { mask: Vec<T> },
    Concat { axis: usize, extents: Vec<usize> },
    Add,
    Crop { shape: [usize; 4], windows: Vec<RegionWindow> },
    Reshape,
    SmoothL1 { beta: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Relu => "relu",
            Op::Linear { .. } => "linear",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Add => "add",
            Op::Crop { .. } => "crop",
            Op::Reshape => "reshape",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

struct Record<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    output: Var,
}

/// Ordered record of one forward computation.
pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    records: Vec<Record<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Value<'p, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op<T>, inputs: Vec<Var>, out: Tensor<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let output = self.push(Value::Owned(out), requires_grad);
        self.records.push(Record { op, inputs, output });
        output
    }

    /// Owned leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Owned(t), false)
    }

    /// Borrowed leaf that does not receive a gradient.
    pub fn input(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Value::Borrowed(t), false)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Value::Borrowed(t), true)
    }

    /// Owned leaf that receives a gradient.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Owned(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Names of the recorded operations, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.records.iter().map(|r| r.op.name()).collect()
    }

    /// The piece taken by every piecewise op: ReLU input signs, pooling
    /// argmaxes and smooth-L1 branches. Two evaluations with equal patterns
    /// lie on the same smooth piece at their recorded points.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for rec in &self.records {
            let val = |i: usize| self.nodes[rec.inputs[i].0].value.get();
            match &rec.op {
                Op::Relu => out.extend(val(0).data().iter().map(|&x| u32::from(x > T::zero()))),
                Op::MaxPool { argmax } => out.extend_from_slice(argmax),
                Op::SmoothL1 { beta } => out.extend(
                    val(0)
                        .data()
                        .iter()
                        .zip(val(1).data())
                        .map(|(&a, &b)| u32::from((a - b).abs() < *beta)),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.shape(b) != [g.out_channels] {
            return Err(shape_err!(
                "conv2d bias must be [{}], got {:?}",
                g.out_channels,
                self.shape(b)
            ));
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &g,
        );
        let out = Tensor::new(&g.output_shape(), out)?;
        Ok(self.record(Op::Conv2d(g), vec![x, w, b], out))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let g = PoolGeom::new(&shape, window, stride)?;
        let (out, argmax) = kernels::max_pool2d_forward(self.value(x).data(), &g);
        let out = Tensor::new(&[shape[0], shape[1], g.out_h, g.out_w], out)?;
        Ok(self.record(Op::MaxPool { argmax }, vec![x], out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape(),
            t.data().iter().map(|&v| v.max(T::zero())).collect(),
        )?;
        Ok(self.record(Op::Relu, vec![x], out))
    }

    /// `x[N x D] * w[D x E] + b[E]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[n, d], &[dw, e]) = (xs, ws) else {
            return Err(shape_err!("linear expects N x D input and D x E weights, got {xs:?} and {ws:?}"));
        };
        if d != dw || bs != [e] {
            return Err(shape_err!(
                "linear dimension mismatch: input {xs:?}, weights {ws:?}, bias {bs:?}"
            ));
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            d,
            e,
        );
        let out = Tensor::new(&[n, e], y)?;
        Ok(self.record(Op::Linear { n, d, e }, vec![x, w, b], out))
    }

    /// Inverted dropout. Outside training (or at rate 0) this is the identity
    /// and returns `x` itself. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, rate: f32, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid!("dropout rate {rate} outside [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep_scale = T::lit(1.0 / (1.0 - rate as f64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..t.len())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = Tensor::new(
            t.shape(),
            t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        Ok(self.record(Op::Dropout { mask }, vec![x], out))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid!("concat needs at least one input"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(shape_err!(
                    "concat inputs disagree off axis {axis}: {base:?} vs {s:?}"
                ));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &ext) in inputs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(Op::Concat { axis, extents }, inputs.to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!(
                "add needs identical shapes, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let out = Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect(),
        )?;
        Ok(self.record(Op::Add, vec![a, b], out))
    }

    /// Crops `N x C x Hf x Wf` features with either one window shared by the
    /// whole batch or one window per sample.
    pub fn crop(&mut self, x: Var, windows: &[RegionWindow]) -> Result<Var> {
        let &[n, c, hf, wf] = self.shape(x) else {
            return Err(shape_err!("crop expects NxCxHxW, got {:?}", self.shape(x)));
        };
        if windows.len() != 1 && windows.len() != n {
            return Err(shape_err!(
                "crop got {} windows for a batch of {n}",
                windows.len()
            ));
        }
        let (w, h) = kernels::check_windows(windows, hf, wf)?;
        let shape = [n, c, hf, wf];
        let out = kernels::crop_forward(self.value(x).data(), shape, windows);
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.record(
            Op::Crop {
                shape,
                windows: windows.to_vec(),
            },
            vec![x],
            out,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(Op::Reshape, vec![x], out))
    }

    /// Mean smooth-L1 loss over all elements; returns a `[1]` tensor.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 || !beta.is_finite() {
            return Err(invalid!("smooth-L1 beta must be positive, got {beta}"));
        }
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err!(
                "smooth-L1 shapes differ: {:?} vs {:?}",
                p.shape(),
                t.shape()
            ));
        }
        let beta = T::lit(beta);
        let sum: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| kernels::smooth_l1(a - b, beta))
            .sum();
        let loss = sum / T::from_usize(p.len()).expect("count");
        Ok(self.record(Op::SmoothL1 { beta }, vec![pred, target], Tensor::scalar(loss)))
    }

    /// Back-propagates from a scalar `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for rec in self.records.iter().rev() {
            if !self.nodes[rec.output.0].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[rec.output.0].take() else {
                continue;
            };
            let needs: Vec<bool> = rec
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let val = |v: Var| self.nodes[v.0].value.get();
            let mut acc = |v: Var, g: Vec<T>| match &mut self.grads[v.0] {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
                slot @ None => *slot = Some(g),
            };
            match &rec.op {
                Op::Conv2d(geom) => {
                    let (x, w, b) = (rec.inputs[0], rec.inputs[1], rec.inputs[2]);
                    let grads = kernels::conv2d_backward(
                        val(x).data(),
                        val(w).data(),
                        &gout,
                        geom,
                        needs[0],
                    );
                    if let Some(dx) = grads.dx {
                        acc(x, dx);
                    }
                    if needs[1] {
                        acc(w, grads.dweight);
                    }
                    if needs[2] {
                        acc(b, grads.dbias);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    let x = rec.inputs[0];
                    let dx = kernels::max_pool2d_backward(&gout, argmax, val(x).len());
                    acc(x, dx);
                }
                Op::Relu => {
                    let x = rec.inputs[0];
                    let dx = val(x)
                        .data()
                        .iter()
                        .zip(&gout)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    acc(x, dx);
                }
                Op::Linear { n, d, e } => {
                    let (x, w, b) = (rec.inputs[0], rec.inputs[1], rec.inputs[2]);
                    let grads = kernels::linear_backward(
                        val(x).data(),
                        val(w).data(),
                        &gout,
                        *n,
                        *d,
                        *e,
                        needs[0],
                    );
                    if let Some(dx) = grads.dx {
                        acc(x, dx);
                    }
                    if needs[1] {
                        acc(w, grads.dw);
                    }
                    if needs[2] {
                        acc(b, grads.db);
                    }
                }
                Op::Dropout { mask } => {
                    let dx = gout.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    acc(rec.inputs[0], dx);
                }
                Op::Concat { axis, extents } => {
                    let base = val(rec.inputs[0]).shape();
                    let outer: usize = base[..*axis].iter().product();
                    let inner: usize = base[axis + 1..].iter().product();
                    let total: usize = extents.iter().sum();
                    let mut offset = 0;
                    for ((&v, &ext), &need) in rec.inputs.iter().zip(extents).zip(&needs) {
                        if need {
                            let mut g = Vec::with_capacity(outer * ext * inner);
                            for o in 0..outer {
                                let start = (o * total + offset) * inner;
                                g.extend_from_slice(&gout[start..start + ext * inner]);
                            }
                            acc(v, g);
                        }
                        offset += ext;
                    }
                }
                Op::Add => {
                    if needs[0] {
                        acc(rec.inputs[0], gout.clone());
                    }
                    if needs[1] {
                        acc(rec.inputs[1], gout.clone());
                    }
                }
                Op::Crop { shape, windows } => {
                    let mut dx = vec![T::zero(); shape.iter().product()];
                    kernels::crop_backward_add(&gout, *shape, windows, &mut dx);
                    acc(rec.inputs[0], dx);
                }
                Op::Reshape => acc(rec.inputs[0], gout.clone()),
                Op::SmoothL1 { beta } => {
                    let (p, t) = (val(rec.inputs[0]), val(rec.inputs[1]));
                    let scale = gout[0] / T::from_usize(p.len()).expect("count");
                    let dp: Vec<T> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&a, &b)| kernels::smooth_l1_grad(a - b, *beta) * scale)
                        .collect();
                    if needs[1] {
                        acc(rec.inputs[1], dp.iter().map(|&g| -g).collect());
                    }
                    if needs[0] {
                        acc(rec.inputs[0], dp);
                    }
                }
            }
            self.grads[rec.output.0] = Some(gout);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 2, 2]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(&x), tape.param(&w), tape.param(&b));
        let y = tape.conv2d(xv, wv, bv, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let x = Tensor::<f32>::ones(&[1, 2, 3, 3]).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 2, 2]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(&x), tape.param(&w), tape.param(&b));
        let err = tape.conv2d(xv, wv, bv, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn maxpool_forward_and_routing() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.max_pool2d(xv, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let y1 = tape.reshape(y, &[1]).unwrap();
        tape.backward(y1).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_rejects_zero_window() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        assert!(tape.max_pool2d(xv, 0, 1).is_err());
        assert!(tape.max_pool2d(xv, 2, 0).is_err());
        assert!(tape.max_pool2d(xv, 3, 1).is_err());
    }

    #[test]
    fn relu_values_and_mask() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.relu(xv).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let target = tape.constant(Tensor::zeros(&[3]).unwrap());
        let l = tape.smooth_l1_loss(y, target, 0.01).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(xv).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(g[2] > 0.0);
    }

    #[test]
    fn relu_all_negative() {
        let x = t(&[2, 2], &[-1.0, -2.0, -0.5, -3.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.relu(xv).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let target = tape.constant(Tensor::ones(&[2, 2]).unwrap());
        let l = tape.smooth_l1_loss(y, target, 0.01).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(xv).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_identity() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = t(&[3, 3], &eye);
        let b = Tensor::<f64>::zeros(&[3]).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(&x), tape.param(&w), tape.param(&b));
        let y = tape.linear(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn linear_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let w = Tensor::<f64>::zeros(&[4, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[3]).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(&x), tape.param(&w), tape.param(&b));
        assert!(tape.linear(xv, wv, bv).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f32>::from_fn(&[100], |i| i as f32).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        assert_eq!(tape.dropout(xv, 0.0, true, 1).unwrap(), xv);
        assert_eq!(tape.dropout(xv, 0.5, false, 1).unwrap(), xv);
        assert!(tape.dropout(xv, 1.0, true, 1).is_err());
        assert!(tape.dropout(xv, -0.1, true, 1).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let x = Tensor::<f32>::ones(&[n]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let y = tape.dropout(xv, 0.5, true, 42).unwrap();
        let out = tape.value(y).data();
        let survivors = out.iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));

        let mut tape2 = Tape::new();
        let xv2 = tape2.input(&x);
        let y2 = tape2.dropout(xv2, 0.5, true, 42).unwrap();
        assert_eq!(tape2.value(y2).data(), out);
    }

    #[test]
    fn concat_order_and_backward() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1, 3], &[3.0, 4.0, 5.0]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(&a), tape.param(&b));
        let single = tape.concat(&[av], 1).unwrap();
        assert_eq!(tape.value(single).data(), a.data());
        let c = tape.concat(&[av, bv], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        // loss = sum(c) via linear with ones weights
        let w = tape.constant(Tensor::ones(&[5, 1]).unwrap());
        let bias = tape.constant(Tensor::zeros(&[1]).unwrap());
        let s = tape.linear(c, w, bias).unwrap();
        let s = tape.reshape(s, &[1]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(av).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(bv).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let mut tape = Tape::new();
        let (av, bv) = (tape.input(&a), tape.input(&b));
        assert!(tape.concat(&[av, bv], 1).is_err());
    }

    #[test]
    fn add_passes_gradient_to_both() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let z = Tensor::<f64>::zeros(&[3]).unwrap();
        let mut tape = Tape::new();
        let (av, zv) = (tape.param(&a), tape.param(&z));
        let s = tape.add(av, zv).unwrap();
        assert_eq!(tape.value(s).data(), a.data());
        let w = tape.constant(t(&[3, 1], &[1.0, -2.0, 0.5]));
        let bias = tape.constant(Tensor::zeros(&[1]).unwrap());
        let s2 = tape.reshape(s, &[1, 3]).unwrap();
        let l = tape.linear(s2, w, bias).unwrap();
        let l = tape.reshape(l, &[1]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(av).unwrap(), &[1.0, -2.0, 0.5]);
        assert_eq!(tape.grad(zv).unwrap(), &[1.0, -2.0, 0.5]);
        let short = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert!(tape.add(av, short).is_err());
    }

    #[test]
    fn identity_chain_and_fan_out() {
        let x = t(&[1], &[0.7]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.reshape(xv, &[1]).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[1.0]);

        let mut tape = Tape::new();
        let av = tape.param(&x);
        let s = tape.add(av, av).unwrap();
        let r = tape.relu(s).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(av).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::zeros(&[2]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.relu(xv).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn crop_overlap_accumulates() {
        let f = Tensor::<f64>::zeros(&[1, 1, 6, 6]).unwrap();
        let mut tape = Tape::new();
        let fv = tape.param(&f);
        let a = tape.crop(fv, &[RegionWindow::new(0, 0, 3, 3)]).unwrap();
        let b = tape.crop(fv, &[RegionWindow::new(1, 1, 3, 3)]).unwrap();
        let s = tape.add(a, b).unwrap();
        let s = tape.reshape(s, &[1, 9]).unwrap();
        let w = tape.constant(Tensor::ones(&[9, 1]).unwrap());
        let bias = tape.constant(Tensor::zeros(&[1]).unwrap());
        let l = tape.linear(s, w, bias).unwrap();
        let l = tape.reshape(l, &[1]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(fv).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let in_a = x < 3 && y < 3;
                let in_b = (1..4).contains(&x) && (1..4).contains(&y);
                let expect = in_a as u8 as f64 + in_b as u8 as f64;
                assert_eq!(g[y * 6 + x], expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn smooth_l1_zero_when_equal() {
        let p = t(&[2, 3], &[0.1, -0.2, 0.3, 0.0, 0.5, -0.9]);
        let mut tape = Tape::new();
        let pv = tape.param(&p);
        let tv = tape.input(&p);
        let l = tape.smooth_l1_loss(pv, tv, 0.01).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(pv).unwrap().iter().all(|&g| g == 0.0));

        let q = t(&[1], &[0.01]);
        let z = Tensor::<f64>::zeros(&[1]).unwrap();
        let mut tape = Tape::new();
        let (qv, zv) = (tape.input(&q), tape.input(&z));
        let l = tape.smooth_l1_loss(qv, zv, 0.01).unwrap();
        assert!((tape.value(l).item() - 0.005).abs() < 1e-15);
        let bad = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert!(tape.smooth_l1_loss(qv, bad, 0.01).is_err());
        assert!(tape.smooth_l1_loss(qv, zv, 0.0).is_err());
    }
}
