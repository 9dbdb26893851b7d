//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. `backward` walks
//! the nodes in exact reverse execution order and accumulates vector-Jacobian
//! products into the inputs that require gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, NdError, Result};
use crate::kernels::{self, ConvGeom, LayerNormSaved};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    LayerNorm { input: Var, gain: Var, saved: Option<LayerNormSaved<T>>, bias: Var },
    AvgPool2 { input: Var },
    Upsample2 { input: Var },
    Concat { a: Var, b: Var },
    SpatialMean { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    SumSquares { input: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed primitives so gradients can be replayed backwards.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records everything needed for `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape for forward evaluation only; `backward` on it is an error.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Zero-padded "same" cross-correlation; `weight` is `[out, in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let geom = self.conv_geom(input, weight, bias)?;
        let value = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(vec![geom.batch, geom.cout, geom.h, geom.w], value)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, Op::Conv2d { input, weight, bias }, rg))
    }

    fn conv_geom(&self, input: Var, weight: Var, bias: Var) -> Result<ConvGeom> {
        let (batch, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if kh != kw || kh % 2 == 0 {
            return shape_err(format!("kernel must be square and odd-sized, got {kh}×{kw}"));
        }
        if wcin != cin {
            return shape_err(format!("input has {cin} channels but weight expects {wcin}"));
        }
        if self.value(bias).shape() != [cout] {
            return shape_err(format!(
                "bias shape {:?} does not match {cout} output channels",
                self.value(bias).shape()
            ));
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            h,
            w,
            k: kh,
        })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Normalizes each sample over (C,H,W), then applies per-channel `gain` and `bias`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(NdError::Contract("layer_norm eps must be positive".into()));
        }
        let (b, c, h, w) = self.value(input).dims4()?;
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return shape_err(format!("layer_norm affine parameters must have shape [{c}]"));
        }
        let (value, saved) = kernels::layer_norm_forward(
            (b, c, h * w),
            self.value(input).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let out = Tensor::new(vec![b, c, h, w], value)?;
        let rg = self.any_grad(&[input, gain, bias]);
        let saved = rg.then_some(saved);
        Ok(self.push(out, Op::LayerNorm { input, gain, saved, bias }, rg))
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2 needs even spatial extent, got {h}×{w}"));
        }
        let value = kernels::avg_pool2_forward(b * c, h, w, self.value(input).data());
        let out = Tensor::new(vec![b, c, h / 2, w / 2], value)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::AvgPool2 { input }, rg))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let value = kernels::upsample2_forward(b * c, h, w, self.value(input).data());
        let out = Tensor::new(vec![b, c, 2 * h, 2 * w], value)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Upsample2 { input }, rg))
    }

    /// Concatenates along the channel axis: `[B,Ca,H,W] ++ [B,Cb,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return shape_err("concat_channels operands differ in batch or spatial extent");
        }
        let (pa, pb) = (ca * ha * wa, cb * ha * wa);
        let mut data = Vec::with_capacity(ba * (pa + pb));
        for i in 0..ba {
            data.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let out = Tensor::new(vec![ba, ca + cb, ha, wa], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Mean over H×W: `[B,C,H,W] -> [B,C]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![b, c], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::SpatialMean { input }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).scale(factor);
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).norm_sq());
        let rg = self.any_grad(&[input]);
        self.push(out, Op::SumSquares { input }, rg)
    }

    /// Digest of the on/off pattern of every ReLU recorded so far.
    ///
    /// Two evaluations with equal digests lie in the same linear region of all
    /// rectifiers; gradient checking uses this to detect kink crossings.
    pub fn relu_pattern_digest(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                for &v in self.value(input).data() {
                    (v > T::zero()).hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(NdError::Contract("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(NdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads)?;
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Tensor::new(node.value.shape().to_vec(), g).ok()
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], var: Var) -> Option<&'g mut [T]> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.len();
        Some(grads[var.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, bias } => {
                let geom = self.conv_geom(input, weight, bias)?;
                // Three disjoint slots: take them out to satisfy the borrow checker.
                let mut gi = self.take_slot(grads, input);
                let mut gw = self.take_slot(grads, weight);
                let mut gb = self.take_slot(grads, bias);
                kernels::conv2d_backward(
                    &geom,
                    self.value(input).data(),
                    self.value(weight).data(),
                    dy,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore_slot(grads, input, gi);
                self.restore_slot(grads, weight, gw);
                self.restore_slot(grads, bias, gb);
            }
            &Op::Relu { input } => {
                if let Some(dx) = self.grad_slot(grads, input) {
                    for ((d, &x), &g) in dx.iter_mut().zip(self.value(input).data()).zip(dy) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::LayerNorm { input, gain, saved, bias } => {
                let saved = saved
                    .as_ref()
                    .ok_or_else(|| NdError::Contract("layer_norm saved state missing".into()))?;
                let (b, c, h, w) = self.value(*input).dims4()?;
                let mut gi = self.take_slot(grads, *input);
                let mut gg = self.take_slot(grads, *gain);
                let mut gb = self.take_slot(grads, *bias);
                kernels::layer_norm_backward(
                    (b, c, h * w),
                    saved,
                    self.value(*gain).data(),
                    dy,
                    gi.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore_slot(grads, *input, gi);
                self.restore_slot(grads, *gain, gg);
                self.restore_slot(grads, *bias, gb);
            }
            &Op::AvgPool2 { input } => {
                let (b, c, h, w) = self.value(input).dims4()?;
                if let Some(dx) = self.grad_slot(grads, input) {
                    kernels::avg_pool2_backward(b * c, h, w, dy, dx);
                }
            }
            &Op::Upsample2 { input } => {
                let (b, c, h, w) = self.value(input).dims4()?;
                if let Some(dx) = self.grad_slot(grads, input) {
                    kernels::upsample2_backward(b * c, h, w, dy, dx);
                }
            }
            &Op::Concat { a, b } => {
                let (batch, ca, h, w) = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?.1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                if let Some(da) = self.grad_slot(grads, a) {
                    for i in 0..batch {
                        let src = &dy[i * (pa + pb)..i * (pa + pb) + pa];
                        for (d, &g) in da[i * pa..(i + 1) * pa].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    for i in 0..batch {
                        let src = &dy[i * (pa + pb) + pa..(i + 1) * (pa + pb)];
                        for (d, &g) in db[i * pb..(i + 1) * pb].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
            }
            &Op::SpatialMean { input } => {
                let (_, _, h, w) = self.value(input).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                if let Some(dx) = self.grad_slot(grads, input) {
                    for (plane, &g) in dx.chunks_mut(hw).zip(dy) {
                        for d in plane {
                            *d += g * inv;
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(dx) = self.grad_slot(grads, v) {
                        for (d, &g) in dx.iter_mut().zip(dy) {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = self.grad_slot(grads, a) {
                    for (d, &g) in da.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
                if let Some(db) = self.grad_slot(grads, b) {
                    for (d, &g) in db.iter_mut().zip(dy) {
                        *d -= g;
                    }
                }
            }
            &Op::Scale { input, factor } => {
                if let Some(dx) = self.grad_slot(grads, input) {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g * factor;
                    }
                }
            }
            &Op::Sum { input } => {
                if let Some(dx) = self.grad_slot(grads, input) {
                    for d in dx {
                        *d += dy[0];
                    }
                }
            }
            &Op::SumSquares { input } => {
                let two = T::of(2.0);
                if let Some(dx) = self.grad_slot(grads, input) {
                    for (d, &x) in dx.iter_mut().zip(self.value(input).data()) {
                        *d += two * x * dy[0];
                    }
                }
            }
        }
        Ok(())
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], var: Var) -> Option<Vec<T>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.len();
        Some(grads[var.0].take().unwrap_or_else(|| vec![T::zero(); len]))
    }

    fn restore_slot(&self, grads: &mut [Option<Vec<T>>], var: Var, slot: Option<Vec<T>>) {
        if let Some(s) = slot {
            grads[var.0] = Some(s);
        }
    }
}

/// Gradients of the requires-grad leaves reached by a backward pass.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 9]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| i as f32 * 0.1));
        let w = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
        let b = tape.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        let y = tape.conv2d(x, w, b).unwrap();
        let out = tape.value(y);
        for bi in 0..2 {
            for o in 0..2 {
                let want = [0.5, -1.5][o];
                let s = (bi * 2 + o) * 16;
                assert!(out.data()[s..s + 16].iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b), Err(NdError::Shape(_))));
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(x, w2, b).is_err());
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let n = tape.constant(Tensor::full(&[4], -3.0));
        let yn = tape.relu(n);
        assert!(tape.value(yn).data().iter().all(|&v| v == 0.0));
        let yy = tape.relu(y);
        assert_eq!(tape.value(yy), tape.value(y));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.0]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::full(&[1, 2, 2, 2], 3.7));
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let xr = tape.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| ((i * 7919) % 23) as f64 - 4.0));
        let y = tape.layer_norm(xr, ones, zeros, 1e-12).unwrap();
        for sample in tape.value(y).data().chunks(18) {
            let m = sample.iter().sum::<f64>() / 18.0;
            let v = sample.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }

        let g0 = tape.constant(Tensor::zeros(&[2]));
        let bb = tape.constant(t(&[2], &[0.25, 0.25]));
        let y = tape.layer_norm(xr, g0, bb, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        assert!(tape.layer_norm(xr, g0, bb, 0.0).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);

        let c = tape.constant(Tensor::full(&[1, 2, 4, 6], 0.7));
        let pc = tape.avg_pool2(c).unwrap();
        assert_eq!(tape.value(pc).shape(), &[1, 2, 2, 3]);
        assert!(tape.value(pc).data().iter().all(|&v| (v - 0.7).abs() < 1e-7));

        let blocky = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i / 4) / 2 * 2 + (i % 4) / 2) as f32);
        let b = tape.constant(blocky.clone());
        let down = tape.avg_pool2(b).unwrap();
        let up = tape.upsample_nearest2(down).unwrap();
        assert_eq!(tape.value(up), &blocky);

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(tape.avg_pool2(odd), Err(NdError::Shape(_))));
    }

    #[test]
    fn spatial_mean_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[1, 1, 3, 5], 1.0));
        let m = tape.spatial_mean(ones).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0]);
        let mut d = vec![0.0; 12];
        d[7] = 6.0;
        let single = tape.constant(t(&[1, 1, 3, 4], &d));
        let m = tape.spatial_mean(single).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5]);
    }

    #[test]
    fn backward_requires_scalar_and_recording_tape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(NdError::Contract(_))));
        let mut inf = Tape::<f64>::inference();
        let x = inf.leaf(Tensor::zeros(&[1]), true);
        assert!(inf.backward(x).is_err());
    }

    #[test]
    fn leaves_reachable_from_loss_receive_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2], &[3.0, -1.0]), true);
        let unused = tape.leaf(t(&[2], &[0.0, 0.0]), true);
        let frozen = tape.constant(t(&[2], &[1.0, 1.0]));
        let d = tape.sub(a, b).unwrap();
        let e = tape.add(d, frozen).unwrap();
        let l = tape.sum_squares(e);
        let g = tape.backward(l).unwrap();
        // e = (-1, 4) -> dL/da = 2e, dL/db = -2e
        assert_eq!(g.get(a).unwrap().data(), &[-2.0, 8.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, -8.0]);
        assert!(g.get(unused).is_none());
        assert!(g.get(frozen).is_none());
    }
}
