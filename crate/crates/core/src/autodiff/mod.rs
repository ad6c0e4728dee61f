//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node in an
//! append-only list; inputs always precede the nodes that consume them.
//! [`Tape::backward`] walks the list once in reverse and accumulates
//! gradients into leaf nodes. Leaf gradients persist across calls until
//! [`Tape::zero_grad`]; intermediate gradients are rebuilt on every sweep.
//!
//! There is no broadcasting beyond tensor-scalar operations.

mod gradcheck;
pub mod kernels;
mod surrogate;

pub use gradcheck::{grad_check, run_gradcheck_suite, GradCheckCase, GradCheckReport};
pub use surrogate::{arctan_surrogate_grad, SurrogateConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::ConvGeometry;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, geometry: ConvGeometry, out_channels: usize, cols: Vec<T> },
    Upsample { input: Var, factor: usize },
    Heaviside { input: Var, threshold: T, cfg: SurrogateConfig<T> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Gather { input: Var, index: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, record: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, record, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, record: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(value, record, rg)
    }

    /// Bias-free 2-D cross-correlation with zero padding.
    /// `input` is `(C_in, H, W)`, `weight` is `(C_out, C_in, k, k)` with odd `k`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let (co, ci, k) = match self.shape(weight) {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return Err(Error::shape("conv2d", format!("weight must be (C_out, C_in, k, k), got {s:?}"))),
        };
        if ci != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels, weight expects {ci}")));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::shape("conv2d", format!("kernel {k} must be odd and stride {stride} positive")));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape("conv2d", format!("{h}x{w} input too small for kernel {k}")));
        }
        let geometry = ConvGeometry { in_channels: c, height: h, width: w, kernel: k, stride, padding };
        let (out, cols) = if kernels::use_direct(&geometry, co) {
            (kernels::conv_forward_direct(self.value(input).data(), self.value(weight).data(), co, &geometry), Vec::new())
        } else {
            let cols = kernels::im2col(self.value(input).data(), &geometry);
            let out = kernels::conv_forward(&cols, self.value(weight).data(), co, &geometry);
            // the column buffer is only needed for the weight gradient
            (out, if self.requires_grad(weight) { cols } else { Vec::new() })
        };
        let value = Tensor::from_vec(&[co, geometry.out_height(), geometry.out_width()], out)?;
        let rg = self.needs(&[input, weight]);
        Ok(self.push(value, Op::Conv2d { input, weight, geometry, out_channels: co, cols }, rg))
    }

    /// Nearest-neighbour upsampling of a `(C, H, W)` tensor.
    pub fn nn_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("nn_upsample", "factor must be positive"));
        }
        let (c, h, w) = self.value(input).dims3()?;
        let out = kernels::upsample(self.value(input).data(), c, h, w, factor);
        let value = Tensor::from_vec(&[c, h * factor, w * factor], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Upsample { input, factor }, rg))
    }

    /// Binary step `preact >= threshold` with the arctan surrogate derivative.
    pub fn heaviside_surrogate(&mut self, preact: Var, threshold: T, cfg: SurrogateConfig<T>) -> Var {
        self.unary(
            preact,
            |x| if x >= threshold { T::one() } else { T::zero() },
            Op::Heaviside { input: preact, threshold, cfg },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs_elem(&mut self, a: Var) -> Var {
        self.unary(a, T::abs, Op::Abs(a))
    }

    pub fn sum_reduce(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean_reduce(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean_reduce", "empty tensor"));
        }
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s / T::from_usize(n).unwrap()), Op::Mean(a), rg))
    }

    /// Flat gather of the listed positions; backward scatters into them.
    pub fn gather(&mut self, input: Var, index: Vec<usize>) -> Result<Var> {
        let src = self.value(input).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(&[data.len()], data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Gather { input, index }, rg))
    }

    /// Flattened selection of the entries where `mask` is true.
    pub fn masked_select(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(input).len() {
            return Err(Error::shape(
                "masked_select",
                format!("mask has {} entries, tensor {:?}", mask.len(), self.shape(input)),
            ));
        }
        let index = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        self.gather(input, index)
    }

    /// Back-propagates from a scalar `loss` into every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let mut emit = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geometry, out_channels, cols } => {
                let w = self.value(*weight).data();
                if kernels::use_direct(geometry, *out_channels) {
                    let x = self.value(*input).data();
                    emit(*weight, &mut |gw| kernels::conv_weight_grad_direct(g, x, *out_channels, geometry, gw));
                    emit(*input, &mut |gi| kernels::conv_input_grad_direct(g, w, *out_channels, geometry, gi));
                } else {
                    emit(*weight, &mut |gw| kernels::conv_weight_grad(g, cols, *out_channels, geometry, gw));
                    emit(*input, &mut |gi| kernels::conv_input_grad(g, w, *out_channels, geometry, gi));
                }
            }
            Op::Upsample { input, factor } => {
                let (c, h, w) = self.value(*input).dims3().expect("rank checked at record time");
                emit(*input, &mut |gi| kernels::upsample_grad(g, c, h, w, *factor, gi));
            }
            Op::Heaviside { input, threshold, cfg } => {
                let x = self.value(*input).data();
                emit(*input, &mut |gi| {
                    for ((d, &gv), &xv) in gi.iter_mut().zip(g).zip(x) {
                        *d += gv * arctan_surrogate_grad(xv - *threshold, cfg.alpha);
                    }
                });
            }
            Op::Add(a, b) => {
                emit(*a, &mut |ga| add_into(ga, g));
                emit(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                emit(*a, &mut |ga| add_into(ga, g));
                emit(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                emit(*a, &mut |ga| ga.iter_mut().zip(g).zip(vb).for_each(|((d, &v), &y)| *d += v * y));
                emit(*b, &mut |gb| gb.iter_mut().zip(g).zip(va).for_each(|((d, &v), &x)| *d += v * x));
            }
            Op::Scale(a, c) => emit(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c)),
            Op::AddScalar(a) => emit(*a, &mut |ga| add_into(ga, g)),
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::one() + T::one();
                emit(*a, &mut |ga| ga.iter_mut().zip(g).zip(x).for_each(|((d, &v), &xv)| *d += two * xv * v));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                emit(*a, &mut |ga| {
                    for ((d, &v), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d += v;
                        } else if xv < T::zero() {
                            *d -= v;
                        }
                    }
                });
            }
            Op::Sum(a) => emit(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                emit(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Gather { input, index } => {
                emit(*input, &mut |gi| index.iter().zip(g).for_each(|(&i, &v)| gi[i] += v));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.param(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let w = tape.param(Tensor::zeros(&[5, 3, 3, 3]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[5, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.param(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 1, 1], &[3.0]));
        let y = tape.nn_upsample(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0; 4]);
        let s = tape.sum_reduce(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn sum_of_zeros_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3, 2]));
        let s = tape.sum_reduce(x);
        assert_eq!(tape.value(s).data(), &[0.0]);
        let sq = tape.square(x);
        let l = tape.sum_reduce(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn linear_loss_gradient_is_the_constant() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let x = tape.constant(t(&[3], &[4.0, 5.0, -6.0]));
        let p = tape.mul(w, x).unwrap();
        let l = tape.sum_reduce(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 5.0, -6.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let l = tape.sum_reduce(w);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn masked_select_all_true_is_flattening() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.masked_select(x, &[true; 4]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = tape.masked_select(x, &[false, true, false, true]).unwrap();
        let l = tape.sum_reduce(z);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
        assert!(tape.masked_select(x, &[true; 3]).is_err());
    }

    #[test]
    fn heaviside_forward_and_surrogate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.5, 0.99, 1.0]));
        let s = tape.heaviside_surrogate(x, 1.0, SurrogateConfig::default());
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 1.0]);
        let l = tape.sum_reduce(s);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[2] - 1.0).abs() < 1e-12);
        assert!((g[0] - arctan_surrogate_grad(0.5, 2.0)).abs() < 1e-15);
    }
}
