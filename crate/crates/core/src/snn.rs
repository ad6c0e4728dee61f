//! Spiking layers on top of the tape: stateless IF neurons, SEW residual
//! blocks with ADD connect, skip sums and the integrator readout pool.
//!
//! Every membrane starts at zero for each inference and the network runs a
//! single step, so an IF layer reduces to a thresholded feed-forward map.
//! Spike tensors keep an upper bound on their integer counts; in debug
//! builds every construction checks the bound against the actual values.

use crate::autodiff::{SurrogateConfig, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-negative integer activation volume recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpikeTensor {
    var: Var,
    max_count: u32,
}

impl SpikeTensor {
    /// Wraps `var` after (in debug builds) verifying its integrality and bound.
    pub fn new<T: Scalar>(tape: &Tape<T>, var: Var, max_count: u32) -> Self {
        debug_assert!(
            check_spike_values(tape.value(var), max_count).is_ok(),
            "{}",
            check_spike_values(tape.value(var), max_count).unwrap_err()
        );
        Self { var, max_count }
    }

    pub fn var(&self) -> Var {
        self.var
    }

    pub fn max_count(&self) -> u32 {
        self.max_count
    }
}

/// Checks that every value is an integer in `[0, max_count]`.
pub fn check_spike_values<T: Scalar>(values: &Tensor<T>, max_count: u32) -> Result<(), String> {
    let bound = T::from_u32(max_count).unwrap();
    match values.data().iter().find(|&&v| v < T::zero() || v > bound || v.fract() != T::zero()) {
        Some(v) => Err(format!("spike value {v} is not an integer in [0, {max_count}]")),
        None => Ok(()),
    }
}

/// Integrate-and-fire neuron parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IfLayer<T> {
    pub v_thresh: T,
    pub v_reset: T,
    pub surrogate: SurrogateConfig<T>,
}

impl<T: Scalar> Default for IfLayer<T> {
    fn default() -> Self {
        Self { v_thresh: T::one(), v_reset: T::zero(), surrogate: SurrogateConfig::default() }
    }
}

impl<T: Scalar> IfLayer<T> {
    pub fn new(v_thresh: T, v_reset: T, surrogate: SurrogateConfig<T>) -> Result<Self> {
        if !(v_thresh > v_reset) {
            return Err(Error::config("v_thresh", format!("must exceed v_reset ({v_thresh} <= {v_reset})")));
        }
        Ok(Self { v_thresh, v_reset, surrogate })
    }
}

/// One IF step from a zero membrane: the potential equals the preactivation,
/// a spike is emitted where it reaches threshold, then the membrane resets.
pub fn if_forward<T: Scalar>(tape: &mut Tape<T>, preact: Var, layer: &IfLayer<T>) -> SpikeTensor {
    let spikes = tape.heaviside_surrogate(preact, layer.v_thresh, layer.surrogate);
    SpikeTensor::new(tape, spikes, 1)
}

/// Weights of a spike-element-wise residual block (two 3×3 convs, stride 1).
#[derive(Debug, Clone, Copy)]
pub struct SewResBlock {
    pub conv_a: Var,
    pub conv_b: Var,
}

/// `IF(conv_b(IF(conv_a(x)))) + x`; the count bound grows by one.
pub fn sew_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: SpikeTensor,
    block: &SewResBlock,
    neuron: &IfLayer<T>,
) -> Result<SpikeTensor> {
    sew_block_forward_traced(tape, x, block, neuron).map(|(out, _)| out)
}

/// Like [`sew_block_forward`], also returning both inner preactivations.
pub fn sew_block_forward_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: SpikeTensor,
    block: &SewResBlock,
    neuron: &IfLayer<T>,
) -> Result<(SpikeTensor, [Var; 2])> {
    let pad = tape.shape(block.conv_a)[2] / 2;
    let pre_a = tape.conv2d(x.var, block.conv_a, 1, pad)?;
    let a = if_forward(tape, pre_a, neuron);
    let pre_b = tape.conv2d(a.var, block.conv_b, 1, pad)?;
    let b = if_forward(tape, pre_b, neuron);
    if tape.shape(b.var) != tape.shape(x.var) {
        return Err(Error::shape(
            "sew_block",
            format!("residual shape {:?} vs input {:?}", tape.shape(b.var), tape.shape(x.var)),
        ));
    }
    let out = tape.add(b.var, x.var)?;
    Ok((SpikeTensor::new(tape, out, x.max_count + b.max_count), [pre_a, pre_b]))
}

/// Elementwise integer sum of two spike tensors.
pub fn skip_add<T: Scalar>(tape: &mut Tape<T>, a: SpikeTensor, b: SpikeTensor) -> Result<SpikeTensor> {
    let out = tape.add(a.var, b.var)?;
    Ok(SpikeTensor::new(tape, out, a.max_count + b.max_count))
}

/// Pool of non-leaky, never-spiking integrator neurons carrying the output.
///
/// The potential after the k-th contribution is the k-th intermediate
/// prediction.
#[derive(Debug, Clone)]
pub struct ReadoutPool {
    shape: Vec<usize>,
    potential: Option<Var>,
    history: Vec<Var>,
}

impl ReadoutPool {
    pub fn new(height: usize, width: usize) -> Self {
        Self { shape: vec![1, height, width], potential: None, history: Vec::new() }
    }

    /// Zeroes the potentials and forgets all contributions.
    pub fn reset(&mut self) {
        self.potential = None;
        self.history.clear();
    }

    pub fn accumulate<T: Scalar>(&mut self, tape: &mut Tape<T>, contribution: Var) -> Result<()> {
        if tape.shape(contribution) != self.shape.as_slice() {
            return Err(Error::shape(
                "readout_accumulate",
                format!("contribution {:?}, pool {:?}", tape.shape(contribution), self.shape),
            ));
        }
        let next = match self.potential {
            None => tape.add_scalar(contribution, T::zero()),
            Some(p) => tape.add(p, contribution)?,
        };
        self.potential = Some(next);
        self.history.push(next);
        Ok(())
    }

    /// Current potentials; exactly zero when nothing has been integrated.
    pub fn potential<T: Scalar>(&self, tape: &mut Tape<T>) -> Var {
        match self.potential {
            Some(p) => p,
            None => tape.constant(Tensor::zeros(&self.shape)),
        }
    }

    /// Cumulative potentials after each contribution, in arrival order.
    pub fn intermediates(&self) -> &[Var] {
        &self.history
    }
}
