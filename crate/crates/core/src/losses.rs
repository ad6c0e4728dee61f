//! Training objectives: the multiscale scale-invariant regression loss,
//! the multiscale residual smoothness loss, and the quadratic spike
//! penalty. All of them are recorded on the tape.
//!
//! Residuals live in readout space, i.e. `prediction − encode(depth)`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{DepthCoding, DepthMap, ForwardTrace};
use crate::scalar::Scalar;
use crate::snn::SpikeTensor;
use crate::tensor::Tensor;

/// Residual raster of one intermediate prediction.
#[derive(Debug, Clone)]
pub struct ResidualMap {
    /// Shape `(1, H, W)`; only valid pixels are meaningful.
    pub r: Var,
    pub valid: Vec<bool>,
    pub n_valid: usize,
    pub height: usize,
    pub width: usize,
}

impl ResidualMap {
    /// Wraps an existing residual raster. `r` must hold `height · width` values.
    pub fn new<T: Scalar>(tape: &Tape<T>, r: Var, valid: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        if tape.value(r).len() != height * width || valid.len() != height * width {
            return Err(Error::shape(
                "residual_map",
                format!("{height}x{width} mask for residual {:?} and {} flags", tape.shape(r), valid.len()),
            ));
        }
        let n_valid = valid.iter().filter(|&&v| v).count();
        Ok(Self { r, valid, n_valid, height, width })
    }

    /// `prediction − encode(gt)` over the ground-truth mask.
    pub fn from_prediction<T: Scalar>(
        tape: &mut Tape<T>,
        prediction: Var,
        gt: &DepthMap,
        coding: &DepthCoding,
    ) -> Result<Self> {
        let target: Vec<T> =
            gt.depth.iter().zip(&gt.valid).map(|(&d, &v)| if v { T::of(coding.encode(d as f64)) } else { T::zero() }).collect();
        let target = tape.constant(Tensor::from_vec(&[1, gt.height, gt.width], target)?);
        let r = tape.sub(prediction, target)?;
        Self::new(tape, r, gt.valid.clone(), gt.height, gt.width)
    }

    fn check(&self) -> Result<()> {
        if self.n_valid == 0 {
            return Err(Error::NoValidGroundTruth);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_smooth: f64,
    pub lambda_spike: f64,
    /// Weight of the squared mean residual; see [`offset_loss`].
    pub lambda_offset: f64,
    /// Intermediate predictions entering the losses, by scale.
    pub scales: Vec<usize>,
    pub penalized_layers: Vec<String>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.5,
            lambda_spike: 0.05,
            lambda_offset: 0.5,
            scales: vec![4, 3, 2, 1],
            penalized_layers: ["out_rconv", "out_add4", "out_add3", "out_add2", "out_add1"].map(String::from).to_vec(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_spike", self.lambda_spike),
            ("lambda_offset", self.lambda_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(1..=4).contains(s)) {
            return Err(Error::config("scales", "need a non-empty subset of 1..=4"));
        }
        Ok(())
    }
}

fn sum_all<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.constant(Tensor::scalar(T::zero()))),
    };
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Per scale `(1/n)Σr² − (1/n²)(Σr)²` over valid pixels, averaged over scales.
pub fn regression_loss<T: Scalar>(tape: &mut Tape<T>, residuals: &[ResidualMap]) -> Result<Var> {
    if residuals.is_empty() {
        return Err(Error::Invalid("regression_loss needs at least one scale".into()));
    }
    let mut terms = Vec::with_capacity(residuals.len());
    for rm in residuals {
        rm.check()?;
        let r = tape.masked_select(rm.r, &rm.valid)?;
        let sq = tape.square(r);
        let mean_sq = tape.mean_reduce(sq)?;
        let mean = tape.mean_reduce(r)?;
        let mean2 = tape.square(mean);
        terms.push(tape.sub(mean_sq, mean2)?);
    }
    let total = sum_all(tape, &terms)?;
    Ok(tape.scale(total, T::one() / T::from_usize(residuals.len()).unwrap()))
}

/// Squared mean residual, averaged over scales.
///
/// The regression loss ignores a constant shift of the prediction, so on its
/// own it leaves the absolute depth level of the readout untrained. This
/// term anchors it; `reg + λ·offset` with `λ = 1` is the plain mean squared
/// error.
pub fn offset_loss<T: Scalar>(tape: &mut Tape<T>, residuals: &[ResidualMap]) -> Result<Var> {
    if residuals.is_empty() {
        return Err(Error::Invalid("offset_loss needs at least one scale".into()));
    }
    let mut terms = Vec::with_capacity(residuals.len());
    for rm in residuals {
        rm.check()?;
        let r = tape.masked_select(rm.r, &rm.valid)?;
        let mean = tape.mean_reduce(r)?;
        terms.push(tape.square(mean));
    }
    let total = sum_all(tape, &terms)?;
    Ok(tape.scale(total, T::one() / T::from_usize(residuals.len()).unwrap()))
}

/// Flat index pairs `(a, b)` of horizontally and vertically adjacent pixels
/// that are both valid.
fn valid_pairs(rm: &ResidualMap) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (rm.height, rm.width);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !rm.valid[i] {
                continue;
            }
            if x + 1 < w && rm.valid[i + 1] {
                a.push(i);
                b.push(i + 1);
            }
            if y + 1 < h && rm.valid[i + w] {
                a.push(i);
                b.push(i + w);
            }
        }
    }
    (a, b)
}

/// Per scale `(1/n)Σ(|∇x r| + |∇y r|)` with forward differences between
/// valid neighbours, summed over scales.
pub fn smoothness_loss<T: Scalar>(tape: &mut Tape<T>, residuals: &[ResidualMap]) -> Result<Var> {
    let mut terms = Vec::with_capacity(residuals.len());
    for rm in residuals {
        rm.check()?;
        let (a, b) = valid_pairs(rm);
        let ra = tape.gather(rm.r, a)?;
        let rb = tape.gather(rm.r, b)?;
        let d = tape.sub(rb, ra)?;
        let d = tape.abs_elem(d);
        let s = tape.sum_reduce(d);
        terms.push(tape.scale(s, T::one() / T::from_usize(rm.n_valid).unwrap()));
    }
    sum_all(tape, &terms)
}

/// `Σ_layers (1/(2K)) Σ_k S_k²` over the given spike tensors.
pub fn spike_penalty<T: Scalar>(tape: &mut Tape<T>, layers: &[SpikeTensor]) -> Result<Var> {
    let mut terms = Vec::with_capacity(layers.len());
    for s in layers {
        let k = tape.value(s.var()).len();
        let sq = tape.square(s.var());
        let sum = tape.sum_reduce(sq);
        terms.push(tape.scale(sum, T::one() / T::from_usize(2 * k).unwrap()));
    }
    sum_all(tape, &terms)
}

/// `reg + λ_smooth·smooth`, plus `λ_spike·penalty` when a penalty is given
/// and its weight is nonzero.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    reg: Var,
    smooth: Var,
    penalty: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let s = tape.scale(smooth, T::of(cfg.lambda_smooth));
    let mut total = tape.add(reg, s)?;
    if let Some(p) = penalty.filter(|_| cfg.lambda_spike != 0.0) {
        let p = tape.scale(p, T::of(cfg.lambda_spike));
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Scalar values of every term of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub regression: f64,
    pub smoothness: f64,
    pub offset: f64,
    pub spike: f64,
}

/// Builds the full objective of one forward pass against `gt`.
pub fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &ForwardTrace<T>,
    gt: &DepthMap,
    coding: &DepthCoding,
    cfg: &LossConfig,
    penalize: bool,
) -> Result<(Var, LossValues)> {
    let mut residuals = Vec::with_capacity(cfg.scales.len());
    for &(scale, p) in &trace.intermediate_predictions {
        if cfg.scales.contains(&scale) {
            residuals.push(ResidualMap::from_prediction(tape, p, gt, coding)?);
        }
    }
    let reg = regression_loss(tape, &residuals)?;
    let smooth = smoothness_loss(tape, &residuals)?;
    let mut total = {
        let penalty = if penalize && cfg.lambda_spike != 0.0 {
            let layers = cfg
                .penalized_layers
                .iter()
                .map(|name| {
                    trace
                        .layer(name)
                        .map(|l| l.spikes)
                        .ok_or_else(|| Error::config("penalized_layers", format!("no traced layer `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(spike_penalty(tape, &layers)?)
        } else {
            None
        };
        let total = total_loss(tape, reg, smooth, penalty, cfg)?;
        (total, penalty)
    };
    let mut offset_value = 0.0;
    if cfg.lambda_offset != 0.0 {
        let off = offset_loss(tape, &residuals)?;
        offset_value = tape.value(off).data()[0].as_f64();
        let off = tape.scale(off, T::of(cfg.lambda_offset));
        total.0 = tape.add(total.0, off)?;
    }
    let v = |tape: &Tape<T>, x: Var| tape.value(x).data()[0].as_f64();
    let values = LossValues {
        total: v(tape, total.0),
        regression: v(tape, reg),
        smoothness: v(tape, smooth),
        offset: offset_value,
        spike: total.1.map_or(0.0, |p| v(tape, p)),
    };
    Ok((total.0, values))
}
