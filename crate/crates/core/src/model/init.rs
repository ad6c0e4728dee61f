//! Weight initialization.
//!
//! Convolutions start from a Kaiming-normal draw. Because spike inputs are
//! sparse and non-negative, the raw draw leaves most IF layers either silent
//! or saturated, so [`StereoSpikeNet::calibrate`] rescales each layer in
//! forward order until a fixed fraction of its preactivations reach
//! threshold on a handful of probe inputs. Bias-free convs and a zero reset
//! make the spike rate depend only on this one scale per layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Layers, ModelConfig, StereoSpikeNet};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::events::InputChunk;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), drawn in f64 so both
/// precisions see identical values for a seed.
pub fn init_weights<T: Scalar>(config: &ModelConfig, seed: u64) -> Layers<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    config.layer_shapes().map(|shape| {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationTarget {
    /// Fraction of preactivations that should reach threshold.
    pub density: f64,
    /// Standard deviation of each prediction synapse's contribution.
    pub prediction_std: f64,
}

impl Default for CalibrationTarget {
    fn default() -> Self {
        Self { density: 0.15, prediction_std: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    /// `(parameter, applied scale)` in forward order. A scale of 1 means the
    /// layer saw no positive preactivation and was left alone.
    pub scales: Vec<(String, f64)>,
}

fn quantile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let i = ((values.len() - 1) as f64 * q).round() as usize;
    values[i]
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl<T: Scalar> StereoSpikeNet<T> {
    fn probe_values(&self, probes: &[(InputChunk, Option<InputChunk>)], pick: impl Fn(&super::ForwardTrace<T>) -> Option<crate::autodiff::Var>) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (l, r) in probes {
            let mut tape = Tape::new();
            let pass = self.forward_on(&mut tape, l, r.as_ref(), false)?;
            if let Some(v) = pick(&pass.trace) {
                out.extend(tape.value(v).data().iter().map(|x| x.as_f64()));
            }
        }
        Ok(out)
    }

    fn scale_param(&mut self, name: &str, factor: f64) {
        let names = self.layers.names();
        let slot = names.iter().position(|n| n == name).expect("known parameter");
        self.layers.slots_mut()[slot].scale_in_place(T::of(factor));
    }

    /// Data-dependent rescaling of every layer; see the module docs.
    pub fn calibrate(
        &mut self,
        probes: &[(InputChunk, Option<InputChunk>)],
        target: CalibrationTarget,
    ) -> Result<CalibrationReport> {
        if probes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(target.density > 0.0 && target.density < 1.0) {
            return Err(Error::config("calibration_density", "must lie in (0, 1)"));
        }
        let gap = self.config.v_thresh - self.config.v_reset;
        let mut scales = Vec::new();

        let (first_l, first_r) = &probes[0];
        let mut tape = Tape::new();
        let layer_names: Vec<String> = self
            .forward_on(&mut tape, first_l, first_r.as_ref(), false)?
            .trace
            .preacts
            .into_iter()
            .map(|(n, _)| n)
            .collect();

        for name in &layer_names {
            let values = self.probe_values(probes, |t| t.preacts.iter().find(|(n, _)| n == name).map(|p| p.1))?;
            let q = quantile(values, 1.0 - target.density) - self.config.v_reset;
            let s = if q > 0.0 && q.is_finite() { gap / q } else { 1.0 };
            self.scale_param(name, s);
            scales.push((name.clone(), s));
        }

        for k in (1..=4).rev() {
            let name = format!("predict{k}");
            let values = self.probe_values(probes, |t| t.contributions.iter().find(|(n, _)| *n == name).map(|p| p.1))?;
            let sd = std_dev(&values);
            let s = if sd > 0.0 && sd.is_finite() { target.prediction_std / sd } else { 1.0 };
            self.scale_param(&name, s);
            scales.push((name, s));
        }
        Ok(CalibrationReport { scales })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn init_is_seeded_and_precision_independent() {
        let cfg = ModelConfig { base_channels: 2, ..Default::default() };
        let a: Layers<Tensor<f64>> = init_weights(&cfg, 11);
        let b: Layers<Tensor<f32>> = init_weights(&cfg, 11);
        let c: Layers<Tensor<f64>> = init_weights(&cfg, 12);
        assert_eq!(a.map(|t| t.cast::<f32>()), b);
        assert_ne!(a, c);
    }

    #[test]
    fn calibration_hits_target_density() {
        let cfg = ModelConfig {
            mode: Mode::Monocular,
            base_channels: 4,
            input_height: 32,
            input_width: 32,
            ..Default::default()
        };
        let mut net = StereoSpikeNet::<f32>::new(cfg, 4).unwrap();
        let probes: Vec<_> = (0..3)
            .map(|s| {
                let mut c = InputChunk::zeros(5, 32, 32, 50_000);
                for (i, v) in c.data.iter_mut().enumerate() {
                    *v = ((i * 2654435761 + s * 97) % 13 == 0) as u32;
                }
                (c, None)
            })
            .collect();
        let report = net.calibrate(&probes, CalibrationTarget::default()).unwrap();
        assert_eq!(report.scales.len(), 5 + 4 + 4 + 4);
        let (_, trace) = net.forward(&probes[0].0, None).unwrap();
        let bottom = trace.layer("out_bottomL").unwrap().density;
        assert!((bottom - 0.15).abs() < 0.1, "bottom density {bottom}");
    }
}
