//! The StereoSpike network: one or two strided-conv encoder branches, a
//! SEW-ResBlock bottleneck, a nearest-neighbour-upsampling decoder with
//! summed skip connections, and prediction synapses projecting every
//! decoder scale onto an integrator readout pool.
//!
//! No layer carries a bias and there is no normalization, so an all-zero
//! input produces no spikes anywhere.

pub mod checkpoint;
mod depth;
mod init;

pub use depth::{DepthCode, DepthCoding, DepthMap};
pub use init::{init_weights, CalibrationReport, CalibrationTarget};

use crate::autodiff::{SurrogateConfig, Tape, Var};
use crate::error::{Error, Result};
use crate::events::InputChunk;
use crate::evalx::{density, spike_mass};
use crate::scalar::Scalar;
use crate::snn::{self, IfLayer, ReadoutPool, SewResBlock, SpikeTensor};
use crate::tensor::Tensor;

/// Number of stride-2 encoder stages; the layer naming assumes four.
pub const N_SCALES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Monocular,
    Binocular,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mono" | "monocular" => Ok(Mode::Monocular),
            "bino" | "binocular" => Ok(Mode::Binocular),
            other => Err(Error::config("mode", format!("expected mono|bino, got `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Monocular => "mono",
            Mode::Binocular => "bino",
        }
    }
}

/// Which encoder tensors feed the decoder skip sums in binocular mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipSource {
    /// Left and right encoder tensors are summed before the skip add.
    Summed,
    LeftOnly,
}

impl SkipSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "summed" => Ok(SkipSource::Summed),
            "left" => Ok(SkipSource::LeftOnly),
            other => Err(Error::config("skip_source", format!("expected summed|left, got `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SkipSource::Summed => "summed",
            SkipSource::LeftOnly => "left",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// `2n` for `n` concatenated histogram frames.
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_scales: usize,
    pub kernel_size: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub skip_source: SkipSource,
    pub depth: DepthCoding,
    pub v_thresh: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Binocular,
            in_channels: 10,
            base_channels: 8,
            n_scales: N_SCALES,
            kernel_size: 3,
            input_height: 64,
            input_width: 64,
            skip_source: SkipSource::Summed,
            depth: DepthCoding::default(),
            v_thresh: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales != N_SCALES {
            return Err(Error::config("n_scales", format!("only {N_SCALES} scales are supported")));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("kernel_size", "must be odd"));
        }
        if self.in_channels == 0 || self.in_channels % 2 != 0 {
            return Err(Error::config("in_channels", "must be a positive multiple of 2"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be positive"));
        }
        let step = 1 << self.n_scales;
        for (field, v) in [("input_height", self.input_height), ("input_width", self.input_width)] {
            if v == 0 || v % step != 0 {
                return Err(Error::config(field, format!("{v} is not a positive multiple of {step}")));
            }
        }
        if !(self.v_thresh > self.v_reset) {
            return Err(Error::config("v_thresh", "must exceed v_reset"));
        }
        SurrogateConfig::new(self.surrogate_alpha)?;
        self.depth.validate()
    }

    /// Channel width at encoder level `level` (0 = full scale).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn neuron<T: Scalar>(&self) -> IfLayer<T> {
        IfLayer {
            v_thresh: T::of(self.v_thresh),
            v_reset: T::of(self.v_reset),
            surrogate: SurrogateConfig { alpha: T::of(self.surrogate_alpha) },
        }
    }

    /// Expected weight shape of every parameter.
    pub fn layer_shapes(&self) -> Layers<Vec<usize>> {
        let k = self.kernel_size;
        let shape = |o: usize, i: usize| vec![o, i, k, k];
        let branch = || Branch {
            bottom: shape(self.channels(0), self.in_channels),
            convs: std::array::from_fn(|i| shape(self.channels(i + 1), self.channels(i))),
        };
        let c4 = self.channels(N_SCALES);
        Layers {
            left: branch(),
            right: (self.mode == Mode::Binocular).then(branch),
            bottleneck: std::array::from_fn(|_| std::array::from_fn(|_| shape(c4, c4))),
            deconvs: std::array::from_fn(|i| shape(self.channels(3 - i), self.channels(4 - i))),
            predicts: std::array::from_fn(|i| shape(1, self.channels(3 - i))),
        }
    }

    /// Key/value form used by checkpoints and run configs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("mode", self.mode.name().to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("n_scales", self.n_scales.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("skip_source", self.skip_source.name().to_string()),
            ("depth_code", self.depth.code.name().to_string()),
            ("d_min", self.depth.d_min.to_string()),
            ("d_max", self.depth.d_max.to_string()),
            ("v_thresh", self.v_thresh.to_string()),
            ("v_reset", self.v_reset.to_string()),
            ("surrogate_alpha", self.surrogate_alpha.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one key/value pair; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "n_scales" => self.n_scales = num(key, value)?,
            "kernel_size" => self.kernel_size = num(key, value)?,
            "input_height" => self.input_height = num(key, value)?,
            "input_width" => self.input_width = num(key, value)?,
            "skip_source" => self.skip_source = SkipSource::parse(value)?,
            "depth_code" => self.depth.code = DepthCode::parse(value)?,
            "d_min" => self.depth.d_min = num(key, value)?,
            "d_max" => self.depth.d_max = num(key, value)?,
            "v_thresh" => self.v_thresh = num(key, value)?,
            "v_reset" => self.v_reset = num(key, value)?,
            "surrogate_alpha" => self.surrogate_alpha = num(key, value)?,
            _ => return Err(Error::config(key, "unknown model key")),
        }
        Ok(())
    }

    pub fn is_model_key(key: &str) -> bool {
        Self::default().to_pairs().iter().any(|(k, _)| k == key)
    }
}

/// One encoder branch: full-scale bottom conv plus four stride-2 convs.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<P> {
    pub bottom: P,
    pub convs: [P; 4],
}

/// Per-layer slots of the network. `P` is a weight tensor for a stored
/// network and a tape handle during a forward pass.
///
/// `deconvs[i]` and `predicts[i]` belong to scale `4 - i`, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers<P> {
    pub left: Branch<P>,
    pub right: Option<Branch<P>>,
    pub bottleneck: [[P; 2]; 2],
    pub deconvs: [P; 4],
    pub predicts: [P; 4],
}

impl<P> Layers<P> {
    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut branch = |side: &str| {
            names.push(format!("bottom_{side}"));
            names.extend((1..=4).map(|k| format!("conv{k}_{side}")));
        };
        branch("L");
        if self.right.is_some() {
            branch("R");
        }
        for b in 1..=2 {
            names.push(format!("sew{b}_a"));
            names.push(format!("sew{b}_b"));
        }
        names.extend((1..=4).rev().map(|k| format!("deconv{k}")));
        names.extend((1..=4).rev().map(|k| format!("predict{k}")));
        names
    }

    pub fn slots(&self) -> Vec<&P> {
        let mut out = Vec::new();
        for b in std::iter::once(&self.left).chain(self.right.as_ref()) {
            out.push(&b.bottom);
            out.extend(b.convs.iter());
        }
        out.extend(self.bottleneck.iter().flatten());
        out.extend(self.deconvs.iter());
        out.extend(self.predicts.iter());
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        for b in std::iter::once(&mut self.left).chain(self.right.as_mut()) {
            out.push(&mut b.bottom);
            out.extend(b.convs.iter_mut());
        }
        out.extend(self.bottleneck.iter_mut().flatten());
        out.extend(self.deconvs.iter_mut());
        out.extend(self.predicts.iter_mut());
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Layers<Q> {
        let mut branch = |b: &Branch<P>| Branch { bottom: f(&b.bottom), convs: b.convs.each_ref().map(&mut f) };
        let left = branch(&self.left);
        let right = self.right.as_ref().map(branch);
        Layers {
            left,
            right,
            bottleneck: self.bottleneck.each_ref().map(|pair| pair.each_ref().map(&mut f)),
            deconvs: self.deconvs.each_ref().map(&mut f),
            predicts: self.predicts.each_ref().map(&mut f),
        }
    }
}

/// Spike tensor captured during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerRecord<T> {
    pub name: String,
    pub spikes: SpikeTensor,
    pub snapshot: Tensor<T>,
    /// Fraction of nonzero entries.
    pub density: f64,
    /// Mean spike count per entry.
    pub mass: f64,
}

/// Named spike tensors and intermediate predictions of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerRecord<T>>,
    /// `(scale, cumulative readout potential)`, coarsest scale first.
    pub intermediate_predictions: Vec<(usize, Var)>,
    /// Preactivation of every IF layer, keyed by parameter name.
    pub preacts: Vec<(String, Var)>,
    /// Output of every prediction synapse, keyed by parameter name.
    pub contributions: Vec<(String, Var)>,
}

impl<T> ForwardTrace<T> {
    pub fn layer(&self, name: &str) -> Option<&LayerRecord<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }
}

/// Everything produced by [`StereoSpikeNet::forward_on`].
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub depth: DepthMap,
    pub trace: ForwardTrace<T>,
    /// Final readout potential, shape `(1, H, W)`.
    pub potential: Var,
    /// Tape handles of the parameters, in [`Layers`] layout.
    pub params: Layers<Var>,
}

/// Reported layer names for a mode, in report order.
pub fn traced_layer_names(mode: Mode) -> Vec<String> {
    let mut names = Vec::new();
    let sides: &[&str] = if mode == Mode::Binocular { &["L", "R"] } else { &["L"] };
    for side in sides {
        names.push(format!("out_bottom{side}"));
        names.extend((1..=4).map(|k| format!("out_conv{k}{side}")));
    }
    names.push("out_combined".into());
    names.push("out_rconv".into());
    for k in (1..=4).rev() {
        names.push(format!("out_deconv{k}"));
        names.push(format!("out_add{k}"));
    }
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSpikeNet<T> {
    config: ModelConfig,
    layers: Layers<Tensor<T>>,
}

struct Recorder<'a, T> {
    tape: &'a mut Tape<T>,
    trace: ForwardTrace<T>,
}

impl<T: Scalar> Recorder<'_, T> {
    fn spikes(&mut self, name: String, s: SpikeTensor) -> SpikeTensor {
        let snapshot = self.tape.value(s.var()).clone();
        self.trace.layers.push(LayerRecord {
            name,
            spikes: s,
            density: density(&snapshot),
            mass: spike_mass(&snapshot),
            snapshot,
        });
        s
    }

    /// conv → IF, remembering the preactivation under the parameter name.
    fn conv_if(&mut self, param: &str, x: Var, w: Var, stride: usize, neuron: &IfLayer<T>) -> Result<SpikeTensor> {
        let pad = self.tape.shape(w)[2] / 2;
        let pre = self.tape.conv2d(x, w, stride, pad).map_err(|e| e.in_layer(param))?;
        self.trace.preacts.push((param.to_string(), pre));
        Ok(snn::if_forward(self.tape, pre, neuron))
    }
}

impl<T: Scalar> StereoSpikeNet<T> {
    /// Builds a network with Kaiming-style random weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = init_weights(&config, seed);
        Ok(Self { config, layers })
    }

    /// Builds a network from explicit weights, checking every shape.
    pub fn from_layers(config: ModelConfig, layers: Layers<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.layer_shapes();
        if expected.names() != layers.names() {
            return Err(Error::config("mode", "parameter set does not match the configured mode"));
        }
        for ((name, want), got) in expected.names().iter().zip(expected.slots()).zip(layers.slots()) {
            if got.shape() != want.as_slice() {
                return Err(Error::shape("from_layers", format!("{name}: expected {want:?}, got {:?}", got.shape()))
                    .in_layer(name));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &Layers<Tensor<T>> {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Layers<Tensor<T>> {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.slots().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> StereoSpikeNet<U> {
        StereoSpikeNet { config: self.config.clone(), layers: self.layers.map(|t| t.cast()) }
    }

    /// Fresh, zeroed readout pool for one inference.
    pub fn new_readout(&self) -> ReadoutPool {
        ReadoutPool::new(self.config.input_height, self.config.input_width)
    }

    /// Zeroes all neuron state before an inference. The network keeps no
    /// membrane state between passes, so only the readout pool is touched.
    pub fn reset_all(&self, pool: &mut ReadoutPool) {
        pool.reset();
    }

    fn check_chunk(&self, side: &str, chunk: &InputChunk) -> Result<()> {
        let c = &self.config;
        if chunk.channels() != c.in_channels || chunk.height != c.input_height || chunk.width != c.input_width {
            return Err(Error::Geometry(format!(
                "{side} chunk is {}x{}x{}, model expects {}x{}x{}",
                chunk.channels(),
                chunk.height,
                chunk.width,
                c.in_channels,
                c.input_height,
                c.input_width
            )));
        }
        Ok(())
    }

    /// Runs one inference on a private tape.
    pub fn forward(&self, left: &InputChunk, right: Option<&InputChunk>) -> Result<(DepthMap, ForwardTrace<T>)> {
        let mut tape = Tape::new();
        let pass = self.forward_on(&mut tape, left, right, false)?;
        Ok((pass.depth, pass.trace))
    }

    /// Records one inference on `tape`. With `trainable`, weights enter the
    /// tape as gradient-carrying leaves.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        left: &InputChunk,
        right: Option<&InputChunk>,
        trainable: bool,
    ) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        self.check_chunk("left", left)?;
        match (cfg.mode, right) {
            (Mode::Binocular, Some(r)) => self.check_chunk("right", r)?,
            (Mode::Binocular, None) => return Err(Error::Geometry("binocular model needs a right chunk".into())),
            (Mode::Monocular, Some(_)) => return Err(Error::Geometry("monocular model takes no right chunk".into())),
            (Mode::Monocular, None) => {}
        }
        let w = self.layers.map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) });
        let neuron = cfg.neuron::<T>();
        let mut rec = Recorder {
            tape,
            trace: ForwardTrace {
                layers: Vec::new(),
                intermediate_predictions: Vec::new(),
                preacts: Vec::new(),
                contributions: Vec::new(),
            },
        };

        let encode = |rec: &mut Recorder<T>, chunk: &InputChunk, b: &Branch<Var>, side: &str| -> Result<[SpikeTensor; 5]> {
            let x = rec.tape.constant(chunk.to_tensor());
            let s = rec.conv_if(&format!("bottom_{side}"), x, b.bottom, 1, &neuron)?;
            let mut levels = vec![rec.spikes(format!("out_bottom{side}"), s)];
            for (k, &wk) in b.convs.iter().enumerate() {
                let prev = levels[k].var();
                let s = rec.conv_if(&format!("conv{}_{side}", k + 1), prev, wk, 2, &neuron)?;
                levels.push(rec.spikes(format!("out_conv{}{side}", k + 1), s));
            }
            Ok(levels.try_into().unwrap())
        };
        let enc_l = encode(&mut rec, left, &w.left, "L")?;
        let enc_r = match (right, &w.right) {
            (Some(chunk), Some(b)) => Some(encode(&mut rec, chunk, b, "R")?),
            _ => None,
        };

        let combined = match &enc_r {
            Some(r) => snn::skip_add(rec.tape, enc_l[4], r[4]).map_err(|e| e.in_layer("out_combined"))?,
            None => enc_l[4],
        };
        let mut x = rec.spikes("out_combined".into(), combined);
        for (b, pair) in w.bottleneck.iter().enumerate() {
            let block = SewResBlock { conv_a: pair[0], conv_b: pair[1] };
            let (out, preacts) = snn::sew_block_forward_traced(rec.tape, x, &block, &neuron)
                .map_err(|e| e.in_layer(&format!("sew{}", b + 1)))?;
            for (p, name) in preacts.into_iter().zip(["a", "b"]) {
                rec.trace.preacts.push((format!("sew{}_{name}", b + 1), p));
            }
            x = out;
        }
        let rconv = rec.spikes("out_rconv".into(), x);

        let mut prev = rconv;
        let mut adds = Vec::with_capacity(4);
        for i in 0..4 {
            let scale = 4 - i;
            let level = 3 - i;
            let skip = match (&enc_r, cfg.skip_source) {
                (Some(r), SkipSource::Summed) => snn::skip_add(rec.tape, enc_l[level], r[level])?,
                _ => enc_l[level],
            };
            let up = rec.tape.nn_upsample(prev.var(), 2)?;
            let d = rec.conv_if(&format!("deconv{scale}"), up, w.deconvs[i], 1, &neuron)?;
            let d = rec.spikes(format!("out_deconv{scale}"), d);
            let a = snn::skip_add(rec.tape, d, skip).map_err(|e| e.in_layer(&format!("out_add{scale}")))?;
            debug_assert!(a.max_count() <= 3);
            prev = rec.spikes(format!("out_add{scale}"), a);
            adds.push(prev);
        }

        let mut pool = self.new_readout();
        self.reset_all(&mut pool);
        for (i, a) in adds.iter().enumerate() {
            let scale = 4 - i;
            let name = format!("predict{scale}");
            let factor = 1 << (scale - 1);
            let up = if factor > 1 { rec.tape.nn_upsample(a.var(), factor)? } else { a.var() };
            let pad = cfg.kernel_size / 2;
            let c = rec.tape.conv2d(up, w.predicts[i], 1, pad).map_err(|e| e.in_layer(&name))?;
            rec.trace.contributions.push((name.clone(), c));
            pool.accumulate(rec.tape, c).map_err(|e| e.in_layer(&name))?;
            let p = *pool.intermediates().last().unwrap();
            rec.trace.intermediate_predictions.push((scale, p));
        }
        let potential = pool.potential(rec.tape);
        let values: Vec<f64> = rec.tape.value(potential).data().iter().map(|v| v.as_f64()).collect();
        let depth = cfg.depth.decode_depth(cfg.input_height, cfg.input_width, &values);
        Ok(ForwardPass { depth, trace: rec.trace, potential, params: w })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(seed: u64, cfg: &ModelConfig) -> InputChunk {
        let mut c = InputChunk::zeros(cfg.in_channels / 2, cfg.input_height, cfg.input_width, 50_000);
        let mut s = seed;
        for v in c.data.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 60) as u32).saturating_sub(11);
        }
        c
    }

    fn small(mode: Mode) -> ModelConfig {
        ModelConfig { mode, base_channels: 4, input_height: 32, input_width: 32, ..Default::default() }
    }

    #[test]
    fn shapes_double_down_and_halve_up() {
        for base in [2, 4, 8] {
            let cfg = ModelConfig { base_channels: base, ..small(Mode::Binocular) };
            let shapes = cfg.layer_shapes();
            for (i, s) in shapes.left.convs.iter().enumerate() {
                assert_eq!(s[0], 2 * s[1], "conv{}", i + 1);
            }
            for s in &shapes.deconvs {
                assert_eq!(2 * s[0], s[1]);
            }
            assert_eq!(shapes.predicts[3], vec![1, base, 3, 3]);
        }
    }

    #[test]
    fn trace_covers_the_layer_table() {
        for mode in [Mode::Monocular, Mode::Binocular] {
            let cfg = small(mode);
            let net = StereoSpikeNet::<f32>::new(cfg.clone(), 3).unwrap();
            let l = chunk(1, &cfg);
            let r = chunk(2, &cfg);
            let right = (mode == Mode::Binocular).then_some(&r);
            let (depth, trace) = net.forward(&l, right).unwrap();
            assert_eq!(trace.names(), traced_layer_names(mode));
            assert_eq!(depth.depth.len(), 32 * 32);
            assert_eq!(trace.intermediate_predictions.len(), 4);
            assert_eq!(
                trace.intermediate_predictions.iter().map(|p| p.0).collect::<Vec<_>>(),
                vec![4, 3, 2, 1]
            );
        }
    }

    #[test]
    fn zero_input_gives_no_spikes_and_zero_potential() {
        let cfg = small(Mode::Binocular);
        let net = StereoSpikeNet::<f32>::new(cfg.clone(), 5).unwrap();
        let z = InputChunk::zeros(5, 32, 32, 50_000);
        let (depth, trace) = net.forward(&z, Some(&z)).unwrap();
        assert!(trace.layers.iter().all(|l| l.density == 0.0));
        let expected = cfg.depth.decode(0.0) as f32;
        assert!(depth.depth.iter().all(|&d| d == expected));
    }

    #[test]
    fn binocular_combined_is_branch_sum() {
        let cfg = small(Mode::Binocular);
        let net = StereoSpikeNet::<f32>::new(cfg.clone(), 9).unwrap();
        let (_, trace) = net.forward(&chunk(4, &cfg), Some(&chunk(5, &cfg))).unwrap();
        let l = &trace.layer("out_conv4L").unwrap().snapshot;
        let r = &trace.layer("out_conv4R").unwrap().snapshot;
        let c = &trace.layer("out_combined").unwrap().snapshot;
        for i in 0..c.len() {
            assert_eq!(c.data()[i], l.data()[i] + r.data()[i]);
        }
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let cfg = small(Mode::Monocular);
        let net = StereoSpikeNet::<f32>::new(cfg, 1).unwrap();
        let wrong = InputChunk::zeros(4, 32, 32, 50_000);
        assert!(matches!(net.forward(&wrong, None), Err(Error::Geometry(_))));
        let ok = InputChunk::zeros(5, 32, 32, 50_000);
        assert!(matches!(net.forward(&ok, Some(&ok)), Err(Error::Geometry(_))));
    }

    #[test]
    fn config_rejects_bad_geometry_and_keys() {
        let cfg = ModelConfig { input_height: 40, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "input_height"));
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("bogus", "1").is_err());
        cfg.set("mode", "mono").unwrap();
        assert_eq!(cfg.mode, Mode::Monocular);
    }

    #[test]
    fn reset_is_idempotent_and_forward_repeatable() {
        let cfg = small(Mode::Monocular);
        let net = StereoSpikeNet::<f32>::new(cfg.clone(), 2).unwrap();
        let mut pool = net.new_readout();
        net.reset_all(&mut pool);
        net.reset_all(&mut pool);
        let mut tape = Tape::<f32>::new();
        let p = pool.potential(&mut tape);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
        let x = chunk(7, &cfg);
        let (a, _) = net.forward(&x, None).unwrap();
        net.reset_all(&mut pool);
        let (b, _) = net.forward(&x, None).unwrap();
        assert_eq!(a, b);
    }
}
