//! Adam, the step learning-rate schedule and the per-sample training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::events::InputChunk;
use crate::evalx::{mde, DensityAccumulator, DensityReport};
use crate::losses::{objective, LossConfig, LossValues};
use crate::model::{CalibrationTarget, DepthMap, Mode, StereoSpikeNet};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, Sample};
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_net(net: &StereoSpikeNet<T>, lr: f64) -> Self {
        let sizes: Vec<usize> = net.layers().slots().iter().map(|t| t.len()).collect();
        Self::new(&sizes, lr)
    }
}

/// One Adam update of every parameter. `grads[i]` belongs to `params[i]`;
/// a non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    names: &[String],
    grads: &[&[T]],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "{} parameters, {} gradients, optimizer sized for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].len() {
            return Err(Error::shape("adam_step", format!("gradient {i} has {} of {} values", g.len(), params[i].len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::one() - T::of(state.beta1.powi(state.t as i32));
    let c2 = T::one() - T::of(state.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(state.lr), T::of(state.epsilon));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub lr0: f64,
    /// 1-indexed epoch at whose start the rate is divided.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub shuffle: bool,
    pub spike_penalty_enabled: bool,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Training samples used to calibrate the initial weights; 0 disables.
    pub calibration_probes: usize,
    pub calibration: CalibrationTarget,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr0: 2e-4,
            lr_drop_epoch: 8,
            lr_drop_factor: 10.0,
            batch_size: 1,
            weight_decay: 0.0,
            shuffle: true,
            spike_penalty_enabled: false,
            seed: 0,
            clip_norm: None,
            calibration_probes: 8,
            calibration: CalibrationTarget::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.lr_drop_epoch == 0 {
            return Err(Error::config("lr_drop_epoch", "epochs are 1-indexed"));
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(Error::config("lr_drop_factor", "must be positive"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("batch_size", "only single-sample updates are supported"));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::config("weight_decay", "weight decay is not supported"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during 1-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr0 / self.lr_drop_factor
        } else {
            self.lr0
        }
    }
}

/// Loss, error and mean densities of one pass over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitStats {
    pub loss: LossValues,
    pub mde_cm: f64,
    pub densities: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: SplitStats,
    pub test: SplitStats,
}

#[derive(Debug, Clone)]
pub struct TrainLog<T> {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_mde_cm: f64,
    /// Parameters of the best epoch by test error.
    pub best: StereoSpikeNet<T>,
}

impl<T> TrainLog<T> {
    /// Columns: `epoch,split,loss,mde_cm,lr`, then one density column per
    /// traced layer. Two rows per epoch, train first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,mde_cm,lr");
        if let Some(r) = self.records.first() {
            for (name, _) in &r.train.densities {
                write!(s, ",{name}").unwrap();
            }
        }
        s.push('\n');
        for r in &self.records {
            for (split, st) in [("train", &r.train), ("test", &r.test)] {
                write!(s, "{},{split},{:.6},{:.3},{:e}", r.epoch, st.loss.total, st.mde_cm, r.lr).unwrap();
                for (_, d) in &st.densities {
                    write!(s, ",{d:.5}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }
}

fn right_chunk<'a, T: Scalar>(net: &StereoSpikeNet<T>, s: &'a Sample) -> Option<&'a InputChunk> {
    (net.config().mode == Mode::Binocular).then_some(&s.right)
}

struct Running {
    loss: LossValues,
    mde: f64,
    n: usize,
    density: DensityAccumulator,
}

impl Running {
    fn new() -> Self {
        Self { loss: LossValues::default(), mde: 0.0, n: 0, density: DensityAccumulator::new() }
    }

    fn add(&mut self, v: &LossValues, mde_cm: f64) {
        self.loss.total += v.total;
        self.loss.regression += v.regression;
        self.loss.smoothness += v.smoothness;
        self.loss.offset += v.offset;
        self.loss.spike += v.spike;
        self.mde += mde_cm;
        self.n += 1;
    }

    fn finish(self) -> SplitStats {
        let n = self.n.max(1) as f64;
        let l = self.loss;
        SplitStats {
            loss: LossValues {
                total: l.total / n,
                regression: l.regression / n,
                smoothness: l.smoothness / n,
                offset: l.offset / n,
                spike: l.spike / n,
            },
            mde_cm: self.mde / n,
            densities: self.density.means(),
        }
    }
}

/// Test-split evaluation of a network; never touches its parameters.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub stats: SplitStats,
    pub report: DensityReport,
    pub predictions: Vec<DepthMap>,
}

pub fn evaluate<'a, T: Scalar>(
    net: &StereoSpikeNet<T>,
    samples: impl IntoIterator<Item = &'a Sample>,
    losses: &LossConfig,
    penalize: bool,
) -> Result<Evaluation> {
    let mut run = Running::new();
    let mut predictions = Vec::new();
    for s in samples {
        let mut tape = Tape::new();
        let pass = net.forward_on(&mut tape, &s.left, right_chunk(net, s), false)?;
        let (_, values) = objective(&mut tape, &pass.trace, &s.gt, &net.config().depth, losses, penalize)?;
        run.add(&values, mde(&pass.depth, &s.gt)?);
        run.density.add(&pass.trace);
        predictions.push(pass.depth);
    }
    if run.n == 0 {
        return Err(Error::EmptyDataset);
    }
    let report = run.density.finish(run.mde / run.n as f64)?;
    Ok(Evaluation { stats: run.finish(), report, predictions })
}

/// Constant predictor: the train-set mean depth everywhere.
pub fn constant_baseline_mde(dataset: &Dataset) -> Result<f64> {
    let mean = dataset.train_mean_depth()? as f32;
    let mut total = 0.0;
    let mut n = 0;
    for s in dataset.test_samples() {
        total += mde(&DepthMap::constant(s.gt.height, s.gt.width, mean), &s.gt)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / n as f64)
}

/// Trains `net` in place. Per sample: fresh tape (all potentials zero),
/// forward, loss, backward, Adam step. The shuffled order is re-drawn
/// every epoch from `plan.seed`. `on_epoch` sees every record as it lands.
pub fn run_training<T: Scalar>(
    net: &mut StereoSpikeNet<T>,
    dataset: &Dataset,
    plan: &TrainPlan,
    losses: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog<T>> {
    plan.validate()?;
    losses.validate()?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if plan.calibration_probes > 0 {
        let probes: Vec<_> = dataset
            .train_samples()
            .take(plan.calibration_probes)
            .map(|s| (s.left.clone(), right_chunk(net, s).cloned()))
            .collect();
        net.calibrate(&probes, plan.calibration)?;
    }

    let names = net.layers().names();
    let mut adam = AdamState::for_net(net, plan.lr0);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order = dataset.train.clone();
    let mut records = Vec::with_capacity(plan.epochs);
    let mut best: Option<(usize, f64, StereoSpikeNet<T>)> = None;

    for epoch in 1..=plan.epochs {
        adam.lr = plan.lr_at(epoch);
        if plan.shuffle {
            order.shuffle(&mut rng);
        }
        let mut run = Running::new();
        for (k, &idx) in order.iter().enumerate() {
            let s = &dataset.samples[idx];
            let mut tape = Tape::new();
            let pass = net.forward_on(&mut tape, &s.left, right_chunk(net, s), true)?;
            let (loss, values) =
                objective(&mut tape, &pass.trace, &s.gt, &net.config().depth, losses, plan.spike_penalty_enabled)?;
            if !values.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, sample: k, value: values.total });
            }
            tape.backward(loss)?;
            let vars = pass.params.slots();
            let mut grads: Vec<Vec<T>> = vars
                .iter()
                .map(|&&v| tape.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.value(v).len()]))
                .collect();
            if let Some(c) = plan.clip_norm {
                let norm = grads.iter().flatten().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
                if norm > c {
                    let f = T::of(c / norm);
                    grads.iter_mut().flatten().for_each(|g| *g *= f);
                }
            }
            let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
            let mut params = net.layers_mut().slots_mut();
            adam_step(&mut params, &names, &grad_refs, &mut adam)?;
            run.add(&values, mde(&pass.depth, &s.gt)?);
            run.density.add(&pass.trace);
        }
        let test = evaluate(net, dataset.test_samples(), losses, plan.spike_penalty_enabled)?;
        let record = EpochRecord { epoch, lr: adam.lr, train: run.finish(), test: test.stats };
        on_epoch(&record);
        if best.as_ref().is_none_or(|b| record.test.mde_cm < b.1) {
            best = Some((epoch, record.test.mde_cm, net.clone()));
        }
        records.push(record);
    }
    let (best_epoch, best_test_mde_cm, best) = best.expect("at least one epoch");
    Ok(TrainLog { records, best_epoch, best_test_mde_cm, best })
}
