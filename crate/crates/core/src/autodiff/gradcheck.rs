//! Central finite-difference verification of the tape's backward rules.
//!
//! The numeric side only evaluates forward passes, so it shares no code
//! with the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(‖analytic‖∞, ‖numeric‖∞)`,
/// i.e. the error relative to the gradient's largest component.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.len()]);

    let eval = |point: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };
    let two = T::one() + T::one();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (two * eps));
    }

    let norm = |v: &[T]| v.iter().fold(T::zero(), |m, &g| m.max(g.abs()));
    let scale = norm(&analytic).max(norm(&numeric)).max(T::min_positive_value());
    Ok(analytic
        .iter()
        .zip(&numeric)
        .fold(T::zero(), |m, (&a, &n)| m.max((a - n).abs() / scale)))
}

/// One primitive (or composite) graph exercised by the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckCase {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Square,
    Abs,
    SumReduce,
    MeanReduce,
    MaskedSelect,
    NnUpsample,
    Conv2dInput,
    Conv2dWeight,
    Conv2dStridedMean,
    EncoderBlock,
    SmoothComposite,
}

impl GradCheckCase {
    pub const ALL: [GradCheckCase; 16] = [
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Scale,
        Self::AddScalar,
        Self::Square,
        Self::Abs,
        Self::SumReduce,
        Self::MeanReduce,
        Self::MaskedSelect,
        Self::NnUpsample,
        Self::Conv2dInput,
        Self::Conv2dWeight,
        Self::Conv2dStridedMean,
        Self::EncoderBlock,
        Self::SmoothComposite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Scale => "scale",
            Self::AddScalar => "add_scalar",
            Self::Square => "square",
            Self::Abs => "abs_elem",
            Self::SumReduce => "sum_reduce",
            Self::MeanReduce => "mean_reduce",
            Self::MaskedSelect => "masked_select",
            Self::NnUpsample => "nn_upsample",
            Self::Conv2dInput => "conv2d/input",
            Self::Conv2dWeight => "conv2d/weight",
            Self::Conv2dStridedMean => "conv2d+mean_reduce",
            Self::EncoderBlock => "encoder_block",
            Self::SmoothComposite => "smooth_composite",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub case: GradCheckCase,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}

/// Values bounded away from zero, so `abs` has no kink within `eps`.
fn random_off_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.25..1.0);
        T::of(if rng.random_bool(0.5) { m } else { -m })
    })
}

/// `sum(out · r)` with a fixed random `r`, so every output component matters.
fn project<T: Scalar>(tape: &mut Tape<T>, out: Var, r: &Tensor<T>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(out, r)?;
    Ok(tape.sum_reduce(p))
}

fn run_case<T: Scalar>(case: GradCheckCase, rng: &mut ChaCha8Rng, eps: T) -> Result<T> {
    use GradCheckCase::*;
    let shape = [2usize, 3, 4];
    match case {
        Add | Sub | Mul => {
            let other = random::<T>(rng, &shape, -1.0, 1.0);
            let r = random::<T>(rng, &shape, -1.0, 1.0);
            let x = random::<T>(rng, &shape, -1.0, 1.0);
            grad_check(
                |tape, x| {
                    let o = tape.constant(other.clone());
                    let y = match case {
                        Add => tape.add(x, o)?,
                        Sub => tape.sub(o, x)?,
                        _ => tape.mul(x, o)?,
                    };
                    project(tape, y, &r)
                },
                &x,
                eps,
            )
        }
        Scale | AddScalar | Square | Abs => {
            let r = random::<T>(rng, &shape, -1.0, 1.0);
            let x = random_off_zero::<T>(rng, &shape);
            let c = T::of(rng.random_range(-2.0..2.0));
            grad_check(
                |tape, x| {
                    let y = match case {
                        Scale => tape.scale(x, c),
                        AddScalar => {
                            let z = tape.add_scalar(x, c);
                            tape.square(z)
                        }
                        Square => tape.square(x),
                        _ => tape.abs_elem(x),
                    };
                    project(tape, y, &r)
                },
                &x,
                eps,
            )
        }
        SumReduce | MeanReduce => {
            let x = random::<T>(rng, &shape, -1.0, 1.0);
            let w = random::<T>(rng, &shape, -1.0, 1.0);
            grad_check(
                |tape, x| {
                    let w = tape.constant(w.clone());
                    let y = tape.mul(x, w)?;
                    let y = tape.square(y);
                    if case == SumReduce {
                        Ok(tape.sum_reduce(y))
                    } else {
                        tape.mean_reduce(y)
                    }
                },
                &x,
                eps,
            )
        }
        MaskedSelect => {
            let x = random::<T>(rng, &shape, -1.0, 1.0);
            let mask: Vec<bool> = (0..x.len()).map(|_| rng.random_bool(0.6)).collect();
            let n = mask.iter().filter(|&&m| m).count();
            let r = random::<T>(rng, &[n], -1.0, 1.0);
            grad_check(
                |tape, x| {
                    let y = tape.masked_select(x, &mask)?;
                    project(tape, y, &r)
                },
                &x,
                eps,
            )
        }
        NnUpsample => {
            let factor = [2usize, 4][rng.random_range(0..2)];
            let x = random::<T>(rng, &[2, 2, 3], -1.0, 1.0);
            let r = random::<T>(rng, &[2, 2 * factor, 3 * factor], -1.0, 1.0);
            grad_check(
                |tape, x| {
                    let y = tape.nn_upsample(x, factor)?;
                    project(tape, y, &r)
                },
                &x,
                eps,
            )
        }
        Conv2dInput | Conv2dWeight => {
            let stride = rng.random_range(1..=2);
            let input = random::<T>(rng, &[3, 5, 6], -1.0, 1.0);
            let weight = random::<T>(rng, &[2, 3, 3, 3], -0.5, 0.5);
            let probe = {
                let mut tape = Tape::<T>::new();
                let (i, w) = (tape.constant(input.clone()), tape.constant(weight.clone()));
                let y = tape.conv2d(i, w, stride, 1)?;
                tape.shape(y).to_vec()
            };
            let r = random::<T>(rng, &probe, -1.0, 1.0);
            if case == Conv2dInput {
                grad_check(
                    |tape, x| {
                        let w = tape.constant(weight.clone());
                        let y = tape.conv2d(x, w, stride, 1)?;
                        project(tape, y, &r)
                    },
                    &input,
                    eps,
                )
            } else {
                grad_check(
                    |tape, w| {
                        let x = tape.constant(input.clone());
                        let y = tape.conv2d(x, w, stride, 1)?;
                        project(tape, y, &r)
                    },
                    &weight,
                    eps,
                )
            }
        }
        Conv2dStridedMean => {
            let input = random::<T>(rng, &[2, 6, 6], -1.0, 1.0);
            let weight = random::<T>(rng, &[3, 2, 3, 3], -0.5, 0.5);
            grad_check(
                |tape, w| {
                    let x = tape.constant(input.clone());
                    let y = tape.conv2d(x, w, 2, 1)?;
                    let y = tape.square(y);
                    tape.mean_reduce(y)
                },
                &weight,
                eps,
            )
        }
        EncoderBlock => {
            // bottom conv -> strided conv -> upsample -> conv -> skip sum, with the
            // spiking nonlinearity removed.
            let input = random::<T>(rng, &[2, 8, 8], 0.0, 2.0);
            let w_bottom = random::<T>(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let w_down = random::<T>(rng, &[4, 3, 3, 3], -0.5, 0.5);
            let w_up = random::<T>(rng, &[3, 4, 3, 3], -0.5, 0.5);
            let r = random::<T>(rng, &[3, 8, 8], -1.0, 1.0);
            grad_check(
                |tape, w| {
                    let x = tape.constant(input.clone());
                    let wd = tape.constant(w_down.clone());
                    let wu = tape.constant(w_up.clone());
                    let bottom = tape.conv2d(x, w, 1, 1)?;
                    let down = tape.conv2d(bottom, wd, 2, 1)?;
                    let up = tape.nn_upsample(down, 2)?;
                    let dec = tape.conv2d(up, wu, 1, 1)?;
                    let sum = tape.add(dec, bottom)?;
                    project(tape, sum, &r)
                },
                &w_bottom,
                eps,
            )
        }
        SmoothComposite => {
            // residual -> masked variance + forward-difference smoothness, as in the losses
            let gt = random::<T>(rng, &[1, 4, 5], -1.0, 1.0);
            let weight = random::<T>(rng, &[1, 2, 3, 3], -0.5, 0.5);
            let input = random::<T>(rng, &[2, 4, 5], -1.0, 1.0);
            let mask: Vec<bool> = (0..20).map(|i| i % 3 != 1).collect();
            let left: Vec<usize> = (0..4).flat_map(|y| (0..4).map(move |x| y * 5 + x)).collect();
            let right: Vec<usize> = left.iter().map(|i| i + 1).collect();
            let offset = T::of(0.5);
            grad_check(
                |tape, w| {
                    let x = tape.constant(input.clone());
                    let g = tape.constant(gt.clone());
                    let pred = tape.conv2d(x, w, 1, 1)?;
                    let pred = tape.add_scalar(pred, offset);
                    let res = tape.sub(pred, g)?;
                    let v = tape.masked_select(res, &mask)?;
                    let sq = tape.square(v);
                    let ms = tape.mean_reduce(sq)?;
                    let m = tape.mean_reduce(v)?;
                    let m2 = tape.square(m);
                    let var = tape.sub(ms, m2)?;
                    let a = tape.gather(res, right.clone())?;
                    let b = tape.gather(res, left.clone())?;
                    let d = tape.sub(a, b)?;
                    let d = tape.square(d);
                    let s = tape.mean_reduce(d)?;
                    let s = tape.scale(s, T::of(0.5));
                    tape.add(var, s)
                },
                &weight,
                eps,
            )
        }
    }
}

/// Runs every case on `instances` random draws and reports the worst error.
///
/// Finite-difference steps are `1e-2` in `f32` and `1e-5` in `f64`.
pub fn run_gradcheck_suite<T: Scalar>(instances: usize, seed: u64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let eps = if T::NAME == "f32" { T::of(1e-2) } else { T::of(1e-5) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GradCheckCase::ALL
        .iter()
        .map(|&case| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(run_case::<T>(case, &mut rng, eps)?.as_f64());
            }
            Ok(GradCheckReport { case, instances, max_rel_err: worst, tolerance })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |tape, x| {
                let y = tape.scale(x, 3.0);
                Ok(tape.sum_reduce(y))
            },
            &x,
            1e-3f64,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // heaviside has zero true derivative almost everywhere, but a surrogate backward
        let x = Tensor::from_vec(&[3], vec![0.2, 0.5, 0.8]).unwrap();
        let err = grad_check(
            |tape, x| {
                let y = tape.heaviside_surrogate(x, 1.0, Default::default());
                Ok(tape.sum_reduce(y))
            },
            &x,
            1e-4f64,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn suite_passes_in_f64() {
        for r in run_gradcheck_suite::<f64>(3, 1, 1e-5).unwrap() {
            assert!(r.passed(), "{} {}", r.case.name(), r.max_rel_err);
        }
    }

    #[test]
    fn suite_passes_in_f32() {
        for r in run_gradcheck_suite::<f32>(3, 2, 1e-3).unwrap() {
            assert!(r.passed(), "{} {}", r.case.name(), r.max_rel_err);
        }
    }
}
