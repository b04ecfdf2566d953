//! Shared helpers for the integration tests: reference loop nests, random
//! tensors and a central finite-difference gradient checker.

#![allow(dead_code)]

use cellnas::data::{generate, Prepared, SyntheticTaskSpec};
use cellnas::model::ModelConfig;
use cellnas::nn::{Ctx, GradSet, Init, Mode, ParamId, ParamKind, ParamStore};
use cellnas::optim::{Flavor, Hyper, Optimizer};
use cellnas::rng::RngState;
use cellnas::tensor::{Float, Tape, Tensor, Var};
use cellnas::trainer::{NetworkSpec, TrainConfig};

pub const FD_STEP: f64 = 1e-3;
/// Step for whole modules. Batch normalization over a handful of elements
/// makes these strongly curved, and at 1e-3 the O(h^2) truncation term alone
/// can exceed the tolerance.
pub const MODULE_FD_STEP: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-6;
pub const FD_REL: f64 = 1e-4;

pub fn randn<T: Float>(shape: &[usize], rng: &mut RngState) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.normal(0.0, 1.0) as f64))
}

pub fn max_abs_diff<T: Float>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Textbook grouped convolution, NCHW, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    (n, c_in, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (c_out, k): (usize, usize),
    stride: usize,
    dilation: usize,
    padding: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    let ow = (w + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    let (cig, cog) = (c_in / groups, c_out / groups);
    let mut y = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for co in 0..c_out {
            let g = co / cog;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cig {
                        let cin = g * cig + ci;
                        for p in 0..k {
                            for q in 0..k {
                                let hi = (i * stride + p * dilation) as isize - padding as isize;
                                let wj = (j * stride + q * dilation) as isize - padding as isize;
                                if hi < 0 || wj < 0 || hi >= h as isize || wj >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c_in + cin) * h + hi as usize) * w + wj as usize]
                                    * weight[((co * cig + ci) * k + p) * k + q];
                            }
                        }
                    }
                    y[((b * c_out + co) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}

pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst_excess: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn assert_ok(&self, what: &str) {
        assert!(
            self.failures.is_empty(),
            "{what}: {} mismatches, first: {}",
            self.failures.len(),
            self.failures[0]
        );
        assert!(self.checked > 0, "{what}: every coordinate was skipped");
    }
}

/// Loss, activation pattern and (optionally) gradients for a set of inputs.
pub type Eval<'a> = dyn FnMut(&[Tensor<f64>], bool) -> (f64, u64, Vec<Vec<f64>>) + 'a;

/// Compares analytic gradients with central differences on up to
/// `per_tensor` coordinates of each input. Coordinates whose perturbation
/// changes the activation pattern (a ReLU sign or a max-pool winner) are
/// skipped, since the function is not differentiable across that kink.
pub fn fd_check(inputs: &[Tensor<f64>], step: f64, per_tensor: usize, rng: &mut RngState, eval: &mut Eval) -> FdReport {
    let (_, base_pattern, grads) = eval(inputs, true);
    assert_eq!(grads.len(), inputs.len());
    let mut report = FdReport {
        checked: 0,
        skipped: 0,
        worst_excess: f64::NEG_INFINITY,
        failures: Vec::new(),
    };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            rng.permutation(n)[..per_tensor].to_vec()
        };
        for j in coords {
            let mut probe = inputs.to_vec();
            let x0 = t.data()[j];
            probe[ti].data_mut()[j] = x0 + step;
            let (lp, pp, _) = eval(&probe, false);
            probe[ti].data_mut()[j] = x0 - step;
            let (lm, pm, _) = eval(&probe, false);
            if pp != base_pattern || pm != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads[ti][j];
            let tol = FD_ABS + FD_REL * numeric.abs();
            let err = (analytic - numeric).abs();
            report.checked += 1;
            report.worst_excess = report.worst_excess.max(err - tol);
            if err > tol {
                report
                    .failures
                    .push(format!("input {ti}[{j}]: analytic {analytic:e} numeric {numeric:e}"));
            }
        }
    }
    report
}

/// Weights the output by a fixed random tensor and sums, so every output
/// element contributes a distinct amount to the loss.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = RngState::derive(seed, 77);
    let r = randn::<f64>(tape.shape(y), &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r).expect("same shape");
    tape.sum(p)
}

/// Finite-difference check of a raw tape graph over its leaf inputs.
pub fn fd_tape<F>(inputs: &[Tensor<f64>], seed: u64, per_tensor: usize, mut build: F) -> FdReport
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut eval = |xs: &[Tensor<f64>], want: bool| {
        let mut tape = Tape::<f64>::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let y = build(&mut tape, &leaves);
        let loss = weighted_sum(&mut tape, y, seed);
        let value = tape.value(loss).item();
        let pattern = tape.activation_pattern();
        let grads = if want {
            let g = tape.backward(loss).expect("scalar loss");
            leaves
                .iter()
                .zip(xs)
                .map(|(&l, x)| g.get(l).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
                .collect()
        } else {
            Vec::new()
        };
        (value, pattern, grads)
    };
    fd_check(inputs, FD_STEP, per_tensor, &mut RngState::derive(seed, 78), &mut eval)
}

/// Finite-difference check over every weight and architecture tensor of a
/// module, plus an optional input tensor fed through `build`.
pub fn fd_module<F>(
    store: &ParamStore<f64>,
    input: Option<&Tensor<f64>>,
    seed: u64,
    per_tensor: usize,
    mut build: F,
) -> FdReport
where
    F: FnMut(&mut Ctx<f64>, Option<Var>) -> Var,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Buffer)
        .map(|(id, _)| id)
        .collect();
    let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.value(id).clone()).collect();
    if let Some(x) = input {
        inputs.push(x.clone());
    }
    let base = store.clone();
    let mut eval = |xs: &[Tensor<f64>], want: bool| {
        let mut s = base.clone();
        for (&id, t) in ids.iter().zip(xs) {
            *s.value_mut(id) = t.clone();
        }
        let mut rng = RngState::derive(seed, 79);
        let mut ctx = Ctx::new(&mut s, &mut rng, Mode::Train, GradSet::ALL);
        let x = input.map(|_| ctx.tape.leaf(xs[ids.len()].clone(), true));
        let y = build(&mut ctx, x);
        let loss = weighted_sum(&mut ctx.tape, y, seed);
        let value = ctx.tape.value(loss).item();
        let pattern = ctx.tape.activation_pattern();
        let grads = if want {
            let raw = ctx.tape.backward(loss).expect("scalar loss");
            let by_param = ctx.backward(loss).expect("scalar loss");
            let mut out: Vec<Vec<f64>> = ids
                .iter()
                .map(|id| {
                    by_param.iter().find(|(p, _)| p == id).map_or_else(
                        || vec![0.0; xs[ids.iter().position(|q| q == id).unwrap()].numel()],
                        |(_, g)| g.clone(),
                    )
                })
                .collect();
            if let Some(xv) = x {
                out.push(
                    raw.get(xv)
                        .map_or_else(|| vec![0.0; xs[ids.len()].numel()], <[f64]>::to_vec),
                );
            }
            out
        } else {
            Vec::new()
        };
        (value, pattern, grads)
    };
    fd_check(
        &inputs,
        MODULE_FD_STEP,
        per_tensor,
        &mut RngState::derive(seed, 80),
        &mut eval,
    )
}

/// Small four-class planted task, fast enough for hundreds of steps.
pub fn tiny_task(seed: u64) -> Prepared {
    let spec = SyntheticTaskSpec {
        num_classes: 4,
        samples_per_class: 40,
        image_size: 12,
        seed,
        ..Default::default()
    };
    generate(&spec).unwrap().prepare(seed).unwrap()
}

pub fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.encoder.image_size = 12;
    m.encoder.channels = 4;
    m.encoder.cells = 1;
    m.encoder.embed_dim = 16;
    m
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

pub fn tiny_spec(data: &Prepared) -> NetworkSpec {
    NetworkSpec {
        model: tiny_model(),
        schema: data.schema.clone(),
        num_classes: data.num_classes(),
        fixed_cells: None,
    }
}

/// Trajectory of a single parameter starting at 1.
pub fn run_optimizer(flavor: Flavor, lr: f64, wd: f64, grads: &[f32]) -> Vec<f32> {
    let mut store = ParamStore::new();
    let id = store.add("p", ParamKind::Weight, &[1], Init::Ones).unwrap();
    let mut opt = Optimizer::new(flavor, Hyper::new(lr, wd), vec![id], &store);
    grads
        .iter()
        .map(|&g| {
            opt.apply(&mut store, &[(id, vec![g])]);
            store.value(id).item()
        })
        .collect()
}

/// Bias-corrected Adam written out longhand in double precision.
pub fn closed_form(flavor: Flavor, lr: f64, wd: f64, grads: &[f32]) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        let g = g as f64 + if flavor == Flavor::Adam { wd * p } else { 0.0 };
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let step = lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let decay = if flavor == Flavor::AdamW { lr * wd * p } else { 0.0 };
        p = p - decay - step;
        out.push(p);
    }
    out
}
