//! Central-difference gradient checks for every differentiable primitive.
//!
//! Each check draws random small shapes, projects the op output onto a fixed
//! random direction `r` so the objective is the scalar `Σ r ⊙ f(x)`, and
//! compares the tape's vector-Jacobian product against finite differences of
//! forward evaluations only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::{Padding, PoolMode};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_relative_error: f64,
    pub worst_case: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= TOLERANCE
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Forward<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Largest relative error over all inputs of one case.
fn check_case(inputs: &[Tensor<f64>], forward: &Forward<'_>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let run = |values: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), grad)).collect();
        let out = forward(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = run(inputs, true)?;
    let direction =
        Tensor::<f64>::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0));
    let grads = tape.backward_from(out, direction.clone())?;

    let objective = |values: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, out) = run(values, false)?;
        Ok(tape
            .value(out)?
            .data()
            .iter()
            .zip(direction.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = match grads.get(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut probe = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = inputs[k].data()[i];
            probe[k].data_mut()[i] = original + STEP;
            let plus = objective(&probe)?;
            probe[k].data_mut()[i] = original - STEP;
            let minus = objective(&probe)?;
            probe[k].data_mut()[i] = original;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude at least 0.05 so no probe crosses the relu kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced at least 1e-2 apart so max pooling has no ties
/// within the probe step.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    Tensor::from_fn(shape, |i| ranks[i] as f64 * 0.02 - n as f64 * 0.01 + rng.random_range(0.0..0.005))
}

fn padding(rng: &mut ChaCha8Rng) -> Padding {
    if rng.random::<bool>() {
        Padding::Same
    } else {
        Padding::Valid
    }
}

struct Case {
    label: String,
    inputs: Vec<Tensor<f64>>,
    forward: Box<Forward<'static>>,
}

fn run_suite(
    op: &'static str,
    cases: usize,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Case,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        op,
        cases,
        max_relative_error: 0.0,
        worst_case: String::new(),
    };
    for _ in 0..cases {
        let case = make(&mut rng);
        let err = check_case(&case.inputs, case.forward.as_ref(), &mut rng)?;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst_case = case.label;
        }
    }
    Ok(report)
}

pub fn check_conv2d(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("conv2d", cases, seed, |rng| {
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(3..=7), rng.random_range(3..=7));
        let (c, f) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let stride = rng.random_range(1..=2);
        let pad = padding(rng);
        Case {
            label: format!("x[{n},{h},{w},{c}] k[{kh},{kw},{c},{f}] s{stride} {pad}"),
            inputs: vec![uniform(&[n, h, w, c], -1.0, 1.0, rng), uniform(&[kh, kw, c, f], -1.0, 1.0, rng)],
            forward: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
        }
    })
}

pub fn check_pool2d(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("pool2d", cases, seed, |rng| {
        let (n, h, w, c) = (
            rng.random_range(1..=2),
            rng.random_range(3..=7),
            rng.random_range(3..=7),
            rng.random_range(1..=3),
        );
        let window = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let pad = padding(rng);
        let mode = if rng.random::<bool>() { PoolMode::Max } else { PoolMode::Avg };
        Case {
            label: format!("x[{n},{h},{w},{c}] {mode:?} w{window} s{stride} {pad}"),
            inputs: vec![distinct(&[n, h, w, c], rng)],
            forward: Box::new(move |t, v| t.pool2d(v[0], window, stride, mode, pad)),
        }
    })
}

pub fn check_batchnorm(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("batchnorm", cases, seed, |rng| {
        let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let c = shape[3];
        let mean = uniform(&[c], -1.0, 1.0, rng);
        let var = uniform(&[c], 0.2, 2.0, rng);
        Case {
            label: format!("x{shape:?}"),
            inputs: vec![uniform(&shape, -2.0, 2.0, rng), uniform(&[c], -1.0, 1.0, rng)],
            forward: Box::new(move |t, v| {
                let m = t.leaf(mean.clone(), false);
                let s = t.leaf(var.clone(), false);
                t.batchnorm(v[0], v[1], m, s, 1e-3)
            }),
        }
    })
}

pub fn check_dense(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("dense", cases, seed, |rng| {
        let (n, d, u) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=5));
        Case {
            label: format!("x[{n},{d}] w[{d},{u}]"),
            inputs: vec![
                uniform(&[n, d], -1.0, 1.0, rng),
                uniform(&[d, u], -1.0, 1.0, rng),
                uniform(&[u], -1.0, 1.0, rng),
            ],
            forward: Box::new(|t, v| t.dense(v[0], v[1], v[2])),
        }
    })
}

pub fn check_relu(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("relu", cases, seed, |rng| {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3)];
        Case {
            label: format!("x{shape:?}"),
            inputs: vec![away_from_zero(&shape, rng)],
            forward: Box::new(|t, v| t.relu(v[0])),
        }
    })
}

pub fn check_softmax(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("softmax", cases, seed, |rng| {
        let shape = [rng.random_range(1..=4), rng.random_range(2..=6)];
        Case {
            label: format!("x{shape:?}"),
            inputs: vec![uniform(&shape, -3.0, 3.0, rng)],
            forward: Box::new(|t, v| t.softmax(v[0])),
        }
    })
}

pub fn check_flatten(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("flatten", cases, seed, |rng| {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        Case {
            label: format!("x{shape:?}"),
            inputs: vec![uniform(&shape, -1.0, 1.0, rng)],
            forward: Box::new(|t, v| t.flatten(v[0])),
        }
    })
}

pub fn check_concat(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("concat", cases, seed, |rng| {
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let parts = rng.random_range(1..=4);
        let inputs: Vec<Tensor<f64>> = (0..parts)
            .map(|_| {
                let c = rng.random_range(1..=3);
                uniform(&[n, h, w, c], -1.0, 1.0, rng)
            })
            .collect();
        let widths: Vec<usize> = inputs.iter().map(|t| t.shape()[3]).collect();
        Case {
            label: format!("[{n},{h},{w}] widths {widths:?}"),
            inputs,
            forward: Box::new(|t, v| t.concat_channels(v)),
        }
    })
}

pub fn check_dropout(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("dropout", cases, seed, |rng| {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=8)];
        let mask_seed: u64 = rng.random();
        let rate = rng.random_range(0.0..0.8);
        Case {
            label: format!("x{shape:?} rate {rate:.2}"),
            inputs: vec![uniform(&shape, -1.0, 1.0, rng)],
            forward: Box::new(move |t, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                t.dropout(v[0], rate, true, &mut mask_rng)
            }),
        }
    })
}

/// logits → softmax → categorical cross-entropy against random one-hots.
pub fn check_crossentropy(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("softmax+crossentropy", cases, seed, |rng| {
        let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=4));
        let mut onehot = Tensor::<f64>::zeros(&[n, k]);
        for row in 0..n {
            let hot = rng.random_range(0..k);
            onehot.data_mut()[row * k + hot] = 1.0;
        }
        Case {
            label: format!("logits[{n},{k}]"),
            inputs: vec![uniform(&[n, k], -2.0, 2.0, rng)],
            forward: Box::new(move |t, v| {
                let p = t.softmax(v[0])?;
                t.crossentropy(p, onehot.clone())
            }),
        }
    })
}

/// Conv unit followed by the head: conv → batchnorm → relu → pool → flatten
/// → dense → softmax → cross-entropy, differentiated w.r.t. every weight.
pub fn check_composite(cases: usize, seed: u64) -> Result<GradCheckReport> {
    run_suite("composite", cases, seed, |rng| {
        let (n, h, c, f) = (rng.random_range(1..=2), rng.random_range(4..=6), rng.random_range(1..=2), rng.random_range(1..=3));
        let classes = 3;
        let pooled = (h - 2) / 2 + 1; // 3x3 same conv keeps h, then 2x2/2 valid pool
        let flat = pooled * pooled * f;
        let mut onehot = Tensor::<f64>::zeros(&[n, classes]);
        for row in 0..n {
            onehot.data_mut()[row * classes + rng.random_range(0..classes)] = 1.0;
        }
        let mean = uniform(&[f], -0.2, 0.2, rng);
        let var = uniform(&[f], 0.5, 1.5, rng);
        Case {
            label: format!("x[{n},{h},{h},{c}] f{f}"),
            inputs: vec![
                uniform(&[n, h, h, c], -1.0, 1.0, rng),
                uniform(&[3, 3, c, f], -1.0, 1.0, rng),
                uniform(&[f], -0.5, 0.5, rng),
                uniform(&[flat, classes], -1.0, 1.0, rng),
                uniform(&[classes], -0.5, 0.5, rng),
            ],
            forward: Box::new(move |t, v| {
                let m = t.leaf(mean.clone(), false);
                let s = t.leaf(var.clone(), false);
                let y = t.conv2d(v[0], v[1], 1, Padding::Same)?;
                let y = t.batchnorm(y, v[2], m, s, 1e-3)?;
                let y = t.relu(y)?;
                let y = t.pool2d(y, 2, 2, PoolMode::Avg, Padding::Valid)?;
                let y = t.flatten(y)?;
                let y = t.dense(y, v[3], v[4])?;
                let p = t.softmax(y)?;
                t.crossentropy(p, onehot.clone())
            }),
        }
    })
}

/// Every primitive check with `cases` random shapes each.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let checks: [fn(usize, u64) -> Result<GradCheckReport>; 11] = [
        check_conv2d,
        check_pool2d,
        check_batchnorm,
        check_dense,
        check_relu,
        check_softmax,
        check_flatten,
        check_concat,
        check_dropout,
        check_crossentropy,
        check_composite,
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, check)| check(cases, seed.wrapping_add(i as u64)))
        .collect()
}
