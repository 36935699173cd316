//! Finite-difference validation of every backward closure. Each check builds
//! a scalar loss from seeded inputs, compares analytic gradients against
//! central differences in f64, and reports the worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Largest relative error a check may report and still pass.
pub const TOLERANCE: f64 = 1e-3;

/// Central-difference step. With f64 arithmetic this leaves roughly eight
/// significant digits, comfortably inside the tolerance.
pub const STEP: f64 = 1e-5;

pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < TOLERANCE
    }
}

/// Compares analytic gradients of `loss = f(tape)` against central finite
/// differences for every element of every tensor in `params`. The closure
/// must be a pure function of the current parameter values and return a
/// scalar.
pub fn check_params(
    name: &str,
    params: &[&Tensor<f64>],
    f: impl Fn(&Tape) -> Result<Tensor<f64>>,
) -> Result<CheckReport> {
    check_inner(name, params, f, false)
}

fn check_inner(
    name: &str,
    params: &[&Tensor<f64>],
    f: impl Fn(&Tape) -> Result<Tensor<f64>>,
    corrupt: bool,
) -> Result<CheckReport> {
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    if loss.len() != 1 {
        return Err(Error::Invariant(format!(
            "gradient check {name}: loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(&loss)?;
    let mut analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    drop(tape);
    if corrupt {
        // deliberate fault so the harness can prove it catches one
        if let Some(g) = analytic.first_mut().and_then(|g| g.first_mut()) {
            *g = *g * 1.01 + 0.05;
        }
    }

    let eval = |params_read: &[&Tensor<f64>]| -> Result<f64> {
        let _ = params_read;
        let tape = Tape::no_grad();
        Ok(f(&tape)?.item())
    };

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let old = p.data()[j];
            p.data_mut()[j] = old + STEP;
            let plus = eval(params)?;
            p.data_mut()[j] = old - STEP;
            let minus = eval(params)?;
            p.data_mut()[j] = old;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[pi][j];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / scale;
            if !rel.is_finite() {
                return Err(Error::Invariant(format!(
                    "gradient check {name}: non-finite comparison at param {pi} index {j}"
                )));
            }
            max_rel = max_rel.max(rel);
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
    })
}

pub(crate) fn uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    rg: bool,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data, rg).unwrap()
}

/// Values in ±[0.3, 1.5]: finite differences stay clear of activation kinks.
fn signed_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], rg: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.3..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data, rg).unwrap()
}

/// Scalar loss that is sensitive to every output element with distinct
/// weights, so sign and indexing mistakes cannot cancel out.
pub(crate) fn projected_loss(
    tape: &Tape,
    y: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>> {
    let w = uniform(rng, y.shape(), -1.0, 1.0, false);
    let prod = ops::mul(tape, y, &w)?;
    Ok(ops::sum_all(tape, &prod))
}

/// Finite-difference battery over every primitive op. `corrupt` injects a
/// deliberate gradient fault into the first check; the battery must then
/// fail, which is the negative control for the harness itself.
pub fn run_all(seed: u64, corrupt: bool) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let push = |r: Result<CheckReport>, reports: &mut Vec<CheckReport>| -> Result<()> {
        reports.push(r?);
        Ok(())
    };

    {
        let x = uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0, true);
        let w = uniform(&mut rng, &[4, 3, 3, 3], -0.7, 0.7, true);
        let b = uniform(&mut rng, &[4], -0.5, 0.5, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
        let r = check_inner(
            "conv2d",
            &[&x, &w, &b],
            |tape| {
                let y = ops::conv2d(tape, &x, &w, Some(&b), 2, 1, 1)?;
                projected_loss(tape, &y, &mut prng.clone())
            },
            corrupt,
        );
        push(r, &mut reports)?;
    }
    {
        let x = uniform(&mut rng, &[1, 4, 4, 4], -1.0, 1.0, true);
        let w = uniform(&mut rng, &[4, 2, 3, 3], -0.7, 0.7, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x12);
        let r = check_params("conv2d_grouped", &[&x, &w], |tape| {
            let y = ops::conv2d(tape, &x, &w, None, 1, 1, 2)?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0, true);
        let w = uniform(&mut rng, &[3, 1, 3, 3], -0.7, 0.7, true);
        let b = uniform(&mut rng, &[3], -0.5, 0.5, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x13);
        let r = check_params("conv2d_depthwise", &[&x, &w, &b], |tape| {
            let y = ops::conv2d(tape, &x, &w, Some(&b), 1, 1, 3)?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let x = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0, true);
        let w = uniform(&mut rng, &[2, 3, 2, 3, 3], -0.7, 0.7, true);
        let b = uniform(&mut rng, &[2, 3], -0.5, 0.5, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x14);
        let r = check_params("conv2d_per_sample", &[&x, &w, &b], |tape| {
            let y = ops::conv2d_per_sample(tape, &x, &w, Some(&b), 1, 1, 1)?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let x = uniform(&mut rng, &[3, 4], -1.0, 1.0, true);
        let w = uniform(&mut rng, &[5, 4], -0.7, 0.7, true);
        let b = uniform(&mut rng, &[5], -0.5, 0.5, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x15);
        let r = check_params("fully_connected", &[&x, &w, &b], |tape| {
            let y = ops::fully_connected(tape, &x, &w, Some(&b))?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let x = uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0, true);
        let gamma = uniform(&mut rng, &[3], 0.5, 1.5, true);
        let beta = uniform(&mut rng, &[3], -0.5, 0.5, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x16);
        let r = check_params("batch_norm_train", &[&x, &gamma, &beta], |tape| {
            let rm = Tensor::zeros(&[3], false);
            let rv = Tensor::full(&[3], 1.0, false);
            let y = ops::batch_norm(tape, &x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, true)?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let x = uniform(&mut rng, &[2, 3, 2, 2], -2.0, 2.0, true);
        let gamma = uniform(&mut rng, &[3], 0.5, 1.5, true);
        let beta = uniform(&mut rng, &[3], -0.5, 0.5, true);
        let rm = uniform(&mut rng, &[3], -0.3, 0.3, false);
        let rv = uniform(&mut rng, &[3], 0.5, 1.5, false);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x17);
        let r = check_params("batch_norm_eval", &[&x, &gamma, &beta], |tape| {
            let y = ops::batch_norm(tape, &x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, false)?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let z = uniform(&mut rng, &[2, 4], -2.0, 2.0, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x18);
        let r = check_params("softmax_temperature", &[&z], |tape| {
            let y = ops::softmax_with_temperature(tape, &z, 2.5)?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let x = signed_off_zero(&mut rng, &[2, 3, 3, 3], true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x19);
        let r = check_params("relu", &[&x], |tape| {
            let y = ops::relu(tape, &x);
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        // rails at 0 and 6; keep samples clear of both kinks
        let data = [-2.0, -0.5, 0.3, 1.0, 3.0, 5.5, 6.5, 8.0];
        let x = Tensor::new(&[2, 4], data.to_vec(), true).unwrap();
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a);
        let r = check_params("relu6", &[&x], |tape| {
            let y = ops::relu6(tape, &x);
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0, true);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x1b);
        let r = check_params("global_avg_pool", &[&x], |tape| {
            let y = ops::global_avg_pool(tape, &x)?;
            projected_loss(tape, &y, &mut prng.clone())
        });
        push(r, &mut reports)?;
    }
    {
        let z = uniform(&mut rng, &[4, 6], -2.0, 2.0, true);
        let labels = [0usize, 3, 5, 2];
        let r = check_params("cross_entropy", &[&z], |tape| {
            ops::cross_entropy_loss(tape, &z, &labels)
        });
        push(r, &mut reports)?;
    }

    reports.extend(crate::nn::layer_gradchecks(seed)?);
    Ok(reports)
}
