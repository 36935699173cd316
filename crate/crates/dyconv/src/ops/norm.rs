use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Per-channel batch normalization over NCHW input.
///
/// Training mode normalizes with the batch statistics (biased variance),
/// updates the running buffers in place with `momentum` (unbiased variance
/// when more than one value contributes), and differentiates through the
/// batch statistics. Eval mode treats the running buffers as constants.
/// Readiness of the running buffers is the caller's contract (see
/// `nn::BatchNorm`, which raises a state error for eval-before-train).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<E: Element>(
    tape: &Tape,
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<Tensor<E>> {
    let sh = input.shape();
    if sh.len() != 4 {
        return Err(Error::Shape(format!("batch_norm wants NCHW input, got {sh:?}")));
    }
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::Shape(format!(
                "{name} shape {:?} != [{c}]",
                t.shape()
            )));
        }
    }
    let count = n * h * w;
    let inv_count = E::from_f64(1.0 / count as f64);
    let eps_e = E::from_f64(eps);

    // per-channel statistics used for normalization
    let (mean, istd) = if training {
        let x = input.data();
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        for ci in 0..c {
            let mut acc = E::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    acc = acc + x[base + p];
                }
            }
            mean[ci] = acc * inv_count;
        }
        for ci in 0..c {
            let mut acc = E::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    let d = x[base + p] - mean[ci];
                    acc = acc + d * d;
                }
            }
            var[ci] = acc * inv_count;
        }
        drop(x);

        // running-stat update (unbiased variance when defined)
        let m = E::from_f64(momentum);
        let keep = E::one() - m;
        let bessel = if count > 1 {
            E::from_f64(count as f64 / (count as f64 - 1.0))
        } else {
            E::one()
        };
        {
            let mut rm = running_mean.data_mut();
            let mut rv = running_var.data_mut();
            for ci in 0..c {
                rm[ci] = keep * rm[ci] + m * mean[ci];
                rv[ci] = keep * rv[ci] + m * var[ci] * bessel;
            }
        }
        let istd: Vec<E> = var.iter().map(|&v| E::one() / (v + eps_e).sqrt()).collect();
        (mean, istd)
    } else {
        let rm = running_mean.to_vec();
        let istd: Vec<E> = running_var
            .data()
            .iter()
            .map(|&v| E::one() / (v + eps_e).sqrt())
            .collect();
        (rm, istd)
    };

    let mut xhat = vec![E::zero(); n * c * h * w];
    let mut out = vec![E::zero(); n * c * h * w];
    {
        let x = input.data();
        let ga = gamma.data();
        let be = beta.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    let xh = (x[base + p] - mean[ci]) * istd[ci];
                    xhat[base + p] = xh;
                    out[base + p] = ga[ci] * xh + be[ci];
                }
            }
        }
    }

    let rg = tape.recording()
        && (input.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    let output = Tensor::raw(sh.to_vec(), out, rg);
    if rg {
        let (input, gamma2, beta2, output2) =
            (input.clone(), gamma.clone(), beta.clone(), output.clone());
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let hw = h * w;
            // per-channel reductions of go and go*xhat
            let mut sum_go = vec![E::zero(); c];
            let mut sum_go_xhat = vec![E::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        sum_go[ci] = sum_go[ci] + go[base + p];
                        sum_go_xhat[ci] = sum_go_xhat[ci] + go[base + p] * xhat[base + p];
                    }
                }
            }
            if beta2.requires_grad() {
                beta2.accum_grad(&sum_go);
            }
            if gamma2.requires_grad() {
                gamma2.accum_grad(&sum_go_xhat);
            }
            if input.requires_grad() {
                let ga = gamma2.data();
                let mut dx = vec![E::zero(); n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let scale = ga[ci] * istd[ci];
                        for p in 0..hw {
                            let term = if training {
                                go[base + p]
                                    - sum_go[ci] * inv_count
                                    - xhat[base + p] * sum_go_xhat[ci] * inv_count
                            } else {
                                go[base + p]
                            };
                            dx[base + p] = scale * term;
                        }
                    }
                }
                drop(ga);
                input.accum_grad(&dx);
            }
        });
    }
    Ok(output)
}
