use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Row-wise softmax of z/τ with per-row max subtraction for stability.
/// Large τ flattens the distribution toward uniform; τ=1 is plain softmax.
pub fn softmax_with_temperature<E: Element>(
    tape: &Tape,
    logits: &Tensor<E>,
    tau: f64,
) -> Result<Tensor<E>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let sh = logits.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_with_temperature wants [n, k] logits, got {sh:?}"
        )));
    }
    let (n, k) = (sh[0], sh[1]);
    let inv_tau = E::from_f64(1.0 / tau);
    let mut out = vec![E::zero(); n * k];
    {
        let z = logits.data();
        for ni in 0..n {
            let row = &z[ni * k..(ni + 1) * k];
            let mut m = row[0] * inv_tau;
            for &v in row.iter().skip(1) {
                let s = v * inv_tau;
                if s > m {
                    m = s;
                }
            }
            let mut denom = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v * inv_tau - m).exp();
                out[ni * k + j] = e;
                denom = denom + e;
            }
            for j in 0..k {
                out[ni * k + j] = out[ni * k + j] / denom;
            }
        }
    }
    let rg = tape.recording() && logits.requires_grad();
    let output = Tensor::raw(vec![n, k], out, rg);
    if rg {
        let (logits, output2) = (logits.clone(), output.clone());
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let y = output2.data();
            let mut dz = vec![E::zero(); n * k];
            for ni in 0..n {
                let mut dot = E::zero();
                for j in 0..k {
                    dot = dot + go[ni * k + j] * y[ni * k + j];
                }
                for j in 0..k {
                    dz[ni * k + j] = inv_tau * y[ni * k + j] * (go[ni * k + j] - dot);
                }
            }
            drop(y);
            logits.accum_grad(&dz);
        });
    }
    Ok(output)
}
