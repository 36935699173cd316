use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Mean over the batch of −log softmax(logits)[label], computed through a
/// stabilized log-sum-exp.
pub fn cross_entropy_loss<E: Element>(
    tape: &Tape,
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<Tensor<E>> {
    let sh = logits.shape();
    if sh.len() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy_loss wants [n, c] logits, got {sh:?}"
        )));
    }
    let (n, c) = (sh[0], sh[1]);
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let mut total = E::zero();
    {
        let z = logits.data();
        for (ni, &label) in labels.iter().enumerate() {
            let row = &z[ni * c..(ni + 1) * c];
            let mut m = row[0];
            for &v in row.iter().skip(1) {
                if v > m {
                    m = v;
                }
            }
            let mut sum = E::zero();
            for &v in row {
                sum = sum + (v - m).exp();
            }
            let lse = m + sum.ln();
            total = total + (lse - row[label]);
        }
    }
    let inv_n = E::from_f64(1.0 / n as f64);
    let rg = tape.recording() && logits.requires_grad();
    let output = Tensor::raw(vec![1], vec![total * inv_n], rg);
    if rg {
        let (logits, output2) = (logits.clone(), output.clone());
        let labels = labels.to_vec();
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let g = go[0] * inv_n;
            let z = logits.data();
            let mut dz = vec![E::zero(); n * c];
            for (ni, &label) in labels.iter().enumerate() {
                let row = &z[ni * c..(ni + 1) * c];
                let mut m = row[0];
                for &v in row.iter().skip(1) {
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = E::zero();
                for &v in row {
                    sum = sum + (v - m).exp();
                }
                for j in 0..c {
                    let p = (row[j] - m).exp() / sum;
                    let indicator = if j == label { E::one() } else { E::zero() };
                    dz[ni * c + j] = (p - indicator) * g;
                }
            }
            drop(z);
            logits.accum_grad(&dz);
        });
    }
    Ok(output)
}
