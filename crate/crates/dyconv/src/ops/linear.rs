use crate::count::{self, CostKind};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// y = x · Wᵀ + b with x `[n, c_in]`, W `[c_out, c_in]`, b `[c_out]`.
pub fn fully_connected<E: Element>(
    tape: &Tape,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let ish = input.shape();
    let wsh = weight.shape();
    if ish.len() != 2 || wsh.len() != 2 {
        return Err(Error::Shape(format!(
            "fully_connected wants 2-d input and weight, got {ish:?} and {wsh:?}"
        )));
    }
    let (n, c_in) = (ish[0], ish[1]);
    let (c_out, w_in) = (wsh[0], wsh[1]);
    if c_in != w_in {
        return Err(Error::Shape(format!(
            "inner dimensions disagree: input {c_in}, weight {w_in}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "bias shape {:?} != [{c_out}]",
                b.shape()
            )));
        }
    }
    let mut out = vec![E::zero(); n * c_out];
    let mut macs = 0u64;
    {
        let x = input.data();
        let w = weight.data();
        let b = bias.map(|b| b.data());
        for ni in 0..n {
            for oc in 0..c_out {
                let mut acc = E::zero();
                for i in 0..c_in {
                    acc = acc + x[ni * c_in + i] * w[oc * c_in + i];
                    macs += 1;
                }
                if let Some(b) = b.as_deref() {
                    acc = acc + b[oc];
                }
                out[ni * c_out + oc] = acc;
            }
        }
    }
    count::record(CostKind::Conv, macs);

    let rg = tape.recording()
        && (input.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad()));
    let output = Tensor::raw(vec![n, c_out], out, rg);
    if rg {
        let (input, weight, output2) = (input.clone(), weight.clone(), output.clone());
        let bias = bias.cloned();
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let x = input.data();
            let w = weight.data();
            if input.requires_grad() {
                let mut dx = vec![E::zero(); n * c_in];
                for ni in 0..n {
                    for oc in 0..c_out {
                        let g = go[ni * c_out + oc];
                        for i in 0..c_in {
                            dx[ni * c_in + i] = dx[ni * c_in + i] + g * w[oc * c_in + i];
                        }
                    }
                }
                drop(w);
                input.accum_grad(&dx);
            }
            if weight.requires_grad() {
                let mut dw = vec![E::zero(); c_out * c_in];
                for ni in 0..n {
                    for oc in 0..c_out {
                        let g = go[ni * c_out + oc];
                        for i in 0..c_in {
                            dw[oc * c_in + i] = dw[oc * c_in + i] + g * x[ni * c_in + i];
                        }
                    }
                }
                drop(x);
                weight.accum_grad(&dw);
            }
            if let Some(b) = bias.as_ref() {
                if b.requires_grad() {
                    let mut db = vec![E::zero(); c_out];
                    for ni in 0..n {
                        for oc in 0..c_out {
                            db[oc] = db[oc] + go[ni * c_out + oc];
                        }
                    }
                    b.accum_grad(&db);
                }
            }
        });
    }
    Ok(output)
}
