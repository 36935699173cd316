//! Primitive differentiable operations. Each op validates shapes, computes
//! its forward result, and (when the tape is recording and any input requires
//! gradients) registers a single backward closure that reads the output's
//! gradient and accumulates into the inputs.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod softmax;

pub use activation::{relu, relu6};
pub use conv::{conv2d, conv2d_per_sample};
pub use linear::fully_connected;
pub use loss::cross_entropy_loss;
pub use norm::batch_norm;
pub use pool::global_avg_pool;
pub use softmax::softmax_with_temperature;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

fn same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<E: Element>(tape: &Tape, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b, "add")?;
    let out: Vec<E> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let rg = tape.recording() && (a.requires_grad() || b.requires_grad());
    let y = Tensor::raw(a.shape().to_vec(), out, rg);
    if rg {
        let (a, b, y2) = (a.clone(), b.clone(), y.clone());
        tape.record(move || {
            let Some(go) = y2.grad() else { return };
            a.accum_grad(&go);
            b.accum_grad(&go);
        });
    }
    Ok(y)
}

/// Elementwise product of two same-shape tensors.
pub fn mul<E: Element>(tape: &Tape, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b, "mul")?;
    let out: Vec<E> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let rg = tape.recording() && (a.requires_grad() || b.requires_grad());
    let y = Tensor::raw(a.shape().to_vec(), out, rg);
    if rg {
        let (a2, b2, y2) = (a.clone(), b.clone(), y.clone());
        tape.record(move || {
            let Some(go) = y2.grad() else { return };
            if a2.requires_grad() {
                let bd = b2.data();
                let da: Vec<E> = go.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                a2.accum_grad(&da);
            }
            if b2.requires_grad() {
                let ad = a2.data();
                let db: Vec<E> = go.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                b2.accum_grad(&db);
            }
        });
    }
    Ok(y)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all<E: Element>(tape: &Tape, x: &Tensor<E>) -> Tensor<E> {
    let total = x.data().iter().fold(E::zero(), |acc, &v| acc + v);
    let rg = tape.recording() && x.requires_grad();
    let y = Tensor::raw(vec![1], vec![total], rg);
    if rg {
        let (x2, y2, n) = (x.clone(), y.clone(), x.len());
        tape.record(move || {
            let Some(go) = y2.grad() else { return };
            x2.accum_grad(&vec![go[0]; n]);
        });
    }
    y
}

/// Same data, new shape (element count must match). The data is copied, so
/// the result is an independent tape participant.
pub fn reshape<E: Element>(tape: &Tape, x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    let n: usize = shape.iter().product();
    if n != x.len() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "reshape: cannot view {:?} as {shape:?}",
            x.shape()
        )));
    }
    let rg = tape.recording() && x.requires_grad();
    let y = Tensor::raw(shape.to_vec(), x.to_vec(), rg);
    if rg {
        let (x2, y2) = (x.clone(), y.clone());
        tape.record(move || {
            let Some(go) = y2.grad() else { return };
            x2.accum_grad(&go);
        });
    }
    Ok(y)
}
