//! SGD with momentum and L2 weight decay:
//! v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub struct Sgd<E: Element> {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(params: &[Tensor<E>], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![E::zero(); p.len()]).collect(),
        }
    }

    /// One update over the same parameter list the optimizer was built for.
    /// Parameters without an accumulated gradient are treated as grad = 0
    /// (they still feel weight decay).
    pub fn step(&mut self, params: &[Tensor<E>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} momentum buffers but got {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        let m = E::from_f64(self.momentum);
        let wd = E::from_f64(self.weight_decay);
        let lr = E::from_f64(lr);
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            if p.len() != v.len() {
                return Err(Error::Shape(format!(
                    "parameter of {} values against momentum buffer of {}",
                    p.len(),
                    v.len()
                )));
            }
            let grad = p.grad();
            let mut data = p.data_mut();
            for i in 0..v.len() {
                let g = grad.as_ref().map_or(E::zero(), |g| g[i]);
                v[i] = m * v[i] + g + wd * data[i];
                data[i] = data[i] - lr * v[i];
            }
        }
        Ok(())
    }
}
