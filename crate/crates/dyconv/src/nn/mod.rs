//! Layer-level building blocks: the input-conditioned attention branch, the
//! kernel aggregation step, the full dynamic convolution layer, and the tiny
//! perceptron forms used by the XOR demonstration.

pub mod attention;
pub mod dynamic;
pub mod perceptron;

pub use attention::{reduction_dim, AttentionBranch};
pub use dynamic::{aggregate_kernels, AggregationMode, DynamicConvLayer};
pub use perceptron::{dynamic_perceptron_forward, static_perceptron_xor, xor_dynamic};

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::CheckReport;
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn is_train(self) -> bool {
        matches!(self, Phase::Train)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
    None,
}

impl Activation {
    pub fn apply<E: Element>(self, tape: &Tape, x: &Tensor<E>) -> Tensor<E> {
        match self {
            Activation::Relu => ops::relu(tape, x),
            Activation::Relu6 => ops::relu6(tape, x),
            Activation::None => x.clone(),
        }
    }
}

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn kaiming_uniform<E: Element>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<E> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data, true).unwrap()
}

/// Per-channel batch norm with learnable scale/shift and running statistics.
/// Evaluation before any training forward (or checkpoint restore) has no
/// meaningful statistics to use and is refused.
pub struct BatchNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub momentum: f64,
    pub eps: f64,
    initialized: Cell<bool>,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], E::one(), true),
            beta: Tensor::zeros(&[channels], true),
            running_mean: Tensor::zeros(&[channels], false),
            running_var: Tensor::full(&[channels], E::one(), false),
            momentum: 0.1,
            eps: 1e-5,
            initialized: Cell::new(false),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor<E>, training: bool) -> Result<Tensor<E>> {
        if training {
            self.initialized.set(true);
        } else if !self.initialized.get() {
            return Err(Error::State(
                "batch norm evaluated before its running statistics were ever updated".into(),
            ));
        }
        ops::batch_norm(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            training,
        )
    }

    /// Declares the running buffers valid, e.g. after loading a checkpoint.
    pub fn mark_initialized(&self) {
        self.initialized.set(true);
    }

    pub fn parameters(&self) -> Vec<Tensor<E>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
            (format!("{prefix}.running_mean"), self.running_mean.clone()),
            (format!("{prefix}.running_var"), self.running_var.clone()),
        ]
    }
}

/// Finite-difference checks for the composite layers, appended to the
/// primitive battery by [`crate::gradcheck::run_all`]. fc2 starts at zero by
/// design, which would leave fc1 with vanishing gradients, so the checks
/// perturb it to a generic point first.
pub fn layer_gradchecks(seed: u64) -> Result<Vec<CheckReport>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::gradcheck::{check_params, projected_loss, uniform};

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517e);
    let mut reports = Vec::new();

    {
        let branch = AttentionBranch::<f64>::new(&mut rng, 6, 4, 2.0)?;
        randomize_fc2(&branch, &mut rng);
        let x = uniform(&mut rng, &[2, 6, 3, 3], -1.0, 1.0, true);
        let mut owned = branch.parameters();
        owned.push(x.clone());
        let refs: Vec<&Tensor<f64>> = owned.iter().collect();
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x21);
        reports.push(check_params("attention_branch", &refs, |tape| {
            let pi = branch.forward(tape, &x)?;
            projected_loss(tape, &pi, &mut prng.clone())
        })?);
    }
    {
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 4, 5, 3, 1, 1, 1, 3, 4.0, Activation::Relu6)?;
        randomize_fc2(layer.attention(), &mut rng);
        let x = uniform(&mut rng, &[2, 4, 5, 5], -1.0, 1.0, true);
        let mut owned = layer.parameters();
        owned.push(x.clone());
        let refs: Vec<&Tensor<f64>> = owned.iter().collect();
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x22);
        reports.push(check_params("dynamic_conv_layer", &refs, |tape| {
            let y = layer.forward(tape, &x, &AggregationMode::Attention, Phase::Train)?;
            projected_loss(tape, &y, &mut prng.clone())
        })?);
    }
    {
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 3, 3, 2, 1, 3, 2, 2.5, Activation::Relu)?;
        randomize_fc2(layer.attention(), &mut rng);
        let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0, true);
        let mut owned = layer.parameters();
        owned.push(x.clone());
        let refs: Vec<&Tensor<f64>> = owned.iter().collect();
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 0x23);
        reports.push(check_params("dynamic_conv_depthwise", &refs, |tape| {
            let y = layer.forward(tape, &x, &AggregationMode::Attention, Phase::Train)?;
            projected_loss(tape, &y, &mut prng.clone())
        })?);
    }
    Ok(reports)
}

fn randomize_fc2(branch: &AttentionBranch<f64>, rng: &mut impl Rng) {
    for t in &branch.parameters()[2..4] {
        let vals: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-0.6..0.6)).collect();
        t.set_data(vals).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_kinds_apply() {
        let tape = Tape::no_grad();
        let x = Tensor::<f64>::from_f64s(&[3], &[-1.0, 3.0, 9.0], false).unwrap();
        assert_eq!(Activation::Relu.apply(&tape, &x).to_vec(), vec![0.0, 3.0, 9.0]);
        assert_eq!(Activation::Relu6.apply(&tape, &x).to_vec(), vec![0.0, 3.0, 6.0]);
        assert_eq!(Activation::None.apply(&tape, &x).to_vec(), vec![-1.0, 3.0, 9.0]);
    }

    #[test]
    fn batch_norm_refuses_eval_before_train() {
        let tape = Tape::no_grad();
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor::zeros(&[1, 2, 2, 2], false);
        assert!(matches!(
            bn.forward(&tape, &x, false),
            Err(Error::State(_))
        ));
        bn.forward(&tape, &x, true).unwrap();
        assert!(bn.forward(&tape, &x, false).is_ok());
    }

    #[test]
    fn mark_initialized_unlocks_eval() {
        let tape = Tape::no_grad();
        let bn = BatchNorm::<f64>::new(1);
        bn.mark_initialized();
        let x = Tensor::zeros(&[1, 1, 1, 1], false);
        assert!(bn.forward(&tape, &x, false).is_ok());
    }

    #[test]
    fn kaiming_bound_scales_with_fan_in() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = kaiming_uniform::<f64>(&mut rng, &[64, 100], 100);
        let bound = 0.1;
        assert!(t.to_vec().iter().all(|v| v.abs() < bound));
        // values should actually use the range, not cluster at zero
        assert!(t.to_vec().iter().any(|v| v.abs() > bound * 0.8));
    }
}
