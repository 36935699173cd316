use std::cell::Cell;

use rand::Rng;

use crate::count::{self, CostKind};
use crate::error::{Error, Result};
use crate::nn::kaiming_uniform;
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Bottleneck width of the attention branch: squeeze by 4, floor at 1.
pub fn reduction_dim(c_in: usize) -> usize {
    (c_in / 4).max(1)
}

/// Computes per-sample kernel attention from the input feature map:
/// global average pool, squeeze FC, ReLU, expand FC, temperature softmax.
/// The output rows live on the K-simplex, so downstream aggregation is a
/// convex combination.
///
/// fc2 starts at exactly zero (weights and bias), which makes the branch emit
/// uniform attention at step 0 regardless of input. Training then moves it
/// off that point gradually, helped by the temperature schedule.
pub struct AttentionBranch<E: Element> {
    fc1_weight: Tensor<E>,
    fc1_bias: Tensor<E>,
    fc2_weight: Tensor<E>,
    fc2_bias: Tensor<E>,
    tau: Cell<f64>,
    c_in: usize,
    k: usize,
    r: usize,
}

impl<E: Element> AttentionBranch<E> {
    pub fn new(rng: &mut impl Rng, c_in: usize, k: usize, tau: f64) -> Result<Self> {
        Self::with_reduction(rng, c_in, k, reduction_dim(c_in), tau)
    }

    pub fn with_reduction(
        rng: &mut impl Rng,
        c_in: usize,
        k: usize,
        r: usize,
        tau: f64,
    ) -> Result<Self> {
        if c_in == 0 || k == 0 || r == 0 {
            return Err(Error::Config(format!(
                "attention branch needs positive dims, got c_in={c_in} k={k} r={r}"
            )));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        // fc1 bias starts at one, not zero. The squeeze input is a post-ReLU
        // GAP vector, entrywise positive and nearly rank-one on small nets,
        // so a zero-bias unit that draws negative weights is born dead for
        // every sample at once; with fc2 starting at zero a fully dead
        // bottleneck gets no gradient and can never recover.
        Ok(AttentionBranch {
            fc1_weight: kaiming_uniform(rng, &[r, c_in], c_in),
            fc1_bias: Tensor::full(&[r], E::one(), true),
            fc2_weight: Tensor::zeros(&[k, r], true),
            fc2_bias: Tensor::zeros(&[k], true),
            tau: Cell::new(tau),
            c_in,
            k,
            r,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kernel_count(&self) -> usize {
        self.k
    }

    pub fn reduction(&self) -> usize {
        self.r
    }

    pub fn tau(&self) -> f64 {
        self.tau.get()
    }

    pub fn set_tau(&self, tau: f64) -> Result<()> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        self.tau.set(tau);
        Ok(())
    }

    /// x: NCHW with C = c_in. Returns attention weights [N, K].
    pub fn forward(&self, tape: &Tape, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != self.c_in {
            return Err(Error::Shape(format!(
                "attention branch wants NCHW with {} channels, got {sh:?}",
                self.c_in
            )));
        }
        let logits = count::scoped(CostKind::Attention, || -> Result<Tensor<E>> {
            let pooled = ops::global_avg_pool(tape, x)?;
            let h = ops::fully_connected(tape, &pooled, &self.fc1_weight, Some(&self.fc1_bias))?;
            let h = ops::relu(tape, &h);
            ops::fully_connected(tape, &h, &self.fc2_weight, Some(&self.fc2_bias))
        })?;
        ops::softmax_with_temperature(tape, &logits, self.tau.get())
    }

    /// Trainable tensors in a fixed order: fc1_weight, fc1_bias, fc2_weight,
    /// fc2_bias.
    pub fn parameters(&self) -> Vec<Tensor<E>> {
        vec![
            self.fc1_weight.clone(),
            self.fc1_bias.clone(),
            self.fc2_weight.clone(),
            self.fc2_bias.clone(),
        ]
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.fc1_weight"), self.fc1_weight.clone()),
            (format!("{prefix}.fc1_bias"), self.fc1_bias.clone()),
            (format!("{prefix}.fc2_weight"), self.fc2_weight.clone()),
            (format!("{prefix}.fc2_bias"), self.fc2_bias.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::count::with_tally;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape, data, false).unwrap()
    }

    #[test]
    fn reduction_floors_at_one() {
        assert_eq!(reduction_dim(1), 1);
        assert_eq!(reduction_dim(3), 1);
        assert_eq!(reduction_dim(4), 1);
        assert_eq!(reduction_dim(8), 2);
        assert_eq!(reduction_dim(100), 25);
    }

    #[test]
    fn fresh_branch_emits_exactly_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let branch = AttentionBranch::<f64>::new(&mut rng, 8, 4, 30.0).unwrap();
        let tape = Tape::no_grad();
        let x = seeded_input(&[3, 8, 5, 5], 2);
        let pi = branch.forward(&tape, &x).unwrap();
        for v in pi.to_vec() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn huge_temperature_flattens_any_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let branch = AttentionBranch::<f64>::new(&mut rng, 8, 4, 1e6).unwrap();
        for t in &branch.parameters()[2..4] {
            let vals: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            t.set_data(vals).unwrap();
        }
        let tape = Tape::no_grad();
        let x = seeded_input(&[2, 8, 4, 4], 4);
        let pi = branch.forward(&tape, &x).unwrap();
        for v in pi.to_vec() {
            assert!((v - 0.25).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn forward_equals_primitive_composition_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let branch = AttentionBranch::<f64>::new(&mut rng, 6, 3, 30.0).unwrap();
        for t in &branch.parameters()[2..4] {
            let vals: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            t.set_data(vals).unwrap();
        }
        let tape = Tape::no_grad();
        let x = seeded_input(&[2, 6, 3, 3], 6);
        let pi = branch.forward(&tape, &x).unwrap();

        let p = branch.parameters();
        let pooled = ops::global_avg_pool(&tape, &x).unwrap();
        let h = ops::fully_connected(&tape, &pooled, &p[0], Some(&p[1])).unwrap();
        let h = ops::relu(&tape, &h);
        let z = ops::fully_connected(&tape, &h, &p[2], Some(&p[3])).unwrap();
        let want = ops::softmax_with_temperature(&tape, &z, 30.0).unwrap();
        assert_eq!(pi.to_vec(), want.to_vec());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let branch = AttentionBranch::<f64>::new(&mut rng, 6, 3, 1.0).unwrap();
        let tape = Tape::no_grad();
        let x = Tensor::zeros(&[1, 5, 3, 3], false);
        assert!(matches!(
            branch.forward(&tape, &x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn branch_cost_lands_in_attention_bucket() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, k, h, w, n) = (16, 4, 7, 5, 3);
        let r = reduction_dim(c);
        let branch = AttentionBranch::<f64>::new(&mut rng, c, k, 2.0).unwrap();
        let tape = Tape::no_grad();
        let x = seeded_input(&[n, c, h, w], 9);
        let (res, tally) = with_tally(|| branch.forward(&tape, &x));
        res.unwrap();
        let per_sample = (h * w * c + c * r + r * k) as u64;
        assert_eq!(tally.attention, n as u64 * per_sample);
        assert_eq!(tally.conv, 0);
        assert_eq!(tally.aggregation, 0);
    }

    #[test]
    fn invalid_temperatures_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(AttentionBranch::<f64>::new(&mut rng, 4, 2, 0.0).is_err());
        let b = AttentionBranch::<f64>::new(&mut rng, 4, 2, 1.0).unwrap();
        assert!(b.set_tau(-3.0).is_err());
        assert!(b.set_tau(f64::NAN).is_err());
        b.set_tau(5.0).unwrap();
        assert_eq!(b.tau(), 5.0);
    }
}
