use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::count::{self, CostKind};
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, Activation, AttentionBranch, BatchNorm, Phase};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// How the K kernels are combined at evaluation time. `Attention` is the
/// trained behavior; the rest exist to probe whether a model actually uses
/// its input-dependence, by breaking it in controlled ways.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AggregationMode {
    /// Input-conditioned convex combination (the real layer).
    Attention,
    /// Ignore the input: plain mean of the K kernels.
    Average,
    /// Keep only the strongest kernel per sample (hard argmax).
    MaxAttention,
    /// Permute each sample's attention across kernels with a seeded
    /// derangement, so kernel k receives the weight meant for another kernel.
    ShufflePerSample { seed: u64 },
    /// Give each sample another sample's attention vector (seeded, no fixed
    /// points).
    ShuffleAcrossSamples { seed: u64 },
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationMode::Attention => write!(f, "attention"),
            AggregationMode::Average => write!(f, "average"),
            AggregationMode::MaxAttention => write!(f, "max"),
            AggregationMode::ShufflePerSample { .. } => write!(f, "shuffle-per-sample"),
            AggregationMode::ShuffleAcrossSamples { .. } => write!(f, "shuffle-across-samples"),
        }
    }
}

/// Permutation of 0..n with no fixed point, by seeded rejection sampling.
pub(crate) fn derangement(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!(
            "a derangement needs at least 2 elements, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        idx.shuffle(rng);
        if idx.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(idx);
        }
    }
}

/// Blends K kernels and biases into one per-sample kernel:
/// W(x_n) = sum_k pi[n,k] * kernels[k], b(x_n) = sum_k pi[n,k] * biases[k].
///
/// pi: [N, K] rows on the simplex (sum checked to 1e-5: a violation means the
/// attention upstream is broken, not a user mistake). kernels:
/// [K, C_out, C_in/g, Kh, Kw], biases: [K, C_out]. Returns
/// ([N, C_out, C_in/g, Kh, Kw], [N, C_out]).
pub fn aggregate_kernels<E: Element>(
    tape: &Tape,
    pi: &Tensor<E>,
    kernels: &Tensor<E>,
    biases: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let psh = pi.shape().to_vec();
    let ksh = kernels.shape().to_vec();
    let bsh = biases.shape().to_vec();
    if psh.len() != 2 || ksh.len() != 5 {
        return Err(Error::Shape(format!(
            "aggregate_kernels wants pi [N,K] and kernels [K,Cout,Cin/g,Kh,Kw], got {psh:?} and {ksh:?}"
        )));
    }
    let (n, k) = (psh[0], psh[1]);
    let c_out = ksh[1];
    if ksh[0] != k || bsh != [k, c_out] {
        return Err(Error::Shape(format!(
            "kernel set {ksh:?} / biases {bsh:?} inconsistent with pi {psh:?}"
        )));
    }
    {
        let pd = pi.data();
        for ni in 0..n {
            let row_sum: f64 = pd[ni * k..(ni + 1) * k].iter().map(|v| v.into_f64()).sum();
            if (row_sum - 1.0).abs() > 1e-5 {
                return Err(Error::Invariant(format!(
                    "attention row {ni} sums to {row_sum}, not 1: upstream softmax is broken"
                )));
            }
        }
    }
    let ke: usize = ksh[1..].iter().product();
    let mut w_out = vec![E::zero(); n * ke];
    let mut b_out = vec![E::zero(); n * c_out];
    {
        let pd = pi.data();
        let kd = kernels.data();
        let bd = biases.data();
        for ni in 0..n {
            for ki in 0..k {
                let p = pd[ni * k + ki];
                let src = &kd[ki * ke..(ki + 1) * ke];
                let dst = &mut w_out[ni * ke..(ni + 1) * ke];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + p * *s;
                }
                for ci in 0..c_out {
                    b_out[ni * c_out + ci] = b_out[ni * c_out + ci] + p * bd[ki * c_out + ci];
                }
            }
        }
    }
    count::record(CostKind::Aggregation, (n * k * (ke + c_out)) as u64);

    let mut wshape = vec![n];
    wshape.extend_from_slice(&ksh[1..]);
    let rg = tape.recording()
        && (pi.requires_grad() || kernels.requires_grad() || biases.requires_grad());
    let w_t = Tensor::raw(wshape, w_out, rg);
    let b_t = Tensor::raw(vec![n, c_out], b_out, rg);
    if rg {
        let (pi2, kernels2, biases2) = (pi.clone(), kernels.clone(), biases.clone());
        let (w2, b2) = (w_t.clone(), b_t.clone());
        tape.record(move || {
            let gw = w2.grad();
            let gb = b2.grad();
            if gw.is_none() && gb.is_none() {
                return;
            }
            let pd = pi2.data();
            if pi2.requires_grad() {
                let kd = kernels2.data();
                let bd = biases2.data();
                let mut dpi = vec![E::zero(); n * k];
                for ni in 0..n {
                    for ki in 0..k {
                        let mut acc = E::zero();
                        if let Some(gw) = &gw {
                            let g = &gw[ni * ke..(ni + 1) * ke];
                            let s = &kd[ki * ke..(ki + 1) * ke];
                            for (gv, sv) in g.iter().zip(s) {
                                acc = acc + *gv * *sv;
                            }
                        }
                        if let Some(gb) = &gb {
                            for ci in 0..c_out {
                                acc = acc + gb[ni * c_out + ci] * bd[ki * c_out + ci];
                            }
                        }
                        dpi[ni * k + ki] = acc;
                    }
                }
                drop(kd);
                drop(bd);
                pi2.accum_grad(&dpi);
            }
            if kernels2.requires_grad() {
                if let Some(gw) = &gw {
                    let mut dk = vec![E::zero(); k * ke];
                    for ni in 0..n {
                        for ki in 0..k {
                            let p = pd[ni * k + ki];
                            let g = &gw[ni * ke..(ni + 1) * ke];
                            let d = &mut dk[ki * ke..(ki + 1) * ke];
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv = *dv + p * *gv;
                            }
                        }
                    }
                    kernels2.accum_grad(&dk);
                }
            }
            if biases2.requires_grad() {
                if let Some(gb) = &gb {
                    let mut db = vec![E::zero(); k * c_out];
                    for ni in 0..n {
                        for ki in 0..k {
                            let p = pd[ni * k + ki];
                            for ci in 0..c_out {
                                db[ki * c_out + ci] =
                                    db[ki * c_out + ci] + p * gb[ni * c_out + ci];
                            }
                        }
                    }
                    biases2.accum_grad(&db);
                }
            }
        });
    }
    Ok((w_t, b_t))
}

/// A convolution whose kernel is assembled per sample as an attention-
/// weighted convex combination of K learned kernels, followed by batch norm
/// and an activation. Output shape matches the static convolution with the
/// same geometry; only the kernel changes with the input.
pub struct DynamicConvLayer<E: Element> {
    kernels: Tensor<E>,
    biases: Tensor<E>,
    attention: AttentionBranch<E>,
    bn: BatchNorm<E>,
    act: Activation,
    k: usize,
    c_in: usize,
    c_out: usize,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl<E: Element> DynamicConvLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        k: usize,
        tau: f64,
        act: Activation,
    ) -> Result<Self> {
        let attention = AttentionBranch::new(rng, c_in, k, tau)?;
        Self::assemble(rng, attention, c_in, c_out, kernel_size, stride, padding, groups, k, act)
    }

    /// Same layer with an explicit attention bottleneck width (the default is
    /// c_in/4 floored at 1, too tight for very small inputs).
    #[allow(clippy::too_many_arguments)]
    pub fn with_reduction(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        k: usize,
        reduction: usize,
        tau: f64,
        act: Activation,
    ) -> Result<Self> {
        let attention = AttentionBranch::with_reduction(rng, c_in, k, reduction, tau)?;
        Self::assemble(rng, attention, c_in, c_out, kernel_size, stride, padding, groups, k, act)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        rng: &mut impl Rng,
        attention: AttentionBranch<E>,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        k: usize,
        act: Activation,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("kernel count K must be at least 1".into()));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide c_in {c_in} and c_out {c_out}"
            )));
        }
        if kernel_size == 0 || stride == 0 {
            return Err(Error::Config(
                "kernel size and stride must be positive".into(),
            ));
        }
        let cg = c_in / groups;
        let fan_in = cg * kernel_size * kernel_size;
        // each of the K kernels drawn independently at static-conv scale
        let kernels = kaiming_uniform(
            rng,
            &[k, c_out, cg, kernel_size, kernel_size],
            fan_in,
        );
        let biases = kaiming_uniform(rng, &[k, c_out], fan_in);
        Ok(DynamicConvLayer {
            kernels,
            biases,
            attention,
            bn: BatchNorm::new(c_out),
            act,
            k,
            c_in,
            c_out,
            kernel_size,
            stride,
            padding,
            groups,
        })
    }

    pub fn kernel_count(&self) -> usize {
        self.k
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn attention(&self) -> &AttentionBranch<E> {
        &self.attention
    }

    pub fn bn(&self) -> &BatchNorm<E> {
        &self.bn
    }

    pub fn kernels(&self) -> &Tensor<E> {
        &self.kernels
    }

    pub fn biases(&self) -> &Tensor<E> {
        &self.biases
    }

    pub fn set_tau(&self, tau: f64) -> Result<()> {
        self.attention.set_tau(tau)
    }

    /// Attention weights [N, K] for the given aggregation mode. All modes
    /// except `Attention` produce constants (no gradient into the branch).
    pub fn attention_for_mode(
        &self,
        tape: &Tape,
        x: &Tensor<E>,
        mode: &AggregationMode,
    ) -> Result<Tensor<E>> {
        let n = x.shape()[0];
        match mode {
            AggregationMode::Attention => self.attention.forward(tape, x),
            AggregationMode::Average => Ok(Tensor::full(
                &[n, self.k],
                E::from_f64(1.0 / self.k as f64),
                false,
            )),
            AggregationMode::MaxAttention => {
                let probs = self.attention.forward(&Tape::no_grad(), x)?;
                let pd = probs.data();
                let mut hard = vec![E::zero(); n * self.k];
                for ni in 0..n {
                    let row = &pd[ni * self.k..(ni + 1) * self.k];
                    let mut best = 0;
                    for (i, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = i;
                        }
                    }
                    hard[ni * self.k + best] = E::one();
                }
                drop(pd);
                Tensor::new(&[n, self.k], hard, false)
            }
            AggregationMode::ShufflePerSample { seed } => {
                let probs = self.attention.forward(&Tape::no_grad(), x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let pd = probs.data();
                let mut out = vec![E::zero(); n * self.k];
                for ni in 0..n {
                    let perm = derangement(&mut rng, self.k)?;
                    for (ki, &src) in perm.iter().enumerate() {
                        out[ni * self.k + ki] = pd[ni * self.k + src];
                    }
                }
                drop(pd);
                Tensor::new(&[n, self.k], out, false)
            }
            AggregationMode::ShuffleAcrossSamples { seed } => {
                if n < 2 {
                    return Err(Error::Config(
                        "shuffling attention across samples needs a batch of at least 2".into(),
                    ));
                }
                let probs = self.attention.forward(&Tape::no_grad(), x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let perm = derangement(&mut rng, n)?;
                let pd = probs.data();
                let mut out = vec![E::zero(); n * self.k];
                for (ni, &src) in perm.iter().enumerate() {
                    out[ni * self.k..(ni + 1) * self.k]
                        .copy_from_slice(&pd[src * self.k..(src + 1) * self.k]);
                }
                drop(pd);
                Tensor::new(&[n, self.k], out, false)
            }
        }
    }

    /// Full layer: attention, aggregation, per-sample convolution, batch
    /// norm, activation. Degraded aggregation modes are evaluation probes;
    /// training accepts only `Attention`.
    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor<E>,
        mode: &AggregationMode,
        phase: Phase,
    ) -> Result<Tensor<E>> {
        if phase.is_train() && *mode != AggregationMode::Attention {
            return Err(Error::Config(format!(
                "training requires attention aggregation, got {mode}"
            )));
        }
        let pi = self.attention_for_mode(tape, x, mode)?;
        let (w, b) = aggregate_kernels(tape, &pi, &self.kernels, &self.biases)?;
        let y = ops::conv2d_per_sample(tape, x, &w, Some(&b), self.stride, self.padding, self.groups)?;
        let y = self.bn.forward(tape, &y, phase.is_train())?;
        Ok(self.act.apply(tape, &y))
    }

    /// Trainable tensors: kernels, biases, attention FCs, BN scale/shift.
    pub fn parameters(&self) -> Vec<Tensor<E>> {
        let mut p = vec![self.kernels.clone(), self.biases.clone()];
        p.extend(self.attention.parameters());
        p.extend(self.bn.parameters());
        p
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut t = vec![
            (format!("{prefix}.kernels"), self.kernels.clone()),
            (format!("{prefix}.biases"), self.biases.clone()),
        ];
        t.extend(self.attention.named_tensors(&format!("{prefix}.att")));
        t.extend(self.bn.named_tensors(&format!("{prefix}.bn")));
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::count::with_tally;

    fn seeded(shape: &[usize], seed: u64, rg: bool) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data, rg).unwrap()
    }

    fn randomize_fc2(branch: &AttentionBranch<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &branch.parameters()[2..4] {
            let vals: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            t.set_data(vals).unwrap();
        }
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..8 {
            let d = derangement(&mut rng, n).unwrap();
            let mut sorted = d.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(d.iter().enumerate().all(|(i, &j)| i != j));
        }
        assert!(derangement(&mut rng, 1).is_err());
    }

    #[test]
    fn simplex_vertex_selects_one_kernel_exactly() {
        let tape = Tape::no_grad();
        let pi = Tensor::<f64>::from_f64s(&[1, 2], &[1.0, 0.0], false).unwrap();
        let kernels = seeded(&[2, 3, 2, 3, 3], 1, false);
        let biases = seeded(&[2, 3], 2, false);
        let (w, b) = aggregate_kernels(&tape, &pi, &kernels, &biases).unwrap();
        let ke = 3 * 2 * 3 * 3;
        assert_eq!(w.to_vec(), kernels.to_vec()[..ke].to_vec());
        assert_eq!(b.to_vec(), biases.to_vec()[..3].to_vec());
    }

    #[test]
    fn simplex_midpoint_of_2t_and_zero_is_t() {
        let tape = Tape::no_grad();
        let pi = Tensor::<f64>::from_f64s(&[1, 2], &[0.5, 0.5], false).unwrap();
        let t = seeded(&[1, 2, 1, 3, 3], 3, false);
        let mut kd = t.to_vec().iter().map(|v| v * 2.0).collect::<Vec<_>>();
        kd.extend(vec![0.0; t.len()]);
        let kernels = Tensor::new(&[2, 2, 1, 3, 3], kd, false).unwrap();
        let biases = Tensor::zeros(&[2, 2], false);
        let (w, _) = aggregate_kernels(&tape, &pi, &kernels, &biases).unwrap();
        for (got, want) in w.to_vec().iter().zip(t.to_vec()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregation_matches_direct_sum_oracle() {
        let tape = Tape::no_grad();
        // rows on the simplex via a quick softmax by hand
        let raw = seeded(&[3, 4], 4, false);
        let mut pd = raw.to_vec();
        for row in pd.chunks_mut(4) {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let pi = Tensor::new(&[3, 4], pd.clone(), false).unwrap();
        let kernels = seeded(&[4, 2, 3, 3, 3], 5, false);
        let biases = seeded(&[4, 2], 6, false);
        let (w, b) = aggregate_kernels(&tape, &pi, &kernels, &biases).unwrap();
        let kd = kernels.to_vec();
        let bd = biases.to_vec();
        let ke = 2 * 3 * 3 * 3;
        let wd = w.to_vec();
        let bo = b.to_vec();
        for ni in 0..3 {
            for e in 0..ke {
                let mut want = 0.0;
                for ki in 0..4 {
                    want += pd[ni * 4 + ki] * kd[ki * ke + e];
                }
                assert!((wd[ni * ke + e] - want).abs() < 1e-7);
            }
            for ci in 0..2 {
                let mut want = 0.0;
                for ki in 0..4 {
                    want += pd[ni * 4 + ki] * bd[ki * 2 + ci];
                }
                assert!((bo[ni * 2 + ci] - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn broken_simplex_rows_are_refused() {
        let tape = Tape::no_grad();
        let pi = Tensor::<f64>::from_f64s(&[1, 2], &[0.7, 0.7], false).unwrap();
        let kernels = seeded(&[2, 1, 1, 1, 1], 7, false);
        let biases = Tensor::zeros(&[2, 1], false);
        assert!(matches!(
            aggregate_kernels(&tape, &pi, &kernels, &biases),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn aggregation_cost_is_k_times_kernel_volume_plus_biases() {
        let tape = Tape::no_grad();
        let pi = Tensor::<f64>::from_f64s(&[2, 2], &[0.5, 0.5, 0.25, 0.75], false).unwrap();
        let kernels = seeded(&[2, 4, 3, 3, 3], 8, false);
        let biases = Tensor::zeros(&[2, 4], false);
        let (res, tally) = with_tally(|| aggregate_kernels(&tape, &pi, &kernels, &biases));
        res.unwrap();
        // per sample: K * (Cout * Cin/g * Kh * Kw) + K * Cout
        let per_sample = 2 * (4 * 3 * 3 * 3) + 2 * 4;
        assert_eq!(tally.aggregation, 2 * per_sample as u64);
        assert_eq!(tally.conv, 0);
    }

    #[test]
    fn aggregated_kernel_stays_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 4, 3, 3, 1, 1, 1, 4, 1.0, Activation::None)
                .unwrap();
        randomize_fc2(layer.attention(), 10);
        let tape = Tape::no_grad();
        let x = seeded(&[5, 4, 6, 6], 11, false);
        let pi = layer
            .attention_for_mode(&tape, &x, &AggregationMode::Attention)
            .unwrap();
        let (w, _) = aggregate_kernels(&tape, &pi, layer.kernels(), layer.biases()).unwrap();
        let kd = layer.kernels().to_vec();
        let ke = w.len() / 5;
        let wd = w.to_vec();
        for ni in 0..5 {
            for e in 0..ke {
                let mut lo = f64::MAX;
                let mut hi = f64::MIN;
                for ki in 0..4 {
                    lo = lo.min(kd[ki * ke + e]);
                    hi = hi.max(kd[ki * ke + e]);
                }
                let v = wd[ni * ke + e];
                assert!(
                    v >= lo - 1e-12 && v <= hi + 1e-12,
                    "coordinate {v} escapes hull [{lo}, {hi}]"
                );
            }
        }
    }

    #[test]
    fn k1_layer_equals_static_composition_for_any_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 4, 3, 1, 1, 1, 1, 1.0, Activation::Relu)
                .unwrap();
        randomize_fc2(layer.attention(), 13); // K=1: logits are irrelevant
        let tape = Tape::no_grad();
        let x = seeded(&[2, 3, 5, 5], 14, false);
        let got = layer
            .forward(&tape, &x, &AggregationMode::Attention, Phase::Train)
            .unwrap();

        let w1 = Tensor::new(&[4, 3, 3, 3], layer.kernels().to_vec(), false).unwrap();
        let b1 = Tensor::new(&[4], layer.biases().to_vec(), false).unwrap();
        let y = ops::conv2d(&tape, &x, &w1, Some(&b1), 1, 1, 1).unwrap();
        let rm = Tensor::zeros(&[4], false);
        let rv = Tensor::full(&[4], 1.0, false);
        let y = ops::batch_norm(
            &tape, &y, &layer.bn().gamma, &layer.bn().beta, &rm, &rv, 0.1, 1e-5, true,
        )
        .unwrap();
        let want = ops::relu(&tape, &y);
        for (g, w) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_kernels_collapse_to_static_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 4, 3, 2, 1, 1, 3, 1.0, Activation::Relu6)
                .unwrap();
        randomize_fc2(layer.attention(), 16);
        // overwrite all K kernels with copies of kernel 0
        let ke = 4 * 3 * 3 * 3;
        let kd = layer.kernels().to_vec();
        let mut same = Vec::with_capacity(3 * ke);
        for _ in 0..3 {
            same.extend_from_slice(&kd[..ke]);
        }
        layer.kernels().set_data(same).unwrap();
        let bd = layer.biases().to_vec();
        layer.biases().set_data(vec![bd[0], bd[1], bd[2], bd[3]].repeat(3)).unwrap();

        let tape = Tape::no_grad();
        let x = seeded(&[2, 3, 6, 6], 17, false);
        let got = layer
            .forward(&tape, &x, &AggregationMode::Attention, Phase::Train)
            .unwrap();

        let w1 = Tensor::new(&[4, 3, 3, 3], layer.kernels().to_vec()[..ke].to_vec(), false).unwrap();
        let b1 = Tensor::new(&[4], layer.biases().to_vec()[..4].to_vec(), false).unwrap();
        let y = ops::conv2d(&tape, &x, &w1, Some(&b1), 2, 1, 1).unwrap();
        let rm = Tensor::zeros(&[4], false);
        let rv = Tensor::full(&[4], 1.0, false);
        let y = ops::batch_norm(
            &tape, &y, &layer.bn().gamma, &layer.bn().beta, &rm, &rv, 0.1, 1e-5, true,
        )
        .unwrap();
        let want = ops::relu6(&tape, &y);
        for (g, w) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_forward_equals_concatenated_single_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 5, 3, 1, 1, 1, 4, 1.0, Activation::Relu)
                .unwrap();
        randomize_fc2(layer.attention(), 19);
        // eval phase so batch norm is per-sample independent
        layer.bn().mark_initialized();
        let tape = Tape::no_grad();
        let x = seeded(&[4, 3, 5, 5], 20, false);
        let batched = layer
            .forward(&tape, &x, &AggregationMode::Attention, Phase::Eval)
            .unwrap();
        let xd = x.to_vec();
        let per = 3 * 25;
        let out_per = batched.len() / 4;
        let bv = batched.to_vec();
        for ni in 0..4 {
            let xi = Tensor::new(&[1, 3, 5, 5], xd[ni * per..(ni + 1) * per].to_vec(), false)
                .unwrap();
            let yi = layer
                .forward(&tape, &xi, &AggregationMode::Attention, Phase::Eval)
                .unwrap();
            for (a, b) in yi.to_vec().iter().zip(&bv[ni * out_per..(ni + 1) * out_per]) {
                let denom = a.abs().max(b.abs()).max(1e-9);
                assert!((a - b).abs() / denom < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn training_rejects_degraded_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 2, 2, 3, 1, 1, 1, 2, 1.0, Activation::None)
                .unwrap();
        let tape = Tape::new();
        let x = seeded(&[2, 2, 4, 4], 22, false);
        for mode in [
            AggregationMode::Average,
            AggregationMode::MaxAttention,
            AggregationMode::ShufflePerSample { seed: 0 },
            AggregationMode::ShuffleAcrossSamples { seed: 0 },
        ] {
            assert!(matches!(
                layer.forward(&tape, &x, &mode, Phase::Train),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn across_sample_shuffle_needs_a_real_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 2, 2, 3, 1, 1, 1, 2, 1.0, Activation::None)
                .unwrap();
        layer.bn().mark_initialized();
        let tape = Tape::no_grad();
        let x = seeded(&[1, 2, 4, 4], 24, false);
        assert!(matches!(
            layer.forward(&tape, &x, &AggregationMode::ShuffleAcrossSamples { seed: 1 }, Phase::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn average_mode_ignores_the_input_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 3, 3, 1, 1, 1, 3, 1.0, Activation::None)
                .unwrap();
        randomize_fc2(layer.attention(), 26);
        let tape = Tape::no_grad();
        let x = seeded(&[2, 3, 4, 4], 27, false);
        let pi = layer
            .attention_for_mode(&tape, &x, &AggregationMode::Average)
            .unwrap();
        for v in pi.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn max_mode_selects_argmax_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 3, 3, 1, 1, 1, 3, 1.0, Activation::None)
                .unwrap();
        // bias the branch hard toward kernel 2
        layer.attention().parameters()[3]
            .set_data(vec![0.0, 0.0, 50.0])
            .unwrap();
        let tape = Tape::no_grad();
        let x = seeded(&[2, 3, 4, 4], 29, false);
        let pi = layer
            .attention_for_mode(&tape, &x, &AggregationMode::MaxAttention)
            .unwrap();
        assert_eq!(pi.to_vec(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn shuffles_move_attention_where_it_was_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 8, 3, 3, 1, 1, 1, 3, 0.5, Activation::None)
                .unwrap();
        randomize_fc2(layer.attention(), 31);
        // keep the bottleneck units active so attention really varies by input
        layer.attention().parameters()[1]
            .set_data(vec![0.5, 0.5])
            .unwrap();
        let tape = Tape::no_grad();
        let x = seeded(&[3, 8, 4, 4], 32, false);
        let base = layer
            .attention_for_mode(&tape, &x, &AggregationMode::Attention)
            .unwrap()
            .to_vec();
        let per = layer
            .attention_for_mode(&tape, &x, &AggregationMode::ShufflePerSample { seed: 4 })
            .unwrap()
            .to_vec();
        let across = layer
            .attention_for_mode(&tape, &x, &AggregationMode::ShuffleAcrossSamples { seed: 4 })
            .unwrap()
            .to_vec();
        assert_ne!(base, per);
        assert_ne!(base, across);
        // per-sample shuffle keeps each row's multiset of weights
        for ni in 0..3 {
            let mut a: Vec<f64> = base[ni * 3..(ni + 1) * 3].to_vec();
            let mut b: Vec<f64> = per[ni * 3..(ni + 1) * 3].to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        // across-sample shuffle keeps whole rows, just elsewhere
        for ni in 0..3 {
            let row = &across[ni * 3..(ni + 1) * 3];
            assert_ne!(row, &base[ni * 3..(ni + 1) * 3]);
            assert!((0..3).any(|mi| row == &base[mi * 3..(mi + 1) * 3]));
        }
    }

    #[test]
    fn gradients_reach_both_attention_and_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 4, 3, 1, 1, 1, 3, 2.0, Activation::Relu)
                .unwrap();
        randomize_fc2(layer.attention(), 34);
        let tape = Tape::new();
        let x = seeded(&[2, 3, 5, 5], 35, false);
        let y = layer
            .forward(&tape, &x, &AggregationMode::Attention, Phase::Train)
            .unwrap();
        let loss = ops::sum_all(&tape, &y);
        tape.backward(&loss).unwrap();
        for (i, p) in layer.parameters().iter().enumerate() {
            let g = p.grad().unwrap_or_default();
            assert!(
                g.iter().any(|v| v.abs() > 1e-12),
                "parameter {i} has all-zero gradient"
            );
        }
    }

    #[test]
    fn dynamic_layer_keeps_static_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let layer =
            DynamicConvLayer::<f64>::new(&mut rng, 3, 8, 3, 2, 1, 1, 4, 1.0, Activation::Relu)
                .unwrap();
        let tape = Tape::no_grad();
        let x = seeded(&[2, 3, 8, 8], 37, false);
        let y = layer
            .forward(&tape, &x, &AggregationMode::Attention, Phase::Train)
            .unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
    }
}
