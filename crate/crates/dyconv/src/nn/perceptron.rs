//! Minimal perceptron forms showing why dynamic aggregation adds power:
//! XOR needs two static layers, but a single dynamic perceptron whose
//! attention depends on the input separates it exactly.

use crate::error::{Error, Result};

/// One dynamic perceptron step over plain vectors:
/// y = g((sum_k pi_k W_k) x + sum_k pi_k b_k), weights stored row-major
/// [out][in]. The attention must be a point on the simplex.
pub fn dynamic_perceptron_forward(
    weights: &[Vec<Vec<f64>>],
    biases: &[Vec<f64>],
    pi: &[f64],
    x: &[f64],
    g: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let k = weights.len();
    if k == 0 || biases.len() != k || pi.len() != k {
        return Err(Error::Shape(format!(
            "need matching K: {k} weight sets, {} bias sets, {} attention entries",
            biases.len(),
            pi.len()
        )));
    }
    let out_dim = weights[0].len();
    let in_dim = weights[0].first().map_or(0, Vec::len);
    for (wk, bk) in weights.iter().zip(biases) {
        if wk.len() != out_dim || wk.iter().any(|row| row.len() != in_dim) || bk.len() != out_dim {
            return Err(Error::Shape("ragged weight or bias set".into()));
        }
    }
    if x.len() != in_dim {
        return Err(Error::Shape(format!(
            "input has {} entries, weights expect {in_dim}",
            x.len()
        )));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || pi.iter().any(|&p| p < 0.0) {
        return Err(Error::Invariant(format!(
            "attention {pi:?} is not on the simplex (sum {sum})"
        )));
    }
    let mut y = vec![0.0; out_dim];
    for o in 0..out_dim {
        let mut acc = 0.0;
        for (ki, p) in pi.iter().enumerate() {
            let mut dot = biases[ki][o];
            for (i, xi) in x.iter().enumerate() {
                dot += weights[ki][o][i] * xi;
            }
            acc += p * dot;
        }
        y[o] = g(acc);
    }
    Ok(y)
}

/// Single dynamic perceptron that computes XOR with identity activation.
/// Attention is fixed as pi = [x2, 1 - x2]; the two linear functions are
/// W1 = [[-1, 0], [0, 0]], b1 = [1, 0] and W2 = [[1, 0], [0, 0]], b2 = 0,
/// giving y1 = (1 - 2 x2) x1 + x2. Defined for x2 in [0, 1] (the attention
/// must stay on the simplex); the four Boolean corners map to XOR exactly.
pub fn xor_dynamic(x: [f64; 2]) -> Result<f64> {
    let weights = vec![
        vec![vec![-1.0, 0.0], vec![0.0, 0.0]],
        vec![vec![1.0, 0.0], vec![0.0, 0.0]],
    ];
    let biases = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
    let pi = [x[1], 1.0 - x[1]];
    let y = dynamic_perceptron_forward(&weights, &biases, &pi, &x, |v| v)?;
    Ok(y[0])
}

/// The static two-layer baseline for XOR:
/// y = w^T max(0, W x + b) with w = [1, -2], W = [[1, 1], [1, 1]],
/// b = [0, -1]. Correct on the four Boolean corners, but fixed weights mean
/// it extrapolates linearly elsewhere (e.g. [2, 2] -> -2).
pub fn static_perceptron_xor(x: [f64; 2]) -> f64 {
    let h1 = (x[0] + x[1]).max(0.0);
    let h2 = (x[0] + x[1] - 1.0).max(0.0);
    h1 - 2.0 * h2
}
