use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

fn clamped_unit<E: Element>(tape: &Tape, input: &Tensor<E>, upper: Option<E>) -> Tensor<E> {
    let out: Vec<E> = input
        .data()
        .iter()
        .map(|&v| {
            let v = if v > E::zero() { v } else { E::zero() };
            match upper {
                Some(u) if v > u => u,
                _ => v,
            }
        })
        .collect();
    let rg = tape.recording() && input.requires_grad();
    let output = Tensor::raw(input.shape().to_vec(), out, rg);
    if rg {
        let (input, output2) = (input.clone(), output.clone());
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let x = input.data();
            let dx: Vec<E> = go
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| {
                    let open = v > E::zero() && upper.map_or(true, |u| v < u);
                    if open {
                        g
                    } else {
                        E::zero()
                    }
                })
                .collect();
            drop(x);
            input.accum_grad(&dx);
        });
    }
    output
}

/// max(0, x), elementwise.
pub fn relu<E: Element>(tape: &Tape, input: &Tensor<E>) -> Tensor<E> {
    clamped_unit(tape, input, None)
}

/// min(max(0, x), 6), elementwise.
pub fn relu6<E: Element>(tape: &Tape, input: &Tensor<E>) -> Tensor<E> {
    clamped_unit(tape, input, Some(E::from_f64(6.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_f64s(&[3], &[-1.0, 0.0, 2.0], false).unwrap();
        assert_eq!(relu(&tape, &x).to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu6_clips_both_ends() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_f64s(&[4], &[-3.0, 1.0, 6.0, 9.5], false).unwrap();
        assert_eq!(relu6(&tape, &x).to_vec(), vec![0.0, 1.0, 6.0, 6.0]);
    }

    #[test]
    fn gradient_masks_closed_regions() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_f64s(&[4], &[-2.0, 0.5, 3.0, 8.0], true).unwrap();
        let y = relu6(&tape, &x);
        let loss = sum_all(&tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }
}
