use crate::count;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Mean over the spatial positions of every channel: NCHW -> [n, c].
pub fn global_avg_pool<E: Element>(tape: &Tape, input: &Tensor<E>) -> Result<Tensor<E>> {
    let sh = input.shape();
    if sh.len() != 4 {
        return Err(Error::Shape(format!(
            "global_avg_pool wants NCHW input, got {sh:?}"
        )));
    }
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let hw = h * w;
    let inv = E::from_f64(1.0 / hw as f64);
    let mut out = vec![E::zero(); n * c];
    {
        let x = input.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mut acc = E::zero();
                for p in 0..hw {
                    acc = acc + x[base + p];
                }
                out[ni * c + ci] = acc * inv;
            }
        }
    }
    // one accumulate per element; free outside an attention scope
    count::record_pool((n * c * hw) as u64);

    let rg = tape.recording() && input.requires_grad();
    let output = Tensor::raw(vec![n, c], out, rg);
    if rg {
        let (input, output2) = (input.clone(), output.clone());
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let mut dx = vec![E::zero(); n * c * hw];
            for ni in 0..n {
                for ci in 0..c {
                    let g = go[ni * c + ci] * inv;
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        dx[base + p] = g;
                    }
                }
            }
            input.accum_grad(&dx);
        });
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    #[test]
    fn constant_planes_pool_to_their_value() {
        let tape = Tape::new();
        let mut data = vec![4.0; 4];
        data.extend(vec![-1.0; 4]);
        let x = Tensor::<f64>::new(&[1, 2, 2, 2], data, false).unwrap();
        let y = global_avg_pool(&tape, &x).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, -1.0]);
    }

    #[test]
    fn direct_mean() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_f64s(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0], false).unwrap();
        assert_eq!(global_avg_pool(&tape, &x).unwrap().to_vec(), vec![2.5]);
    }

    #[test]
    fn gradient_is_uniform_inverse_area() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_f64s(&[1, 1, 2, 3], &[0.5, 1.0, -2.0, 3.0, 0.0, 9.0], true).unwrap();
        let y = global_avg_pool(&tape, &x).unwrap();
        let loss = sum_all(&tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0 / 6.0; 6]);
    }

    #[test]
    fn rejects_non_4d() {
        let tape = Tape::new();
        let x = Tensor::<f64>::zeros(&[2, 3], false);
        assert!(matches!(global_avg_pool(&tape, &x), Err(Error::Shape(_))));
    }
}
