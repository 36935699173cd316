//! The four XOR points as a dataset: inputs [2, 1, 1], two classes.

use crate::tensor::Element;

use super::Dataset;

pub fn xor_dataset<E: Element>() -> Dataset<E> {
    let data = [0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        .iter()
        .map(|&v| E::from_f64(v))
        .collect();
    Dataset::new("xor", [2, 1, 1], data, vec![0, 1, 1, 0], 2).unwrap()
}
