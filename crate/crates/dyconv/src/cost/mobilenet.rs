//! MobileNetV2 generator for the cost model. Standard inverted-residual
//! stack with channel rounding to multiples of 8. The stem convolution, the
//! final 1x1 head convolution and the classifier stay static; every
//! convolution inside the inverted-residual blocks is dynamic-eligible.

use crate::cost::{LayerKind, LayerSpec, NetworkSpec, SPEC_VERSION};
use crate::error::{Error, Result};

/// Round `v` to a multiple of `divisor`, at least `divisor`, never dropping
/// below 90% of the original value.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) as usize / divisor * divisor).max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

// (expansion t, output channels c, repeats n, first stride s)
const SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// Builds the layer stack for a given width multiplier and input resolution
/// (ImageNet classifier with 1000 classes). Multipliers outside
/// {0.35, 0.5, 0.75, 1.0} are allowed but have no reference totals.
pub fn mobilenet_v2_spec(width_multiplier: f64, resolution: usize) -> Result<NetworkSpec> {
    if !(width_multiplier > 0.0) || !width_multiplier.is_finite() {
        return Err(Error::Config(format!(
            "width multiplier must be positive, got {width_multiplier}"
        )));
    }
    if resolution < 32 {
        return Err(Error::Config(format!(
            "input resolution {resolution} is too small for 5 stride-2 stages"
        )));
    }
    let mut layers = Vec::new();
    let mut h = resolution;
    let mut c_in = 3usize;
    let conv = |name: String,
                c_in: usize,
                c_out: usize,
                d_k: usize,
                stride: usize,
                padding: usize,
                groups: usize,
                h: usize,
                dynamic: bool| LayerSpec {
        name,
        kind: if groups > 1 {
            LayerKind::DepthwiseConv
        } else {
            LayerKind::Conv
        },
        c_in,
        c_out,
        d_k,
        stride,
        padding,
        groups,
        h_in: h,
        w_in: h,
        dynamic,
        k: None,
        reduction: None,
    };

    let stem = make_divisible(32.0 * width_multiplier, 8);
    layers.push(conv("stem".into(), c_in, stem, 3, 2, 1, 1, h, false));
    h = (h + 2 - 3) / 2 + 1;
    c_in = stem;

    for (si, &(t, c, n, s)) in SETTINGS.iter().enumerate() {
        let c_out = make_divisible(c as f64 * width_multiplier, 8);
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let hidden = c_in * t;
            let tag = format!("b{si}.{i}");
            if t != 1 {
                layers.push(conv(
                    format!("{tag}.expand"),
                    c_in,
                    hidden,
                    1,
                    1,
                    0,
                    1,
                    h,
                    true,
                ));
            }
            layers.push(conv(
                format!("{tag}.dw"),
                hidden,
                hidden,
                3,
                stride,
                1,
                hidden,
                h,
                true,
            ));
            let oh = (h + 2 - 3) / stride + 1;
            layers.push(conv(
                format!("{tag}.project"),
                hidden,
                c_out,
                1,
                1,
                0,
                1,
                oh,
                true,
            ));
            h = oh;
            c_in = c_out;
        }
    }

    let last = if width_multiplier > 1.0 {
        make_divisible(1280.0 * width_multiplier, 8)
    } else {
        1280
    };
    layers.push(conv("head".into(), c_in, last, 1, 1, 0, 1, h, false));
    layers.push(LayerSpec {
        name: "pool".into(),
        kind: LayerKind::Pool,
        c_in: last,
        c_out: last,
        d_k: 0,
        stride: 0,
        padding: 0,
        groups: 1,
        h_in: h,
        w_in: h,
        dynamic: false,
        k: None,
        reduction: None,
    });
    layers.push(LayerSpec {
        name: "classifier".into(),
        kind: LayerKind::FullyConnected,
        c_in: last,
        c_out: 1000,
        d_k: 0,
        stride: 0,
        padding: 0,
        groups: 1,
        h_in: 1,
        w_in: 1,
        dynamic: false,
        k: None,
        reduction: None,
    });

    let net = NetworkSpec {
        spec_version: SPEC_VERSION,
        name: format!("mobilenet_v2_x{width_multiplier}"),
        input_resolution: resolution,
        width_multiplier,
        layers,
    };
    net.validate()?;
    Ok(net)
}
