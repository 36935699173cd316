use crate::count::{self, CostKind};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

fn out_extent(input: usize, padding: usize, kernel: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::Shape(format!(
            "kernel extent {kernel} does not fit padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    c_in_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvGeom {
    fn co_per_g(&self) -> usize {
        self.c_out / self.groups
    }
}

fn validate(
    input_shape: &[usize],
    weight_tail: &[usize], // [c_out, c_in_g, kh, kw]
    bias_len: Option<usize>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    if input_shape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv input must be NCHW, got {input_shape:?}"
        )));
    }
    let (n, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (c_out, c_in_g, kh, kw) = (weight_tail[0], weight_tail[1], weight_tail[2], weight_tail[3]);
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Config(format!(
            "groups={groups} must divide c_in={c_in} and c_out={c_out}"
        )));
    }
    if c_in / groups != c_in_g {
        return Err(Error::Shape(format!(
            "weight expects {c_in_g} input channels per group, input provides {}",
            c_in / groups
        )));
    }
    if let Some(bl) = bias_len {
        if bl != c_out {
            return Err(Error::Shape(format!(
                "bias length {bl} != output channels {c_out}"
            )));
        }
    }
    let oh = out_extent(h, padding, kh, stride)?;
    let ow = out_extent(w, padding, kw, stride)?;
    Ok(ConvGeom { n, c_in, h, w, c_out, c_in_g, kh, kw, oh, ow, stride, padding, groups })
}

/// Direct-summation forward for one sample. Iterates every kernel tap,
/// reading zero outside the input so padded positions still execute (and
/// count) their multiply-accumulate.
#[allow(clippy::too_many_arguments)]
fn forward_one<E: Element>(
    g: &ConvGeom,
    x: &[E],     // [c_in, h, w] slice for this sample
    wt: &[E],    // [c_out, c_in_g, kh, kw]
    bias: Option<&[E]>,
    out: &mut [E], // [c_out, oh, ow] slice for this sample
    macs: &mut u64,
) {
    let co_per_g = g.co_per_g();
    for oc in 0..g.c_out {
        let grp = oc / co_per_g;
        let b = bias.map_or(E::zero(), |b| b[oc]);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = E::zero();
                for icg in 0..g.c_in_g {
                    let ic = grp * g.c_in_g + icg;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            let v = if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                x[(ic * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                E::zero()
                            };
                            acc = acc + wt[((oc * g.c_in_g + icg) * g.kh + ky) * g.kw + kx] * v;
                            *macs += 1;
                        }
                    }
                }
                out[(oc * g.oh + oy) * g.ow + ox] = acc + b;
            }
        }
    }
}

/// Backward for one sample: scatters the output gradient into input, weight
/// and bias gradients using the same tap enumeration as the forward pass.
#[allow(clippy::too_many_arguments)]
fn backward_one<E: Element>(
    g: &ConvGeom,
    x: &[E],
    wt: &[E],
    go: &[E],                 // [c_out, oh, ow]
    dx: Option<&mut [E]>,     // [c_in, h, w]
    dw: Option<&mut [E]>,     // [c_out, c_in_g, kh, kw]
    db: Option<&mut [E]>,     // [c_out]
) {
    let co_per_g = g.co_per_g();
    let mut dx = dx;
    let mut dw = dw;
    let mut db = db;
    for oc in 0..g.c_out {
        let grp = oc / co_per_g;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gout = go[(oc * g.oh + oy) * g.ow + ox];
                if let Some(db) = db.as_deref_mut() {
                    db[oc] = db[oc] + gout;
                }
                for icg in 0..g.c_in_g {
                    let ic = grp * g.c_in_g + icg;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let xi = (ic * g.h + iy as usize) * g.w + ix as usize;
                            let wi = ((oc * g.c_in_g + icg) * g.kh + ky) * g.kw + kx;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] = dx[xi] + wt[wi] * gout;
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[wi] = dw[wi] + x[xi] * gout;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution, NCHW input against a shared `[c_out, c_in/groups, kh, kw]`
/// kernel. Direct-sum semantics: output H' = (H + 2·padding − kh)/stride + 1
/// (floor), likewise W'. Differentiable w.r.t. input, weight and bias.
pub fn conv2d<E: Element>(
    tape: &Tape,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<E>> {
    if weight.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d weight must be [c_out, c_in/groups, kh, kw], got {:?}",
            weight.shape()
        )));
    }
    let g = validate(
        input.shape(),
        weight.shape(),
        bias.map(|b| b.len()),
        stride,
        padding,
        groups,
    )?;
    let mut out = vec![E::zero(); g.n * g.c_out * g.oh * g.ow];
    let mut macs = 0u64;
    {
        let x = input.data();
        let wt = weight.data();
        let bd = bias.map(|b| b.data());
        let in_stride = g.c_in * g.h * g.w;
        let out_stride = g.c_out * g.oh * g.ow;
        for ni in 0..g.n {
            forward_one(
                &g,
                &x[ni * in_stride..(ni + 1) * in_stride],
                &wt,
                bd.as_deref().map(|v| &v[..]),
                &mut out[ni * out_stride..(ni + 1) * out_stride],
                &mut macs,
            );
        }
    }
    count::record(CostKind::Conv, macs);

    let rg = tape.recording()
        && (input.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad()));
    let output = Tensor::raw(vec![g.n, g.c_out, g.oh, g.ow], out, rg);
    if rg {
        let (input, weight, output2) = (input.clone(), weight.clone(), output.clone());
        let bias = bias.cloned();
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let g = validate(
                input.shape(),
                weight.shape(),
                bias.as_ref().map(|b| b.len()),
                stride,
                padding,
                groups,
            )
            .expect("shapes already validated");
            let x = input.data();
            let wt = weight.data();
            let mut dx = input.requires_grad().then(|| vec![E::zero(); x.len()]);
            let mut dw = weight.requires_grad().then(|| vec![E::zero(); wt.len()]);
            let mut db = bias
                .as_ref()
                .is_some_and(|b| b.requires_grad())
                .then(|| vec![E::zero(); g.c_out]);
            let in_stride = g.c_in * g.h * g.w;
            let out_stride = g.c_out * g.oh * g.ow;
            for ni in 0..g.n {
                backward_one(
                    &g,
                    &x[ni * in_stride..(ni + 1) * in_stride],
                    &wt,
                    &go[ni * out_stride..(ni + 1) * out_stride],
                    dx.as_deref_mut().map(|v| &mut v[ni * in_stride..(ni + 1) * in_stride]),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
            }
            drop(x);
            drop(wt);
            if let Some(dx) = dx {
                input.accum_grad(&dx);
            }
            if let Some(dw) = dw {
                weight.accum_grad(&dw);
            }
            if let (Some(db), Some(b)) = (db, bias.as_ref()) {
                b.accum_grad(&db);
            }
        });
    }
    Ok(output)
}

/// 2D convolution where every sample brings its own kernel and bias:
/// weights `[n, c_out, c_in/groups, kh, kw]`, biases `[n, c_out]`. This is
/// the execution path for dynamically aggregated kernels; gradients flow to
/// the input and to the per-sample weights/biases (and from there back to
/// the attention that produced them).
pub fn conv2d_per_sample<E: Element>(
    tape: &Tape,
    input: &Tensor<E>,
    weights: &Tensor<E>,
    biases: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<E>> {
    if weights.shape().len() != 5 {
        return Err(Error::Shape(format!(
            "per-sample weights must be [n, c_out, c_in/groups, kh, kw], got {:?}",
            weights.shape()
        )));
    }
    if weights.shape()[0] != input.shape()[0] {
        return Err(Error::Shape(format!(
            "weights carry {} samples, input has {}",
            weights.shape()[0],
            input.shape()[0]
        )));
    }
    let g = validate(
        input.shape(),
        &weights.shape()[1..],
        None,
        stride,
        padding,
        groups,
    )?;
    if let Some(b) = biases {
        if b.shape() != [g.n, g.c_out] {
            return Err(Error::Shape(format!(
                "per-sample biases must be [{}, {}], got {:?}",
                g.n,
                g.c_out,
                b.shape()
            )));
        }
    }
    let w_stride = g.c_out * g.c_in_g * g.kh * g.kw;
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * g.oh * g.ow;
    let mut out = vec![E::zero(); g.n * out_stride];
    let mut macs = 0u64;
    {
        let x = input.data();
        let wt = weights.data();
        let bd = biases.map(|b| b.data());
        for ni in 0..g.n {
            forward_one(
                &g,
                &x[ni * in_stride..(ni + 1) * in_stride],
                &wt[ni * w_stride..(ni + 1) * w_stride],
                bd.as_deref().map(|v| &v[ni * g.c_out..(ni + 1) * g.c_out]),
                &mut out[ni * out_stride..(ni + 1) * out_stride],
                &mut macs,
            );
        }
    }
    count::record(CostKind::Conv, macs);

    let rg = tape.recording()
        && (input.requires_grad()
            || weights.requires_grad()
            || biases.is_some_and(|b| b.requires_grad()));
    let output = Tensor::raw(vec![g.n, g.c_out, g.oh, g.ow], out, rg);
    if rg {
        let (input, weights, output2) = (input.clone(), weights.clone(), output.clone());
        let biases = biases.cloned();
        tape.record(move || {
            let Some(go) = output2.grad() else { return };
            let g = validate(input.shape(), &weights.shape()[1..], None, stride, padding, groups)
                .expect("shapes already validated");
            let x = input.data();
            let wt = weights.data();
            let w_stride = g.c_out * g.c_in_g * g.kh * g.kw;
            let in_stride = g.c_in * g.h * g.w;
            let out_stride = g.c_out * g.oh * g.ow;
            let mut dx = input.requires_grad().then(|| vec![E::zero(); x.len()]);
            let mut dw = weights.requires_grad().then(|| vec![E::zero(); wt.len()]);
            let mut db = biases
                .as_ref()
                .is_some_and(|b| b.requires_grad())
                .then(|| vec![E::zero(); g.n * g.c_out]);
            for ni in 0..g.n {
                backward_one(
                    &g,
                    &x[ni * in_stride..(ni + 1) * in_stride],
                    &wt[ni * w_stride..(ni + 1) * w_stride],
                    &go[ni * out_stride..(ni + 1) * out_stride],
                    dx.as_deref_mut().map(|v| &mut v[ni * in_stride..(ni + 1) * in_stride]),
                    dw.as_deref_mut().map(|v| &mut v[ni * w_stride..(ni + 1) * w_stride]),
                    db.as_deref_mut().map(|v| &mut v[ni * g.c_out..(ni + 1) * g.c_out]),
                );
            }
            drop(x);
            drop(wt);
            if let Some(dx) = dx {
                input.accum_grad(&dx);
            }
            if let Some(dw) = dw {
                weights.accum_grad(&dw);
            }
            if let (Some(db), Some(b)) = (db, biases.as_ref()) {
                b.accum_grad(&db);
            }
        });
    }
    Ok(output)
}
