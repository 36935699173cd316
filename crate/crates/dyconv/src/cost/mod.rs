//! Analytic Mult-Adds accounting for static and dynamic convolution
//! networks. One MAdd = one multiply-accumulate. Convolutions cost
//! H'·W'·(C_in/g)·C_out·D_k² over OUTPUT spatial dims; a dynamic layer adds
//! an attention branch priced over its INPUT dims (H·W·C_in + C_in·r + r·K)
//! plus kernel aggregation (K·(C_in/g)·C_out·D_k² + K·C_out). BN,
//! activations, residual adds and pooling outside the attention branch are
//! free; the classifier FC is counted. These conventions match the
//! instrumented counter in [`crate::count`] exactly, so analytic reports can
//! be cross-checked against executed arithmetic.

pub mod mobilenet;

pub use mobilenet::{make_divisible, mobilenet_v2_spec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    FullyConnected,
    Pool,
    Bn,
    Act,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::DepthwiseConv)
    }
}

/// Geometry of one layer, enough to price it. `dynamic` marks eligibility:
/// the layer is costed as dynamic only when the network-level query asks for
/// a dynamic network, with `k` kernels.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub d_k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub dynamic: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    /// Attention bottleneck width when the layer deviates from the
    /// max(floor(C_in/4), 1) default (tiny networks floor it higher so the
    /// squeeze keeps more than one unit).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reduction: Option<usize>,
}

impl LayerSpec {
    /// Output spatial extent. Convolutions follow the usual floor formula;
    /// pooling collapses to 1x1; everything else passes resolution through.
    pub fn out_hw(&self) -> Result<(usize, usize)> {
        match self.kind {
            LayerKind::Conv | LayerKind::DepthwiseConv => {
                let ext = |i: usize| -> Result<usize> {
                    let padded = i + 2 * self.padding;
                    if self.d_k == 0 || self.stride == 0 || padded < self.d_k {
                        return Err(Error::Config(format!(
                            "layer {}: kernel {} does not fit input extent {i} with padding {}",
                            self.name, self.d_k, self.padding
                        )));
                    }
                    Ok((padded - self.d_k) / self.stride + 1)
                };
                Ok((ext(self.h_in)?, ext(self.w_in)?))
            }
            LayerKind::Pool => Ok((1, 1)),
            LayerKind::FullyConnected | LayerKind::Bn | LayerKind::Act => {
                Ok((self.h_in, self.w_in))
            }
        }
    }

    fn reduction(&self) -> usize {
        self.reduction.unwrap_or((self.c_in / 4).max(1))
    }
}

/// H'·W'·(C_in/groups)·C_out·D_k² over output dims.
pub fn conv_madds(spec: &LayerSpec) -> Result<u64> {
    if !spec.kind.is_conv() {
        return Err(Error::Config(format!(
            "conv_madds on non-convolution layer {} ({:?})",
            spec.name, spec.kind
        )));
    }
    if spec.groups == 0 || spec.c_in % spec.groups != 0 {
        return Err(Error::Config(format!(
            "layer {}: groups {} do not divide c_in {}",
            spec.name, spec.groups, spec.c_in
        )));
    }
    let (h, w) = spec.out_hw()?;
    Ok((h * w * (spec.c_in / spec.groups) * spec.c_out * spec.d_k * spec.d_k) as u64)
}

/// Attention branch cost over INPUT dims: H·W·C_in pooling + C_in·r squeeze
/// + r·K expand, with r = max(floor(C_in/4), 1). This is the implemented
/// (clamped-r) cost; it equals the idealized C_in²/4 + C_in·K/4 whenever
/// 4 divides C_in.
pub fn attention_madds(spec: &LayerSpec) -> Result<u64> {
    let k = dynamic_k(spec)?;
    let r = spec.reduction();
    Ok((spec.h_in * spec.w_in * spec.c_in + spec.c_in * r + r * k) as u64)
}

/// Kernel blend cost: K·(C_in/groups)·C_out·D_k² + K·C_out.
pub fn aggregation_madds(spec: &LayerSpec) -> Result<u64> {
    let k = dynamic_k(spec)?;
    Ok((k * (spec.c_in / spec.groups) * spec.c_out * spec.d_k * spec.d_k + k * spec.c_out) as u64)
}

fn dynamic_k(spec: &LayerSpec) -> Result<usize> {
    if !spec.dynamic {
        return Err(Error::Config(format!(
            "layer {} is static; it has no attention or aggregation cost",
            spec.name
        )));
    }
    spec.k.ok_or_else(|| {
        Error::Config(format!("dynamic layer {} is missing its kernel count", spec.name))
    })
}

/// Relative overhead of making this layer dynamic with K kernels:
/// (attention + aggregation) / conv. Reported, not enforced; layers where
/// this is not small (1x1 spatial, FC-like) are exactly the ones the
/// approach avoids.
pub fn check_constraint(spec: &LayerSpec, k: usize) -> Result<f64> {
    let conv = conv_madds(spec)?;
    if conv == 0 {
        return Err(Error::Config(format!(
            "layer {} has zero convolution cost; constraint ratio undefined",
            spec.name
        )));
    }
    let mut s = spec.clone();
    s.dynamic = true;
    s.k = Some(k);
    let extra = attention_madds(&s)? + aggregation_madds(&s)?;
    Ok(extra as f64 / conv as f64)
}

/// An ordered stack of layers with a consistent resolution chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub spec_version: u32,
    pub name: String,
    pub input_resolution: usize,
    pub width_multiplier: f64,
    pub layers: Vec<LayerSpec>,
}

pub const SPEC_VERSION: u32 = 1;

impl NetworkSpec {
    /// Structural checks: version, non-empty, resolution/channel chain
    /// consistency, and the rule that the first convolution stays static.
    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::Format(format!(
                "unsupported spec_version {} (expected {SPEC_VERSION})",
                self.spec_version
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config(format!("network {} has no layers", self.name)));
        }
        let mut h = self.input_resolution;
        let mut w = self.input_resolution;
        let mut c = self.layers[0].c_in;
        let mut seen_conv = false;
        for l in &self.layers {
            if l.h_in != h || l.w_in != w || l.c_in != c {
                return Err(Error::Config(format!(
                    "layer {} expects {}x{}x{}, but the chain provides {}x{}x{}",
                    l.name, l.c_in, l.h_in, l.w_in, c, h, w
                )));
            }
            if l.kind.is_conv() && !seen_conv {
                seen_conv = true;
                if l.dynamic {
                    return Err(Error::Config(format!(
                        "first convolution {} must stay static",
                        l.name
                    )));
                }
            }
            let (oh, ow) = l.out_hw()?;
            h = oh;
            w = ow;
            c = l.c_out;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub conv_madds: u64,
    pub attention_madds: u64,
    pub aggregation_madds: u64,
    /// (attention + aggregation) / conv for dynamic conv layers, else 0.
    pub constraint_ratio: f64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.conv_madds + self.attention_madds + self.aggregation_madds
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub network: String,
    pub dynamic: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kernel_count: Option<usize>,
    pub layers: Vec<LayerCost>,
    pub total_conv: u64,
    pub total_attention: u64,
    pub total_aggregation: u64,
}

impl CostReport {
    pub fn total(&self) -> u64 {
        self.total_conv + self.total_attention + self.total_aggregation
    }

    /// Network-level Eq.-3 ratio: dynamic overhead relative to the plain
    /// convolution cost.
    pub fn overall_constraint_ratio(&self) -> f64 {
        (self.total_attention + self.total_aggregation) as f64 / self.total_conv as f64
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>12}  {:>12}  {:>8}\n",
            "layer", "conv", "attention", "aggregation", "ratio"
        ));
        for l in &self.layers {
            let ratio = if l.constraint_ratio > 0.0 {
                format!("{:.4}", l.constraint_ratio)
            } else {
                "-".to_string()
            };
            out.push_str(&format!(
                "{:<name_w$}  {:>12}  {:>12}  {:>12}  {:>8}\n",
                l.name, l.conv_madds, l.attention_madds, l.aggregation_madds, ratio
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>12}  {:>12}  {:>8.4}\n",
            "total",
            self.total_conv,
            self.total_attention,
            self.total_aggregation,
            self.overall_constraint_ratio()
        ));
        out.push_str(&format!(
            "total mult-adds: {} ({:.2}M)\n",
            self.total(),
            self.total() as f64 / 1e6
        ));
        out
    }
}

/// Prices the whole network. `dynamic` turns every eligible layer dynamic
/// with `k` kernels; otherwise everything is costed static. By construction
/// dynamic_total - static_total == sum of (attention + aggregation).
pub fn network_madds(net: &NetworkSpec, dynamic: bool, k: usize) -> Result<CostReport> {
    net.validate()?;
    if dynamic && k == 0 {
        return Err(Error::Config("kernel count K must be at least 1".into()));
    }
    let mut layers = Vec::with_capacity(net.layers.len());
    let (mut tc, mut ta, mut tg) = (0u64, 0u64, 0u64);
    for l in &net.layers {
        let mut spec = l.clone();
        let counted_dynamic = dynamic && l.dynamic && l.kind.is_conv();
        if counted_dynamic {
            spec.k = Some(k);
        }
        let conv = match l.kind {
            LayerKind::Conv | LayerKind::DepthwiseConv => conv_madds(&spec)?,
            LayerKind::FullyConnected => (spec.c_in * spec.c_out) as u64,
            LayerKind::Pool | LayerKind::Bn | LayerKind::Act => 0,
        };
        let (att, agg) = if counted_dynamic {
            (attention_madds(&spec)?, aggregation_madds(&spec)?)
        } else {
            (0, 0)
        };
        let ratio = if counted_dynamic && conv > 0 {
            (att + agg) as f64 / conv as f64
        } else {
            0.0
        };
        tc += conv;
        ta += att;
        tg += agg;
        layers.push(LayerCost {
            name: l.name.clone(),
            kind: l.kind,
            conv_madds: conv,
            attention_madds: att,
            aggregation_madds: agg,
            constraint_ratio: ratio,
        });
    }
    Ok(CostReport {
        network: net.name.clone(),
        dynamic,
        kernel_count: dynamic.then_some(k),
        layers,
        total_conv: tc,
        total_attention: ta,
        total_aggregation: tg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_spec(
        c_in: usize,
        c_out: usize,
        d_k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        h_in: usize,
    ) -> LayerSpec {
        LayerSpec {
            name: "t".into(),
            kind: if groups == c_in && groups == c_out && groups > 1 {
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
            h_in,
            w_in: h_in,
            dynamic: false,
            k: None,
            reduction: None,
        }
    }

    fn dynamic_spec(spec: LayerSpec, k: usize) -> LayerSpec {
        LayerSpec {
            dynamic: true,
            k: Some(k),
            ..spec
        }
    }

    #[test]
    fn conv_cost_uses_output_dims() {
        // 1x1 conv on 7x7 output: stride 1, no padding keeps 7x7
        let s = conv_spec(160, 320, 1, 1, 0, 1, 7);
        assert_eq!(conv_madds(&s).unwrap(), 2_508_800);
        let tiny = conv_spec(1, 1, 1, 1, 0, 1, 1);
        assert_eq!(conv_madds(&tiny).unwrap(), 1);
        // stride-2 3x3: 8 -> 4 with padding 1
        let strided = conv_spec(2, 4, 3, 2, 1, 1, 8);
        assert_eq!(conv_madds(&strided).unwrap(), (4 * 4 * 2 * 4 * 9) as u64);
    }

    #[test]
    fn depthwise_cost_divides_by_groups() {
        let s = conv_spec(144, 144, 3, 1, 1, 144, 14);
        assert_eq!(conv_madds(&s).unwrap(), 254_016);
    }

    #[test]
    fn attention_cost_examples() {
        let s = dynamic_spec(conv_spec(64, 64, 3, 1, 1, 1, 14), 4);
        assert_eq!(attention_madds(&s).unwrap(), 12_544 + 1_024 + 64);
        let tiny = dynamic_spec(conv_spec(4, 4, 1, 1, 0, 1, 1), 1);
        assert_eq!(attention_madds(&tiny).unwrap(), 4 + 4 + 1);
        // r clamps to 1 below 4 channels
        let clamped = dynamic_spec(conv_spec(3, 8, 3, 1, 1, 1, 2), 4);
        assert_eq!(attention_madds(&clamped).unwrap(), 12 + 3 + 4);
    }

    #[test]
    fn aggregation_cost_examples() {
        let s = dynamic_spec(conv_spec(32, 32, 3, 1, 1, 1, 14), 4);
        assert_eq!(aggregation_madds(&s).unwrap(), 36_864 + 128);
        let dw = dynamic_spec(conv_spec(32, 32, 3, 1, 1, 32, 14), 4);
        assert_eq!(aggregation_madds(&dw).unwrap(), 4 * 32 * 9 + 128);
        let single = dynamic_spec(conv_spec(16, 24, 3, 1, 1, 1, 8), 1);
        assert_eq!(
            aggregation_madds(&single).unwrap(),
            (16 * 24 * 9 + 24) as u64
        );
    }

    #[test]
    fn static_layers_have_no_dynamic_cost() {
        let s = conv_spec(8, 8, 3, 1, 1, 1, 8);
        assert!(matches!(attention_madds(&s), Err(Error::Config(_))));
        assert!(matches!(aggregation_madds(&s), Err(Error::Config(_))));
        let pool = LayerSpec {
            kind: LayerKind::Pool,
            ..conv_spec(8, 8, 1, 1, 0, 1, 8)
        };
        assert!(matches!(conv_madds(&pool), Err(Error::Config(_))));
        assert!(matches!(check_constraint(&pool, 4), Err(Error::Config(_))));
    }

    #[test]
    fn pointwise_constraint_is_roughly_k_over_hw() {
        // aggregation/conv for a 1x1 conv is K/(H'W') up to the bias term
        let s = dynamic_spec(conv_spec(160, 320, 1, 1, 0, 1, 14), 4);
        let agg = aggregation_madds(&s).unwrap() as f64;
        let conv = conv_madds(&s).unwrap() as f64;
        assert!((agg / conv - 4.0 / 196.0).abs() < 1e-3);
    }

    #[test]
    fn fc_like_layers_break_the_constraint() {
        // 1x1 spatial: the extra cost rivals the conv itself
        let s = conv_spec(64, 64, 1, 1, 0, 1, 1);
        let ratio = check_constraint(&s, 4).unwrap();
        assert!(ratio > 0.5, "ratio {ratio} should document the FC failure mode");
        // healthy mid-network layer: overhead is a few percent
        let good = conv_spec(64, 64, 3, 1, 1, 1, 14);
        let r2 = check_constraint(&good, 4).unwrap();
        assert!(r2 < 0.05, "ratio {r2}");
    }

    fn tiny_net() -> NetworkSpec {
        NetworkSpec {
            spec_version: 1,
            name: "tiny".into(),
            input_resolution: 8,
            width_multiplier: 1.0,
            layers: vec![
                LayerSpec {
                    name: "stem".into(),
                    ..conv_spec(3, 8, 3, 2, 1, 1, 8)
                },
                dynamic_spec(
                    LayerSpec {
                        name: "dyn1".into(),
                        ..conv_spec(8, 16, 3, 1, 1, 1, 4)
                    },
                    4,
                ),
                LayerSpec {
                    name: "pool".into(),
                    kind: LayerKind::Pool,
                    ..conv_spec(16, 16, 1, 1, 0, 1, 4)
                },
                LayerSpec {
                    name: "fc".into(),
                    kind: LayerKind::FullyConnected,
                    ..conv_spec(16, 6, 1, 1, 0, 1, 1)
                },
            ],
        }
    }

    #[test]
    fn dynamic_minus_static_is_exactly_the_extra_terms() {
        let net = tiny_net();
        for k in [1, 2, 4, 8] {
            let st = network_madds(&net, false, k).unwrap();
            let dy = network_madds(&net, true, k).unwrap();
            assert_eq!(st.total_attention, 0);
            assert_eq!(st.total_aggregation, 0);
            assert_eq!(
                dy.total() - st.total(),
                dy.total_attention + dy.total_aggregation
            );
            assert_eq!(dy.total_conv, st.total_conv);
        }
    }

    #[test]
    fn totals_grow_with_k() {
        let net = tiny_net();
        let mut prev = network_madds(&net, true, 1).unwrap().total();
        for k in 2..6 {
            let t = network_madds(&net, true, k).unwrap().total();
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn fc_is_counted_and_pool_is_free() {
        let net = tiny_net();
        let st = network_madds(&net, false, 1).unwrap();
        let fc = st.layers.iter().find(|l| l.name == "fc").unwrap();
        assert_eq!(fc.conv_madds, 16 * 6);
        let pool = st.layers.iter().find(|l| l.name == "pool").unwrap();
        assert_eq!(pool.total(), 0);
    }

    #[test]
    fn broken_resolution_chain_is_refused() {
        let mut net = tiny_net();
        net.layers[1].h_in = 5;
        assert!(matches!(
            network_madds(&net, false, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn first_conv_must_stay_static() {
        let mut net = tiny_net();
        net.layers[0].dynamic = true;
        net.layers[0].k = Some(4);
        assert!(matches!(net.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn version_gate_and_json_round_trip() {
        let net = tiny_net();
        let s = serde_json::to_string(&net).unwrap();
        let back: NetworkSpec = serde_json::from_str(&s).unwrap();
        back.validate().unwrap();
        assert_eq!(
            network_madds(&back, true, 4).unwrap().total(),
            network_madds(&net, true, 4).unwrap().total()
        );
        let mut bad = net.clone();
        bad.spec_version = 2;
        assert!(matches!(bad.validate(), Err(Error::Format(_))));
    }

    #[test]
    fn report_renders_a_table() {
        let net = tiny_net();
        let rep = network_madds(&net, true, 4).unwrap();
        let text = rep.render_text();
        assert!(text.contains("layer"));
        assert!(text.contains("total mult-adds"));
        assert!(text.lines().count() >= net.layers.len() + 2);
    }
}
