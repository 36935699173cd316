//! Desk-scale networks assembled from the dynamic layers: a small image
//! classifier (static stem, three dynamic blocks, global pool, linear head)
//! and a one-layer dynamic perceptron sized for XOR. Both expose forward
//! passes with per-block aggregation modes, named tensors for checkpoints,
//! and a stage table for attention masking; the classifier additionally
//! emits an analytic cost table whose totals the instrumented counter must
//! reproduce exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{LayerKind, LayerSpec, NetworkSpec, SPEC_VERSION};
use crate::error::{Error, Result};
use crate::nn::{
    kaiming_uniform, Activation, AggregationMode, BatchNorm, DynamicConvLayer, Phase,
};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Strides of the three dynamic blocks. Two downsampling blocks followed by
/// one resolution-preserving block give the model three resolution stages.
const BLOCK_STRIDES: [usize; 3] = [2, 2, 1];

fn d_in_channels() -> usize {
    1
}
fn d_resolution() -> usize {
    16
}
fn d_classes() -> usize {
    3
}
fn d_channels() -> [usize; 4] {
    [8, 16, 24, 32]
}
fn d_kernel_count() -> usize {
    4
}
fn d_tau() -> f64 {
    30.0
}
fn d_xor_kernel_count() -> usize {
    2
}
fn d_xor_reduction() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskNetConfig {
    #[serde(default = "d_in_channels")]
    pub in_channels: usize,
    #[serde(default = "d_resolution")]
    pub resolution: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    /// Output channels of stem, block0, block1, block2.
    #[serde(default = "d_channels")]
    pub channels: [usize; 4],
    #[serde(default = "d_kernel_count")]
    pub kernel_count: usize,
    /// Initial softmax temperature; schedules overwrite it per epoch.
    #[serde(default = "d_tau")]
    pub tau: f64,
}

impl Default for DeskNetConfig {
    fn default() -> Self {
        DeskNetConfig {
            in_channels: d_in_channels(),
            resolution: d_resolution(),
            classes: d_classes(),
            channels: d_channels(),
            kernel_count: d_kernel_count(),
            tau: d_tau(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XorNetConfig {
    #[serde(default = "d_xor_kernel_count")]
    pub kernel_count: usize,
    /// Attention bottleneck width; the c_in/4 default would collapse to 1.
    #[serde(default = "d_xor_reduction")]
    pub reduction: usize,
    #[serde(default = "d_tau")]
    pub tau: f64,
}

impl Default for XorNetConfig {
    fn default() -> Self {
        XorNetConfig {
            kernel_count: d_xor_kernel_count(),
            reduction: d_xor_reduction(),
            tau: d_tau(),
        }
    }
}

/// Which network to build. Serialized with an `id` tag so checkpoints and
/// run configs stay self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum ModelConfig {
    DeskNet(DeskNetConfig),
    XorPerceptron(XorNetConfig),
}

impl ModelConfig {
    pub fn build<E: Element>(&self, rng: &mut impl Rng) -> Result<Model<E>> {
        match self {
            ModelConfig::DeskNet(cfg) => Ok(Model::Desk(DeskNet::new(rng, cfg.clone())?)),
            ModelConfig::XorPerceptron(cfg) => Ok(Model::Xor(XorNet::new(rng, cfg.clone())?)),
        }
    }

    pub fn kernel_count(&self) -> usize {
        match self {
            ModelConfig::DeskNet(c) => c.kernel_count,
            ModelConfig::XorPerceptron(c) => c.kernel_count,
        }
    }
}

/// Plain convolution + batch norm + activation: the static counterpart of a
/// dynamic block, used for the stem (the first convolution stays static,
/// the same convention the cost tables follow).
pub struct StaticConv<E: Element> {
    weight: Tensor<E>,
    bn: BatchNorm<E>,
    act: Activation,
    c_in: usize,
    c_out: usize,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl<E: Element> StaticConv<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        act: Activation,
    ) -> Result<Self> {
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
        // no conv bias: batch norm's shift makes it redundant
        let weight = kaiming_uniform(rng, &[c_out, cg, kernel_size, kernel_size], fan_in);
        Ok(StaticConv {
            weight,
            bn: BatchNorm::new(c_out),
            act,
            c_in,
            c_out,
            kernel_size,
            stride,
            padding,
            groups,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn bn(&self) -> &BatchNorm<E> {
        &self.bn
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor<E>, phase: Phase) -> Result<Tensor<E>> {
        let y = ops::conv2d(
            tape,
            x,
            &self.weight,
            None,
            self.stride,
            self.padding,
            self.groups,
        )?;
        let y = self.bn.forward(tape, &y, phase.is_train())?;
        Ok(self.act.apply(tape, &y))
    }

    pub fn parameters(&self) -> Vec<Tensor<E>> {
        let mut p = vec![self.weight.clone()];
        p.extend(self.bn.parameters());
        p
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut t = vec![(format!("{prefix}.weight"), self.weight.clone())];
        t.extend(self.bn.named_tensors(&format!("{prefix}.bn")));
        t
    }

    fn spec_row(&self, name: &str, h_in: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind: if self.groups == self.c_in && self.c_in == self.c_out {
                LayerKind::DepthwiseConv
            } else {
                LayerKind::Conv
            },
            c_in: self.c_in,
            c_out: self.c_out,
            d_k: self.kernel_size,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            h_in,
            w_in: h_in,
            dynamic: false,
            k: None,
            reduction: None,
        }
    }
}

/// One resolution stage: the input resolution its blocks share and the
/// indices of the dynamic blocks it contains.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageInfo {
    pub resolution: usize,
    pub blocks: Vec<usize>,
}

/// Small classifier: static 3x3 stem, three dynamic 3x3 blocks with strides
/// [2, 2, 1], global average pool, fully connected head.
pub struct DeskNet<E: Element> {
    cfg: DeskNetConfig,
    stem: StaticConv<E>,
    blocks: Vec<DynamicConvLayer<E>>,
    fc_weight: Tensor<E>,
    fc_bias: Tensor<E>,
}

impl<E: Element> DeskNet<E> {
    pub fn new(rng: &mut impl Rng, cfg: DeskNetConfig) -> Result<Self> {
        if cfg.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if cfg.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if cfg.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if cfg.resolution < 8 {
            return Err(Error::Config(
                "resolution must be at least 8 to survive two stride-2 blocks".into(),
            ));
        }
        let stem = StaticConv::new(
            rng,
            cfg.in_channels,
            cfg.channels[0],
            3,
            1,
            1,
            1,
            Activation::Relu,
        )?;
        let mut blocks = Vec::new();
        let mut c = cfg.channels[0];
        for (i, &c_out) in cfg.channels[1..].iter().enumerate() {
            // Floor the attention squeeze at 4 units. At these widths the
            // c_in/4 default collapses to a single hidden unit, and with fc2
            // starting at zero a dead unit leaves the branch untrainable.
            blocks.push(DynamicConvLayer::with_reduction(
                rng,
                c,
                c_out,
                3,
                BLOCK_STRIDES[i],
                1,
                1,
                cfg.kernel_count,
                (c / 4).max(4),
                cfg.tau,
                Activation::Relu,
            )?);
            c = c_out;
        }
        let fc_weight = kaiming_uniform(rng, &[cfg.classes, c], c);
        let fc_bias = Tensor::zeros(&[cfg.classes], true);
        Ok(DeskNet {
            cfg,
            stem,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &DeskNetConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[DynamicConvLayer<E>] {
        &self.blocks
    }

    pub fn stem(&self) -> &StaticConv<E> {
        &self.stem
    }

    pub fn kernel_count(&self) -> usize {
        self.cfg.kernel_count
    }

    /// One aggregation mode per dynamic block.
    pub fn forward_staged(
        &self,
        tape: &Tape,
        x: &Tensor<E>,
        modes: &[AggregationMode],
        phase: Phase,
    ) -> Result<Tensor<E>> {
        if modes.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "got {} aggregation modes for {} dynamic blocks",
                modes.len(),
                self.blocks.len()
            )));
        }
        let mut h = self.stem.forward(tape, x, phase)?;
        for (block, mode) in self.blocks.iter().zip(modes) {
            h = block.forward(tape, &h, mode, phase)?;
        }
        let pooled = ops::global_avg_pool(tape, &h)?;
        ops::fully_connected(tape, &pooled, &self.fc_weight, Some(&self.fc_bias))
    }

    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor<E>,
        mode: &AggregationMode,
        phase: Phase,
    ) -> Result<Tensor<E>> {
        let modes = vec![*mode; self.blocks.len()];
        self.forward_staged(tape, x, &modes, phase)
    }

    /// Attention weights [N, K] of every dynamic block for a batch, in block
    /// order. Evaluation-only probe; gradients are not recorded.
    pub fn attention_profiles(&self, x: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let tape = Tape::no_grad();
        let mut h = self.stem.forward(&tape, x, Phase::Eval)?;
        let mut profiles = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            profiles.push(block.attention().forward(&tape, &h)?);
            h = block.forward(&tape, &h, &AggregationMode::Attention, Phase::Eval)?;
        }
        Ok(profiles)
    }

    /// Input resolution seen by each dynamic block.
    fn block_resolutions(&self) -> Vec<usize> {
        let mut res = self.cfg.resolution; // stem has stride 1, padding 1
        let mut out = Vec::with_capacity(self.blocks.len());
        for stride in BLOCK_STRIDES.iter().take(self.blocks.len()) {
            out.push(res);
            res = (res + 2 - 3) / stride + 1;
        }
        out
    }

    /// Maximal runs of dynamic blocks sharing an input resolution. With the
    /// fixed strides this yields three stages of one block each.
    pub fn stage_table(&self) -> Vec<StageInfo> {
        let mut stages: Vec<StageInfo> = Vec::new();
        for (i, res) in self.block_resolutions().into_iter().enumerate() {
            match stages.last_mut() {
                Some(s) if s.resolution == res => s.blocks.push(i),
                _ => stages.push(StageInfo {
                    resolution: res,
                    blocks: vec![i],
                }),
            }
        }
        stages
    }

    /// Analytic cost table mirroring the executed graph row for row. Dynamic
    /// blocks are emitted as dynamic-eligible rows (kernel count supplied at
    /// query time), pool and head as free/static rows.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut layers = vec![self.stem.spec_row("stem", self.cfg.resolution)];
        let resolutions = self.block_resolutions();
        let mut last_res = *resolutions.last().unwrap();
        for (i, block) in self.blocks.iter().enumerate() {
            layers.push(LayerSpec {
                name: format!("block{i}"),
                kind: LayerKind::Conv,
                c_in: block.c_in(),
                c_out: block.c_out(),
                d_k: block.kernel_size(),
                stride: block.stride(),
                padding: 1,
                groups: block.groups(),
                h_in: resolutions[i],
                w_in: resolutions[i],
                dynamic: true,
                k: None,
                reduction: Some(block.attention().reduction()),
            });
        }
        last_res = (last_res + 2 - 3) / BLOCK_STRIDES[self.blocks.len() - 1] + 1;
        let c_last = self.cfg.channels[3];
        layers.push(LayerSpec {
            name: "pool".into(),
            kind: LayerKind::Pool,
            c_in: c_last,
            c_out: c_last,
            d_k: 0,
            stride: 0,
            padding: 0,
            groups: 1,
            h_in: last_res,
            w_in: last_res,
            dynamic: false,
            k: None,
            reduction: None,
        });
        layers.push(LayerSpec {
            name: "fc".into(),
            kind: LayerKind::FullyConnected,
            c_in: c_last,
            c_out: self.cfg.classes,
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
            name: "desk_net".into(),
            input_resolution: self.cfg.resolution,
            width_multiplier: 1.0,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn set_tau(&self, tau: f64) -> Result<()> {
        for block in &self.blocks {
            block.set_tau(tau)?;
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.blocks[0].attention().tau()
    }

    pub fn parameters(&self) -> Vec<Tensor<E>> {
        let mut p = self.stem.parameters();
        for block in &self.blocks {
            p.extend(block.parameters());
        }
        p.push(self.fc_weight.clone());
        p.push(self.fc_bias.clone());
        p
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut t = self.stem.named_tensors("stem");
        for (i, block) in self.blocks.iter().enumerate() {
            t.extend(block.named_tensors(&format!("block{i}")));
        }
        t.push(("fc.weight".into(), self.fc_weight.clone()));
        t.push(("fc.bias".into(), self.fc_bias.clone()));
        t
    }

    pub fn mark_bn_initialized(&self) {
        self.stem.bn().mark_initialized();
        for block in &self.blocks {
            block.bn().mark_initialized();
        }
    }
}

/// One dynamic 1x1 convolution over a [N, 2, 1, 1] input, reshaped to two
/// class logits. The single dynamic layer solves XOR, which no single static
/// linear layer can.
pub struct XorNet<E: Element> {
    cfg: XorNetConfig,
    layer: DynamicConvLayer<E>,
}

impl<E: Element> XorNet<E> {
    pub fn new(rng: &mut impl Rng, cfg: XorNetConfig) -> Result<Self> {
        let layer = DynamicConvLayer::with_reduction(
            rng,
            2,
            2,
            1,
            1,
            0,
            1,
            cfg.kernel_count,
            cfg.reduction,
            cfg.tau,
            Activation::None,
        )?;
        Ok(XorNet { cfg, layer })
    }

    pub fn config(&self) -> &XorNetConfig {
        &self.cfg
    }

    pub fn layer(&self) -> &DynamicConvLayer<E> {
        &self.layer
    }

    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor<E>,
        mode: &AggregationMode,
        phase: Phase,
    ) -> Result<Tensor<E>> {
        let y = self.layer.forward(tape, x, mode, phase)?;
        ops::reshape(tape, &y, &[x.shape()[0], 2])
    }

    pub fn attention_profiles(&self, x: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let tape = Tape::no_grad();
        Ok(vec![self.layer.attention().forward(&tape, x)?])
    }
}

/// A buildable network. Everything downstream (training, inspection,
/// checkpoints) goes through this surface.
pub enum Model<E: Element> {
    Desk(DeskNet<E>),
    Xor(XorNet<E>),
}

impl<E: Element> Model<E> {
    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Desk(m) => ModelConfig::DeskNet(m.cfg.clone()),
            Model::Xor(m) => ModelConfig::XorPerceptron(m.cfg.clone()),
        }
    }

    /// Expected sample shape [channels, height, width].
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Model::Desk(m) => [m.cfg.in_channels, m.cfg.resolution, m.cfg.resolution],
            Model::Xor(_) => [2, 1, 1],
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Desk(m) => m.cfg.classes,
            Model::Xor(_) => 2,
        }
    }

    pub fn kernel_count(&self) -> usize {
        match self {
            Model::Desk(m) => m.cfg.kernel_count,
            Model::Xor(m) => m.cfg.kernel_count,
        }
    }

    pub fn dynamic_layer_names(&self) -> Vec<String> {
        match self {
            Model::Desk(m) => (0..m.blocks.len()).map(|i| format!("block{i}")).collect(),
            Model::Xor(_) => vec!["layer".into()],
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        x: &Tensor<E>,
        mode: &AggregationMode,
        phase: Phase,
    ) -> Result<Tensor<E>> {
        match self {
            Model::Desk(m) => m.forward(tape, x, mode, phase),
            Model::Xor(m) => m.forward(tape, x, mode, phase),
        }
    }

    /// One aggregation mode per dynamic layer, in layer order.
    pub fn forward_staged(
        &self,
        tape: &Tape,
        x: &Tensor<E>,
        modes: &[AggregationMode],
        phase: Phase,
    ) -> Result<Tensor<E>> {
        match self {
            Model::Desk(m) => m.forward_staged(tape, x, modes, phase),
            Model::Xor(m) => {
                if modes.len() != 1 {
                    return Err(Error::Config(format!(
                        "got {} aggregation modes for 1 dynamic layer",
                        modes.len()
                    )));
                }
                m.forward(tape, x, &modes[0], Phase::Eval)
            }
        }
    }

    pub fn attention_profiles(&self, x: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        match self {
            Model::Desk(m) => m.attention_profiles(x),
            Model::Xor(m) => m.attention_profiles(x),
        }
    }

    pub fn stage_table(&self) -> Vec<StageInfo> {
        match self {
            Model::Desk(m) => m.stage_table(),
            Model::Xor(_) => vec![StageInfo {
                resolution: 1,
                blocks: vec![0],
            }],
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match self {
            Model::Desk(m) => m.network_spec(),
            Model::Xor(_) => Err(Error::Config(
                "the XOR perceptron has no analytic cost table".into(),
            )),
        }
    }

    pub fn set_tau(&self, tau: f64) -> Result<()> {
        match self {
            Model::Desk(m) => m.set_tau(tau),
            Model::Xor(m) => m.layer.set_tau(tau),
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            Model::Desk(m) => m.tau(),
            Model::Xor(m) => m.layer.attention().tau(),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor<E>> {
        match self {
            Model::Desk(m) => m.parameters(),
            Model::Xor(m) => m.layer.parameters(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>)> {
        match self {
            Model::Desk(m) => m.named_tensors(),
            Model::Xor(m) => m.layer.named_tensors("layer"),
        }
    }

    pub fn mark_bn_initialized(&self) {
        match self {
            Model::Desk(m) => m.mark_bn_initialized(),
            Model::Xor(m) => m.layer.bn().mark_initialized(),
        }
    }
}
