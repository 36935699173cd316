//! Post-training probes for whether a trained model is actually dynamic:
//! swapping the kernel aggregation for degraded variants, switching attention
//! off per resolution stage, and summarizing the attention weights a dataset
//! actually produces.
//!
//! All probes are read-only. Each one checksums the model's tensors before
//! and after and fails with an invariant error if anything moved. Batch norm
//! running statistics are reused as trained; they are not recomputed for the
//! degraded aggregations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{AggregationMode, Phase};
use crate::tape::Tape;
use crate::tensor::Element;
use crate::train;

/// Bin count of the max-attention-share histogram.
pub const HISTOGRAM_BINS: usize = 10;

/// One evaluated aggregation mode. `mode` is the mode's display label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub top1: f64,
}

/// Top-1 accuracy under every aggregation mode; the trained attention row is
/// always first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTable {
    pub rows: Vec<ModeRow>,
}

impl ModeTable {
    pub fn top1(&self, mode: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.top1)
    }

    /// Aligned two-column text table.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.mode.len())
            .max()
            .unwrap_or(0)
            .max("aggregation".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:width$}  top-1", "aggregation");
        for row in &self.rows {
            let _ = writeln!(out, "{:width$}  {:.4}", row.mode, row.top1);
        }
        out
    }
}

/// Per-stage attention switch: `true` keeps the trained attention, `false`
/// aggregates with uniform weights 1/K for every layer in that stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMask(pub Vec<bool>);

impl StageMask {
    pub fn all_on(stages: usize) -> Self {
        StageMask(vec![true; stages])
    }

    pub fn all_off(stages: usize) -> Self {
        StageMask(vec![false; stages])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One evaluated stage mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub mask: StageMask,
    pub top1: f64,
}

/// Accuracy per stage mask. `resolutions` names the columns: input
/// resolution of each stage, outermost first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTable {
    pub resolutions: Vec<usize>,
    pub rows: Vec<StageRow>,
}

impl StageTable {
    /// Aligned text table, one column per stage, `on`/`--` cells.
    pub fn render(&self) -> String {
        let headers: Vec<String> = self.resolutions.iter().map(|r| format!("{r}^2")).collect();
        let widths: Vec<usize> = headers.iter().map(|h| h.len().max(2)).collect();
        let mut out = String::new();
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, "{h:>w$}  ");
        }
        let _ = writeln!(out, "| top-1");
        for row in &self.rows {
            for (&on, w) in row.mask.0.iter().zip(&widths) {
                let cell = if on { "on" } else { "--" };
                let _ = write!(out, "{cell:>w$}  ");
            }
            let _ = writeln!(out, "| {:.4}", row.top1);
        }
        out
    }
}

/// Attention statistics of one dynamic layer over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: String,
    /// Input resolution of the layer's stage.
    pub resolution: usize,
    /// Attention averaged over all samples; sums to 1.
    pub mean_attention: Vec<f64>,
    /// Mean of the per-sample attention entropy, in [0, ln K].
    pub mean_entropy: f64,
    /// Per-sample max attention weight, bucketed into [0,1) tenths.
    pub max_share_histogram: Vec<usize>,
}

/// Per-layer attention summaries over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub samples: usize,
    pub layers: Vec<LayerStats>,
}

impl AttentionStats {
    pub fn render(&self) -> String {
        let name_w = self
            .layers
            .iter()
            .map(|l| l.layer.len())
            .max()
            .unwrap_or(0)
            .max("layer".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:name_w$}  res   entropy  mean attention / max-share bins",
            "layer"
        );
        for l in &self.layers {
            let mean: Vec<String> = l.mean_attention.iter().map(|v| format!("{v:.3}")).collect();
            let hist: Vec<String> = l.max_share_histogram.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{:name_w$}  {:<4}  {:.4}   [{}] / [{}]",
                l.layer,
                l.resolution,
                l.mean_entropy,
                mean.join(" "),
                hist.join(" ")
            );
        }
        out
    }
}

/// FNV-1a over names and element bit patterns of every tensor the model
/// exposes, parameters and batch norm buffers alike.
fn model_checksum<E: Element>(model: &Model<E>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for (name, t) in model.named_tensors() {
        for &b in name.as_bytes() {
            eat(b);
        }
        for v in t.to_f64_vec() {
            for b in v.to_bits().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}

fn with_frozen_model<E: Element, R>(
    model: &Model<E>,
    f: impl FnOnce() -> Result<R>,
) -> Result<R> {
    let before = model_checksum(model);
    let out = f()?;
    if model_checksum(model) != before {
        return Err(Error::Invariant(
            "inspection mutated model state".into(),
        ));
    }
    Ok(out)
}

/// Evaluates the model under the trained attention and under every degraded
/// aggregation, sharing `seed` across the shuffled variants. The attention
/// row comes first and matches a plain evaluation exactly.
pub fn ablate_modes<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    seed: u64,
    batch_size: usize,
) -> Result<ModeTable> {
    if model.kernel_count() < 2 {
        return Err(Error::Config(
            "mode ablation needs at least 2 kernels; a single-kernel model aggregates nothing"
                .into(),
        ));
    }
    with_frozen_model(model, || {
        let modes = [
            AggregationMode::Attention,
            AggregationMode::Average,
            AggregationMode::MaxAttention,
            AggregationMode::ShufflePerSample { seed },
            AggregationMode::ShuffleAcrossSamples { seed },
        ];
        let mut rows = Vec::with_capacity(modes.len());
        for mode in modes {
            rows.push(ModeRow {
                mode: mode.to_string(),
                top1: train::evaluate(model, data, &mode, batch_size)?,
            });
        }
        Ok(ModeTable { rows })
    })
}

/// Top-1 accuracy with attention enabled only in the masked-on stages;
/// masked-off stages average their kernels uniformly.
pub fn ablate_stages<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    mask: &StageMask,
    batch_size: usize,
) -> Result<f64> {
    let stages = model.stage_table();
    if mask.len() != stages.len() {
        return Err(Error::Config(format!(
            "stage mask has {} entries, model has {} stages",
            mask.len(),
            stages.len()
        )));
    }
    let blocks: usize = stages.iter().map(|s| s.blocks.len()).sum();
    let mut modes = vec![AggregationMode::Average; blocks];
    for (stage, &on) in stages.iter().zip(&mask.0) {
        if on {
            for &b in &stage.blocks {
                modes[b] = AggregationMode::Attention;
            }
        }
    }
    with_frozen_model(model, || evaluate_staged(model, data, &modes, batch_size))
}

fn evaluate_staged<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    modes: &[AggregationMode],
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let tape = Tape::no_grad();
    let mut correct = 0usize;
    for chunk in train::chunk_indices(&data.all_indices(), batch_size) {
        let (x, labels) = data.batch(&chunk)?;
        let logits = model.forward_staged(&tape, &x, modes, Phase::Eval)?;
        correct += train::count_correct(&logits.to_f64_vec(), model.classes(), &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// The nested mask ladder used for stage tables: suffixes of increasing
/// length (attention at the innermost stages only), the full mask, prefixes
/// of decreasing length, then all off. 2S rows for S stages.
pub fn nested_masks(stages: usize) -> Vec<StageMask> {
    let mut rows = Vec::with_capacity(2 * stages);
    for on in 1..=stages {
        let mut m = vec![false; stages];
        for b in &mut m[stages - on..] {
            *b = true;
        }
        rows.push(StageMask(m));
    }
    for on in (1..stages).rev() {
        let mut m = vec![false; stages];
        for b in &mut m[..on] {
            *b = true;
        }
        rows.push(StageMask(m));
    }
    rows.push(StageMask(vec![false; stages]));
    rows
}

/// Runs the whole nested mask ladder and tabulates the accuracies.
pub fn ablate_stage_table<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    batch_size: usize,
) -> Result<StageTable> {
    let stages = model.stage_table();
    let resolutions = stages.iter().map(|s| s.resolution).collect();
    let mut rows = Vec::new();
    for mask in nested_masks(stages.len()) {
        let top1 = ablate_stages(model, data, &mask, batch_size)?;
        rows.push(StageRow { mask, top1 });
    }
    Ok(StageTable { resolutions, rows })
}

fn entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Mean attention vector, mean entropy and max-share histogram of every
/// dynamic layer over `data`, at the model's current temperature.
pub fn attention_stats<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    batch_size: usize,
) -> Result<AttentionStats> {
    if data.is_empty() {
        return Err(Error::Data(
            "cannot summarize attention over an empty dataset".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    with_frozen_model(model, || {
        let names = model.dynamic_layer_names();
        let k = model.kernel_count();
        let mut sums = vec![vec![0.0f64; k]; names.len()];
        let mut entropies = vec![0.0f64; names.len()];
        let mut hists = vec![vec![0usize; HISTOGRAM_BINS]; names.len()];
        for chunk in train::chunk_indices(&data.all_indices(), batch_size) {
            let (x, _) = data.batch(&chunk)?;
            let profiles = model.attention_profiles(&x)?;
            for (l, pi) in profiles.iter().enumerate() {
                let flat = pi.to_f64_vec();
                for row in flat.chunks(k) {
                    let mut max = 0.0f64;
                    for (j, &p) in row.iter().enumerate() {
                        sums[l][j] += p;
                        entropies[l] += entropy_term(p);
                        max = max.max(p);
                    }
                    let bin =
                        ((max * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                    hists[l][bin] += 1;
                }
            }
        }
        let n = data.len() as f64;
        let mut resolution_of_block = vec![0usize; names.len()];
        for stage in model.stage_table() {
            for &b in &stage.blocks {
                resolution_of_block[b] = stage.resolution;
            }
        }
        let layers = names
            .into_iter()
            .enumerate()
            .map(|(l, layer)| LayerStats {
                layer,
                resolution: resolution_of_block[l],
                mean_attention: sums[l].iter().map(|s| s / n).collect(),
                mean_entropy: entropies[l] / n,
                max_share_histogram: hists[l].clone(),
            })
            .collect();
        Ok(AttentionStats {
            samples: data.len(),
            layers,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BlobsConfig, DatasetConfig};
    use crate::model::{DeskNet, DeskNetConfig, ModelConfig};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(kernel_count: usize) -> DeskNetConfig {
        DeskNetConfig {
            in_channels: 1,
            resolution: 16,
            classes: 3,
            channels: [4, 6, 8, 10],
            kernel_count,
            tau: 2.5,
        }
    }

    fn small_model(kernel_count: usize, seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelConfig::DeskNet(small_config(kernel_count))
            .build(&mut rng)
            .unwrap();
        model.mark_bn_initialized();
        model
    }

    fn small_data() -> Dataset<f64> {
        DatasetConfig::Blobs(BlobsConfig {
            seed: 11,
            train: 24,
            test: 36,
            resolution: 16,
            noise: 0.25,
        })
        .test_split()
        .unwrap()
    }

    /// Gives the attention branches non-trivial logits; fresh models start
    /// with fc2 at zero and would make every mode compare equal.
    fn randomize_attention(model: &Model<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in model.named_tensors() {
            if name.ends_with(".att.fc2_weight") || name.ends_with(".att.fc2_bias") {
                let vals: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-1.5..1.5)).collect();
                t.set_data(vals).unwrap();
            }
        }
    }

    #[test]
    fn single_kernel_models_are_refused() {
        let model = small_model(1, 0);
        let data = small_data();
        assert!(matches!(
            ablate_modes(&model, &data, 0, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_row_is_first_and_matches_plain_evaluation() {
        let model = small_model(4, 1);
        randomize_attention(&model, 2);
        let data = small_data();
        let table = ablate_modes(&model, &data, 7, 8).unwrap();
        assert_eq!(table.rows.len(), 5);
        assert_eq!(table.rows[0].mode, "attention");
        let plain =
            train::evaluate(&model, &data, &AggregationMode::Attention, 8).unwrap();
        assert_eq!(table.rows[0].top1, plain);
        let labels: Vec<&str> = table.rows.iter().map(|r| r.mode.as_str()).collect();
        assert_eq!(
            labels,
            [
                "attention",
                "average",
                "max",
                "shuffle-per-sample",
                "shuffle-across-samples"
            ]
        );
        assert!(table.top1("average").is_some());
        assert!(table.top1("nonesuch").is_none());
    }

    #[test]
    fn identical_kernels_make_every_mode_agree() {
        let model = small_model(4, 3);
        randomize_attention(&model, 4);
        for (name, t) in model.named_tensors() {
            if name.ends_with(".kernels") || name.ends_with(".biases") {
                let vals = t.to_f64_vec();
                let one = vals.len() / 4;
                let tiled: Vec<f64> = vals[..one]
                    .iter()
                    .cycle()
                    .take(vals.len())
                    .copied()
                    .collect();
                t.set_data(tiled).unwrap();
            }
        }
        let data = small_data();
        let table = ablate_modes(&model, &data, 5, 8).unwrap();
        let base = table.rows[0].top1;
        for row in &table.rows {
            assert!(
                (row.top1 - base).abs() <= 1e-6,
                "{} diverged: {} vs {}",
                row.mode,
                row.top1,
                base
            );
        }
    }

    #[test]
    fn stage_masks_hit_the_evaluation_endpoints() {
        let model = small_model(4, 6);
        randomize_attention(&model, 7);
        let data = small_data();
        let stages = model.stage_table().len();
        assert_eq!(stages, 3);
        let on = ablate_stages(&model, &data, &StageMask::all_on(stages), 8).unwrap();
        let plain =
            train::evaluate(&model, &data, &AggregationMode::Attention, 8).unwrap();
        assert_eq!(on, plain);
        let off = ablate_stages(&model, &data, &StageMask::all_off(stages), 8).unwrap();
        let avg = train::evaluate(&model, &data, &AggregationMode::Average, 8).unwrap();
        assert_eq!(off, avg);
    }

    #[test]
    fn mask_length_must_match_the_stage_count() {
        let model = small_model(4, 8);
        let data = small_data();
        assert!(matches!(
            ablate_stages(&model, &data, &StageMask::all_on(2), 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nested_masks_walk_suffixes_then_prefixes() {
        let t = true;
        let f = false;
        let got = nested_masks(3);
        let want: Vec<StageMask> = [
            vec![f, f, t],
            vec![f, t, t],
            vec![t, t, t],
            vec![t, t, f],
            vec![t, f, f],
            vec![f, f, f],
        ]
        .into_iter()
        .map(StageMask)
        .collect();
        assert_eq!(got, want);
        assert_eq!(nested_masks(5).len(), 10);
        assert_eq!(
            nested_masks(1),
            vec![StageMask(vec![t]), StageMask(vec![f])]
        );
    }

    #[test]
    fn stage_table_runs_the_whole_ladder() {
        let model = small_model(2, 9);
        randomize_attention(&model, 10);
        let data = small_data();
        let table = ablate_stage_table(&model, &data, 8).unwrap();
        assert_eq!(table.resolutions, vec![16, 8, 4]);
        assert_eq!(table.rows.len(), 6);
        let rendered = table.render();
        assert!(rendered.contains("16^2"));
        assert!(rendered.lines().count() == 7);
    }

    #[test]
    fn fresh_models_report_uniform_attention() {
        let model = small_model(4, 11);
        let data = small_data();
        let stats = attention_stats(&model, &data, 8).unwrap();
        assert_eq!(stats.samples, data.len());
        assert_eq!(stats.layers.len(), 3);
        let ln_k = 4.0f64.ln();
        for layer in &stats.layers {
            for &m in &layer.mean_attention {
                assert!((m - 0.25).abs() < 1e-12);
            }
            assert!((layer.mean_entropy - ln_k).abs() < 1e-12);
            assert_eq!(layer.max_share_histogram.iter().sum::<usize>(), data.len());
            assert_eq!(layer.max_share_histogram[2], data.len());
        }
        assert_eq!(stats.layers[0].resolution, 16);
        assert_eq!(stats.layers[2].resolution, 4);
    }

    #[test]
    fn huge_temperature_flattens_any_attention() {
        let model = small_model(4, 12);
        randomize_attention(&model, 13);
        model.set_tau(1e9).unwrap();
        let data = small_data();
        let stats = attention_stats(&model, &data, 8).unwrap();
        let ln_k = 4.0f64.ln();
        for layer in &stats.layers {
            assert!((layer.mean_entropy - ln_k).abs() < 1e-3);
        }
    }

    #[test]
    fn mean_attention_stays_on_the_simplex() {
        let model = small_model(4, 14);
        randomize_attention(&model, 15);
        let data = small_data();
        let stats = attention_stats(&model, &data, 8).unwrap();
        let ln_k = 4.0f64.ln();
        for layer in &stats.layers {
            let sum: f64 = layer.mean_attention.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "mean sums to {sum}");
            assert!(layer.mean_entropy >= 0.0);
            assert!(layer.mean_entropy <= ln_k + 1e-9);
        }
    }

    #[test]
    fn statistics_reject_an_empty_dataset() {
        let model = small_model(4, 16);
        let empty = Dataset::<f64>::new("none", [1, 16, 16], vec![], vec![], 6).unwrap();
        assert!(matches!(
            attention_stats(&model, &empty, 8),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn probes_leave_the_model_untouched() {
        let model = small_model(4, 17);
        randomize_attention(&model, 18);
        let data = small_data();
        let before = model_checksum(&model);
        ablate_modes(&model, &data, 1, 8).unwrap();
        ablate_stage_table(&model, &data, 8).unwrap();
        attention_stats(&model, &data, 8).unwrap();
        assert_eq!(model_checksum(&model), before);
    }

    #[test]
    fn renders_are_aligned_and_complete() {
        let model = small_model(4, 19);
        randomize_attention(&model, 20);
        let data = small_data();
        let modes = ablate_modes(&model, &data, 2, 8).unwrap();
        let text = modes.render();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("aggregation"));
        let stats = attention_stats(&model, &data, 8).unwrap();
        let text = stats.render();
        assert!(text.contains("block0"));
        assert!(text.contains("block2"));
        let json = serde_json::to_string(&stats).unwrap();
        let back: AttentionStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back, stats);
    }

    #[test]
    fn xor_models_expose_a_single_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model: Model<f64> = ModelConfig::XorPerceptron(Default::default())
            .build(&mut rng)
            .unwrap();
        model.mark_bn_initialized();
        let data = DatasetConfig::Xor.test_split::<f64>().unwrap();
        assert_eq!(model.stage_table().len(), 1);
        let on = ablate_stages(&model, &data, &StageMask::all_on(1), 4).unwrap();
        let plain =
            train::evaluate(&model, &data, &AggregationMode::Attention, 4).unwrap();
        assert_eq!(on, plain);
        let stats = attention_stats(&model, &data, 4).unwrap();
        assert_eq!(stats.layers.len(), 1);
        assert_eq!(stats.layers[0].layer, "layer");
        assert_eq!(stats.layers[0].resolution, 1);
    }

    #[test]
    fn deskcheck_identical_kernel_tiling() {
        let cfg = small_config(4);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = DeskNet::<f64>::new(&mut rng, cfg).unwrap();
        let kernels = &net.blocks()[0].parameters()[0];
        let vals = kernels.to_f64_vec();
        let one = vals.len() / 4;
        let tiled: Vec<f64> = vals[..one].iter().cycle().take(vals.len()).copied().collect();
        assert_eq!(tiled.len(), vals.len());
        assert_eq!(&tiled[..one], &tiled[one..2 * one]);
    }
}
