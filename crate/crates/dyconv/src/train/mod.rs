//! Optimization harness: epoch loop with per-epoch temperature and learning
//! rate, seeded shuffling, fresh tape per step, divergence detection, and an
//! evaluation pass that never mutates the model. `run_to_dir` drives a full
//! configured run and leaves a metrics stream plus a checkpoint on disk.

pub mod schedule;
pub mod sgd;

pub use schedule::{LrSchedule, TauSchedule};
pub use sgd::Sgd;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{AggregationMode, Phase};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Dtype, Element};

fn d_batch() -> usize {
    32
}
fn d_momentum() -> f64 {
    0.9
}
fn d_dtype() -> Dtype {
    Dtype::F32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub tau_schedule: TauSchedule,
    #[serde(default = "d_dtype")]
    pub dtype: Dtype,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::Config(format!(
                "lr0 must be finite and non-negative, got {}",
                self.lr0
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        self.lr_schedule.validate()?;
        self.tau_schedule.validate()
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub tau: f64,
    pub lr: f64,
}

pub struct TrainOutcome<E: Element> {
    pub model: Model<E>,
    pub history: Vec<EpochRecord>,
}

/// Index chunks for evaluation/training batches. A trailing single-sample
/// chunk is merged into its predecessor so degraded aggregation modes that
/// need batches of at least two keep working.
pub(crate) fn chunk_indices(indices: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = indices.chunks(batch).map(|c| c.to_vec()).collect();
    if chunks.len() >= 2 && chunks.last().is_some_and(|c| c.len() == 1) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

/// Top-1 accuracy of `model` on `data` under the given aggregation mode.
/// Runs in eval phase on a non-recording tape: parameters, batch norm
/// buffers and attention state are read, never written.
pub fn evaluate<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    mode: &AggregationMode,
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
    for chunk in chunk_indices(&data.all_indices(), batch_size) {
        let (x, labels) = data.batch(&chunk)?;
        let logits = model.forward(&tape, &x, mode, Phase::Eval)?;
        correct += count_correct(&logits.to_f64_vec(), model.classes(), &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn count_correct(logits: &[f64], classes: usize, labels: &[usize]) -> usize {
    let mut correct = 0;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits[row * classes..(row + 1) * classes];
        let mut best = 0;
        for (i, v) in r.iter().enumerate() {
            if *v > r[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

/// Full training loop. Deterministic for a fixed seed: the model is built,
/// batches are shuffled, and every step runs on a single thread from one
/// seeded generator. The temperature is updated before the first forward of
/// each epoch; a non-finite loss aborts with the epoch index.
pub fn train<E: Element>(
    model_cfg: &ModelConfig,
    data_cfg: &DatasetConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    let train_data: Dataset<E> = data_cfg.train_split()?;
    let test_data: Dataset<E> = data_cfg.test_split()?;
    if train_data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Model<E> = model_cfg.build(&mut rng)?;
    if model.input_shape() != train_data.sample_shape() {
        return Err(Error::Config(format!(
            "dataset samples {:?} do not fit model input {:?}",
            train_data.sample_shape(),
            model.input_shape()
        )));
    }
    if model.classes() != train_data.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            train_data.classes(),
            model.classes()
        )));
    }

    let params = model.parameters();
    let mut opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut indices = train_data.all_indices();

    for epoch in 0..cfg.epochs {
        let tau = cfg.tau_schedule.tau_at(epoch);
        model.set_tau(tau)?;
        let lr = cfg.lr_schedule.lr_at(cfg.lr0, epoch, cfg.epochs);

        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in chunk_indices(&indices, cfg.batch_size) {
            let tape = Tape::new();
            let (x, labels) = train_data.batch(&chunk)?;
            let logits = model.forward(&tape, &x, &AggregationMode::Attention, Phase::Train)?;
            let loss = ops::cross_entropy_loss(&tape, &logits, &labels)?;
            let value = loss.item().into_f64();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("training loss became {value}"),
                });
            }
            tape.backward(&loss)?;
            opt.step(&params, lr)?;
            for p in &params {
                p.zero_grad();
            }
            loss_sum += value * chunk.len() as f64;
        }

        let record = EpochRecord {
            epoch,
            loss: loss_sum / train_data.len() as f64,
            top1: evaluate(&model, &test_data, &AggregationMode::Attention, cfg.batch_size)?,
            tau,
            lr,
        };
        on_epoch(&record)?;
        history.push(record);
    }

    Ok(TrainOutcome { model, history })
}

pub struct RunSummary {
    pub final_loss: f64,
    pub final_top1: f64,
    pub epochs: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Runs a configured training job and writes `metrics.jsonl` (one record per
/// epoch) and `checkpoint.json` under `out`.
pub fn run_to_dir(run: &RunConfig, out: &Path) -> Result<RunSummary> {
    run.validate()?;
    match run.train.dtype {
        Dtype::F32 => run_typed::<f32>(run, out),
        Dtype::F64 => run_typed::<f64>(run, out),
    }
}

fn run_typed<E: Element>(run: &RunConfig, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.jsonl");
    let checkpoint_path = out.join("checkpoint.json");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);

    let outcome = train::<E>(&run.model, &run.dataset, &run.train, run.seed, |rec| {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Format(format!("metric record serialization failed: {e}")))?;
        writeln!(metrics, "{line}")?;
        Ok(())
    })?;
    metrics.flush()?;

    Checkpoint::from_model(&outcome.model)?.write(&checkpoint_path)?;
    let last = outcome.history.last().expect("epochs >= 1");
    Ok(RunSummary {
        final_loss: last.loss,
        final_top1: last.top1,
        epochs: outcome.history.len(),
        checkpoint: checkpoint_path,
        metrics: metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobsConfig;
    use crate::model::DeskNetConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig::DeskNet(DeskNetConfig {
            channels: [2, 3, 3, 4],
            kernel_count: 2,
            ..Default::default()
        })
    }

    fn tiny_data() -> DatasetConfig {
        DatasetConfig::Blobs(BlobsConfig {
            train: 24,
            test: 12,
            ..Default::default()
        })
    }

    fn tiny_train(epochs: usize, lr0: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr0,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
            tau_schedule: TauSchedule::Anneal {
                start: 30.0,
                end: 1.0,
                epochs: 2,
            },
            dtype: Dtype::F64,
        }
    }

    #[test]
    fn history_follows_the_schedules() {
        let cfg = tiny_train(3, 0.05);
        let out = train::<f64>(&tiny_model(), &tiny_data(), &cfg, 1, |_| Ok(())).unwrap();
        assert_eq!(out.history.len(), 3);
        for (e, rec) in out.history.iter().enumerate() {
            assert_eq!(rec.epoch, e);
            assert_eq!(rec.tau, cfg.tau_schedule.tau_at(e));
            assert_eq!(rec.lr, cfg.lr_schedule.lr_at(0.05, e, 3));
            assert!(rec.loss.is_finite());
            assert!((0.0..=1.0).contains(&rec.top1));
        }
        // the model is left at the last scheduled temperature
        assert_eq!(out.model.tau(), cfg.tau_schedule.tau_at(2));
    }

    #[test]
    fn same_seed_reproduces_the_metric_stream() {
        let cfg = tiny_train(2, 0.05);
        let a = train::<f64>(&tiny_model(), &tiny_data(), &cfg, 7, |_| Ok(())).unwrap();
        let b = train::<f64>(&tiny_model(), &tiny_data(), &cfg, 7, |_| Ok(())).unwrap();
        assert_eq!(a.history, b.history);
        let c = train::<f64>(&tiny_model(), &tiny_data(), &cfg, 8, |_| Ok(())).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let cfg = tiny_train(3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference: Model<f64> = tiny_model().build(&mut rng).unwrap();
        let before: Vec<Vec<f64>> = reference
            .parameters()
            .iter()
            .map(|p| p.to_f64_vec())
            .collect();

        let out = train::<f64>(&tiny_model(), &tiny_data(), &cfg, 4, |_| Ok(())).unwrap();
        let after: Vec<Vec<f64>> = out
            .model
            .parameters()
            .iter()
            .map(|p| p.to_f64_vec())
            .collect();
        assert_eq!(before, after, "lr0 = 0 must leave every parameter bitwise intact");
        // BN running statistics are forward-pass buffers, not optimizer
        // state: they must keep tracking batches even at lr 0.
        let moved = out
            .model
            .named_tensors()
            .iter()
            .filter(|(n, _)| n.ends_with("bn.running_mean"))
            .any(|(n, t)| {
                let fresh = reference
                    .named_tensors()
                    .into_iter()
                    .find(|(rn, _)| rn == n)
                    .unwrap()
                    .1;
                t.to_f64_vec() != fresh.to_f64_vec()
            });
        assert!(moved, "running statistics should move during train-phase forwards");
    }

    fn expect_err(r: Result<TrainOutcome<f64>>) -> Error {
        match r {
            Err(e) => e,
            Ok(_) => panic!("expected the run to fail"),
        }
    }

    #[test]
    fn exploding_run_reports_divergence_epoch() {
        let mut cfg = tiny_train(4, 1e18);
        cfg.weight_decay = 1e18;
        cfg.momentum = 0.0;
        let err = expect_err(train::<f64>(&tiny_model(), &tiny_data(), &cfg, 5, |_| Ok(())));
        match err {
            Error::Divergence { epoch, .. } => assert!(epoch >= 1, "first forward is finite"),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn mismatched_model_and_dataset_are_refused() {
        let cfg = tiny_train(1, 0.05);
        let err = expect_err(train::<f64>(
            &ModelConfig::XorPerceptron(Default::default()),
            &tiny_data(),
            &cfg,
            1,
            |_| Ok(()),
        ));
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn evaluate_contract_on_a_rigged_head() {
        // zero the final layer and bake a favorite class into its bias:
        // predictions become constant, accuracy becomes that class's share
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model: Model<f64> = tiny_model().build(&mut rng).unwrap();
        model.mark_bn_initialized();
        let named = model.named_tensors();
        let fc_w = &named.iter().find(|(n, _)| n == "fc.weight").unwrap().1;
        let fc_b = &named.iter().find(|(n, _)| n == "fc.bias").unwrap().1;
        fc_w.set_data(vec![0.0; fc_w.len()]).unwrap();
        let mut bias = vec![0.0; fc_b.len()];
        bias[2] = 10.0;
        fc_b.set_data(bias).unwrap();

        let data = tiny_data().test_split::<f64>().unwrap();
        let share = data.labels().iter().filter(|&&l| l == 2).count() as f64
            / data.len() as f64;
        let acc = evaluate(&model, &data, &AggregationMode::Average, 5).unwrap();
        assert_eq!(acc, share);
    }

    #[test]
    fn evaluate_never_mutates_state() {
        let cfg = tiny_train(1, 0.05);
        let out = train::<f64>(&tiny_model(), &tiny_data(), &cfg, 9, |_| Ok(())).unwrap();
        let data = tiny_data().test_split::<f64>().unwrap();
        let before: Vec<(String, Vec<f64>)> = out
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_f64_vec()))
            .collect();
        for mode in [
            AggregationMode::Attention,
            AggregationMode::Average,
            AggregationMode::MaxAttention,
            AggregationMode::ShufflePerSample { seed: 1 },
            AggregationMode::ShuffleAcrossSamples { seed: 1 },
        ] {
            evaluate(&out.model, &data, &mode, 6).unwrap();
        }
        let after: Vec<(String, Vec<f64>)> = out
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_f64_vec()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model: Model<f64> = tiny_model().build(&mut rng).unwrap();
        model.mark_bn_initialized();
        let empty = Dataset::<f64>::new("none", [1, 16, 16], vec![], vec![], 6).unwrap();
        assert!(matches!(
            evaluate(&model, &empty, &AggregationMode::Average, 4),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn trailing_singleton_chunks_are_merged() {
        let idx: Vec<usize> = (0..7).collect();
        let chunks = chunk_indices(&idx, 3);
        assert_eq!(chunks, vec![vec![0, 1, 2], vec![3, 4, 5, 6]]);
        let chunks = chunk_indices(&idx[..1], 3);
        assert_eq!(chunks, vec![vec![0]]);
        let chunks = chunk_indices(&idx[..6], 3);
        assert_eq!(chunks, vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }

    #[test]
    fn xor_trains_to_full_accuracy_quickly() {
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 4,
            lr0: 0.1,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 0.0,
            tau_schedule: TauSchedule::Anneal {
                start: 30.0,
                end: 1.0,
                epochs: 10,
            },
            dtype: Dtype::F64,
        };
        let out = train::<f64>(
            &ModelConfig::XorPerceptron(Default::default()),
            &DatasetConfig::Xor,
            &cfg,
            0,
            |_| Ok(()),
        )
        .unwrap();
        assert!(out.history.iter().any(|r| r.top1 == 1.0));
        assert_eq!(out.history.last().unwrap().top1, 1.0);
    }

    #[test]
    fn run_to_dir_writes_stream_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunConfig {
            spec_version: 1,
            model: tiny_model(),
            dataset: tiny_data(),
            train: tiny_train(2, 0.05),
            seed: 3,
            output_dir: None,
            cost: None,
        };
        let summary = run_to_dir(&run, dir.path()).unwrap();
        assert_eq!(summary.epochs, 2);
        let text = fs::read_to_string(&summary.metrics).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let rec: EpochRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec.epoch, 1);
        assert!(summary.checkpoint.exists());

        // byte-identical on a rerun with the same seed
        let dir2 = tempfile::tempdir().unwrap();
        let summary2 = run_to_dir(&run, dir2.path()).unwrap();
        assert_eq!(
            fs::read(&summary.metrics).unwrap(),
            fs::read(&summary2.metrics).unwrap()
        );
        assert_eq!(
            fs::read(&summary.checkpoint).unwrap(),
            fs::read(&summary2.checkpoint).unwrap()
        );
    }

    #[test]
    fn zero_eval_batch_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model: Model<f64> = tiny_model().build(&mut rng).unwrap();
        model.mark_bn_initialized();
        let data = tiny_data().test_split::<f64>().unwrap();
        assert!(matches!(
            evaluate(&model, &data, &AggregationMode::Average, 0),
            Err(Error::Config(_))
        ));
    }
}
