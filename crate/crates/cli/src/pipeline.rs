//! Train/evaluate building blocks shared by the commands and the test suites.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::Device;
use serde::Serialize;

use condiff::checkpoint::Checkpoint;
use condiff::config::{Conditioning, DataSource, RunConfig};
use condiff::data::{load_dataset, synthetic_split, Dataset, SyntheticSpec};
use condiff::metrics::{aggregate, Aggregation, MetricReport};
use condiff::model::CondDiffModel;
use condiff::sampling::{sample_streams, StreamResults};
use condiff::schedule::{make_schedule, NoiseSchedule};
use condiff::training::{fit, EpochRecord, TrainState};
use condiff::{Error, Result};

pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
}

/// Synthetic split or the configured files; without a validation file the
/// training set doubles as validation set.
pub fn load_data(cfg: &RunConfig) -> Result<Datasets> {
    match &cfg.data {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                multiple_of: cfg.model.adapter.stage_strides.iter().product(),
                ..cfg.synthetic.clone()
            };
            let (train, val) = synthetic_split(&spec, cfg.val_size)?;
            Ok(Datasets { train, val })
        }
        DataSource::Files { train, val } => {
            let train = load_dataset(train)?;
            let val = match val {
                Some(p) => load_dataset(p)?,
                None => train.clone(),
            };
            check_dataset(cfg, &train)?;
            check_dataset(cfg, &val)?;
            Ok(Datasets { train, val })
        }
    }
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.classes != cfg.model.denoiser.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but model.classes = {}",
            ds.classes, cfg.model.denoiser.classes
        )));
    }
    if ds.channels != cfg.model.adapter.image_channels {
        return Err(Error::Config(format!(
            "dataset has {} image channels but adapter.image_channels = {}",
            ds.channels, cfg.model.adapter.image_channels
        )));
    }
    cfg.model.adapter.check_input(ds.height, ds.width)
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

pub fn build_model(cfg: &RunConfig) -> Result<CondDiffModel> {
    CondDiffModel::new(&cfg.model_config(), cfg.seed, cfg.dtype(), &Device::Cpu)
}

/// Model with weights from a checkpoint; shapes must match `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<CondDiffModel> {
    let model = build_model(cfg)?;
    Checkpoint::load(path)?.apply(model.params())?;
    Ok(model)
}

pub fn checkpoint_of(cfg: &RunConfig, model: &CondDiffModel) -> Result<Checkpoint> {
    Checkpoint::from_store(model.params(), &cfg.snapshot_text())
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
}

/// Runs training. With an output directory the run log, periodic checkpoints
/// and the final `model.ckpt` are written there.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let schedule = schedule(cfg)?;
    let model = build_model(cfg)?;
    let mut state = TrainState::new(model, cfg.train.optim.clone(), cfg.seed);
    let mut log: Box<dyn Write> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Box::new(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => Box::new(std::io::sink()),
    };
    let every = cfg.checkpoint_every;
    let mut on_epoch = |st: &TrainState, rec: &EpochRecord| -> Result<()> {
        if let (Some(dir), true) = (out_dir, every > 0 && (rec.epoch + 1) % every.max(1) == 0) {
            checkpoint_of(cfg, &st.model)?.save(&dir.join(format!("epoch_{:04}.ckpt", rec.epoch + 1)))?;
        }
        Ok(())
    };
    let epochs = fit(&mut state, data, &schedule, &cfg.train_config(), &mut log, &mut on_epoch)?;
    log.flush()?;
    if let Some(dir) = out_dir {
        checkpoint_of(cfg, &state.model)?.save(&dir.join("model.ckpt"))?;
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    Ok(TrainOutcome { state, epochs })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProtocolReport {
    /// Samples drawn per case.
    pub n: usize,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub per_image_dice: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub protocols: Vec<ProtocolReport>,
    pub pooled: MetricReport,
}

impl EvalSummary {
    pub fn protocol(&self, n: usize) -> Option<&ProtocolReport> {
        self.protocols.iter().find(|p| p.n == n)
    }
}

/// Seed of sampling stream 0 during evaluation.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(17)
}

/// Samples `n` streams over the whole validation set.
pub fn sample_val(model: &CondDiffModel, cfg: &RunConfig, val: &Dataset, n: usize) -> Result<StreamResults> {
    let idx: Vec<usize> = (0..val.len()).collect();
    let (images, _) = val.batch(&idx, model.dtype(), model.device())?;
    let gt: Vec<Vec<u8>> = val.samples.iter().map(|s| s.mask.clone()).collect();
    sample_streams(model, &images, &gt, &schedule(cfg)?, &cfg.sampler, n, eval_seed(cfg), cfg.eval.batch)
}

/// Reports best-of-1 and best-of-n (when n > 1) from shared streams, so
/// best-of-1 is exactly the first stream of best-of-n.
pub fn summarize(streams: &StreamResults, n: usize) -> Result<EvalSummary> {
    let mut protocols = Vec::new();
    for m in if n > 1 { vec![1, n] } else { vec![1] } {
        let best = streams.best_of(m)?;
        protocols.push(ProtocolReport {
            n: m,
            metrics: aggregate(&best.counts, Aggregation::PerImage),
            per_image_dice: best.dice,
        });
    }
    let best = streams.best_of(n)?;
    Ok(EvalSummary {
        protocols,
        pooled: aggregate(&best.counts, Aggregation::Pooled),
    })
}

pub fn evaluate(model: &CondDiffModel, cfg: &RunConfig, val: &Dataset, n: usize) -> Result<(EvalSummary, StreamResults)> {
    let streams = sample_val(model, cfg, val, n)?;
    Ok((summarize(&streams, n)?, streams))
}

/// Scores the ground truth against itself; every metric is 1.
pub fn oracle_summary(val: &Dataset) -> Result<EvalSummary> {
    let labels: Vec<Vec<u8>> = val.samples.iter().map(|s| s.mask.clone()).collect();
    let counts = labels
        .iter()
        .map(|l| condiff::metrics::confusion_labels(l, l, val.classes))
        .collect::<Result<Vec<_>>>()?;
    let metrics = aggregate(&counts, Aggregation::PerImage);
    Ok(EvalSummary {
        protocols: vec![ProtocolReport {
            n: 1,
            per_image_dice: counts.iter().map(condiff::metrics::mean_foreground_dice).collect(),
            metrics,
        }],
        pooled: aggregate(&counts, Aggregation::Pooled),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Conditioning,
    pub seeds: Vec<u64>,
    pub dice_per_seed: Vec<f64>,
    pub iou_per_seed: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
}

/// Trains and evaluates one variant for one seed; returns (Dice, mIoU) of
/// the configured best-of protocol.
pub fn run_variant(base: &RunConfig, variant: Conditioning, seed: u64, data: &Datasets) -> Result<(f64, f64)> {
    let mut cfg = base.clone();
    cfg.conditioning = variant;
    cfg.seed = seed;
    let outcome = train(&cfg, &data.train, None)?;
    let (summary, _) = evaluate(&outcome.state.model, &cfg, &data.val, cfg.eval.best_of)?;
    let p = summary.protocol(cfg.eval.best_of).expect("requested protocol present");
    Ok((p.metrics.mean_dice, p.metrics.mean_iou))
}

pub fn ablation_row(variant: Conditioning, seeds: &[u64], scores: &[(f64, f64)]) -> AblationRow {
    let n = scores.len().max(1) as f64;
    AblationRow {
        variant,
        seeds: seeds.to_vec(),
        dice_per_seed: scores.iter().map(|s| s.0).collect(),
        iou_per_seed: scores.iter().map(|s| s.1).collect(),
        mean_dice: scores.iter().map(|s| s.0).sum::<f64>() / n,
        mean_iou: scores.iter().map(|s| s.1).sum::<f64>() / n,
    }
}

/// Rows none / concat / additive with F-1 and mIoU in percent.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("Variant  | F-1   | mIoU\n---------|-------|------\n");
    for r in rows {
        s.push_str(&format!("{:<8} | {:5.1} | {:5.1}\n", r.variant.to_string(), 100.0 * r.mean_dice, 100.0 * r.mean_iou));
    }
    s
}

/// Evaluation table: one row per protocol, per-class Dice after the means.
pub fn eval_table(summary: &EvalSummary) -> String {
    let mut s = String::new();
    let classes = summary.protocols.first().map_or(0, |p| p.metrics.dice_per_class.len());
    s.push_str("Protocol  | F-1   | mIoU  | median F-1");
    for c in 1..classes {
        s.push_str(&format!(" | Dice c{c}"));
    }
    s.push('\n');
    for p in &summary.protocols {
        s.push_str(&format!(
            "best-of-{} | {:5.1} | {:5.1} | {:10.1}",
            p.n,
            100.0 * p.metrics.mean_dice,
            100.0 * p.metrics.mean_iou,
            100.0 * p.metrics.median_dice
        ));
        for c in 1..classes {
            s.push_str(&format!(" | {:7.1}", 100.0 * p.metrics.dice_per_class[c]));
        }
        s.push('\n');
    }
    s
}
