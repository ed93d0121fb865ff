//! Hybrid Dice + cross-entropy loss, the weighted sampler and the training loop.

use std::io::Write;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::mask;
use crate::model::CondDiffModel;
use crate::nn;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{seeded_rng, standard_normal};
use crate::schedule::{q_sample_batch, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    /// Smoothing added to numerator and denominator of the soft Dice.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dice: 0.5,
            lambda_ce: 0.5,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda_dice >= 0.0) || !(self.lambda_ce >= 0.0) {
            out.push("loss weights must be >= 0".into());
        }
        if self.lambda_dice + self.lambda_ce == 0.0 {
            out.push("loss weights must not both be zero".into());
        }
        if !(self.smooth >= 0.0) {
            out.push(format!("loss.smooth must be >= 0, got {}", self.smooth));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub dice: f64,
    pub ce: f64,
}

/// `λ_d · (1 − mean_c softDice_c) + λ_ce · CE` over class logits `[B, K, H, W]`.
///
/// `x0` is the clean target in the diffusion domain; it must map back to an
/// exact one-hot mask. Dice sums run over the whole batch.
pub fn hybrid_loss(logits: &Tensor, x0: &Tensor, cfg: &LossConfig) -> Result<LossParts> {
    if logits.dims() != x0.dims() {
        return shape_err(format!("logits {:?} vs target {:?}", logits.dims(), x0.dims()));
    }
    let (b, _, h, w) = logits.dims4()?;
    let y = mask::from_diffusion_domain(x0)?;
    mask::check_one_hot(&y)?;
    let y = y.detach();

    let probs = nn::softmax(logits, 1)?;
    let sum_bhw = |t: &Tensor| -> candle_core::Result<Tensor> { t.sum(3)?.sum(2)?.sum(0) };
    let inter = sum_bhw(&(&probs * &y)?)?;
    let denom = (sum_bhw(&probs)? + sum_bhw(&y)?)?;
    let per_class = ((inter * 2.0)? + cfg.smooth)?.div(&(denom + cfg.smooth)?)?;
    let dice_loss = per_class.mean_all()?.affine(-1.0, 1.0)?;

    let logp = nn::log_softmax(logits, 1)?;
    let ce = ((&logp * &y)?.sum_all()? * (-1.0 / (b * h * w) as f64))?;

    let total = ((&dice_loss * cfg.lambda_dice)? + (&ce * cfg.lambda_ce)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    Ok(LossParts {
        dice: scalar(&dice_loss)?,
        ce: scalar(&ce)?,
        total,
    })
}

/// Per-sample sampling probabilities from inverse foreground frequencies.
///
/// A sample's raw weight is the sum of `1 / freq_c` over the foreground
/// classes it contains. Samples with no foreground get `ε = 0.01 / n` and the
/// rest share the remaining mass in proportion to their raw weights.
pub fn sample_weights(class_counts: &[u64], presence: &[Vec<bool>]) -> Result<Vec<f64>> {
    let n = presence.len();
    if n == 0 {
        return Err(Error::Invalid("sample weights of an empty dataset".into()));
    }
    let total: u64 = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("dataset has no labelled pixels".into()));
    }
    let mut raw = vec![0.0; n];
    for (i, p) in presence.iter().enumerate() {
        if p.len() != class_counts.len() {
            return shape_err(format!("sample {i} has presence for {} classes, expected {}", p.len(), class_counts.len()));
        }
        for c in 1..p.len() {
            if p[c] {
                if class_counts[c] == 0 {
                    return Err(Error::Invalid(format!("class {c} is present but has zero pixel count")));
                }
                raw[i] += total as f64 / class_counts[c] as f64;
            }
        }
    }
    let empty = raw.iter().filter(|r| **r == 0.0).count();
    if empty == n {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let floor = 1e-2 / n as f64;
    let mass = 1.0 - empty as f64 * floor;
    let sum: f64 = raw.iter().sum();
    Ok(raw.iter().map(|r| if *r == 0.0 { floor } else { mass * r / sum }).collect())
}

/// Draws sample indices with replacement according to [`sample_weights`].
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    index: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let index = WeightedIndex::new(weights).map_err(|e| Error::Invalid(format!("sampler: {e}")))?;
        Ok(Self { index })
    }

    pub fn for_dataset(ds: &Dataset) -> Result<Self> {
        Self::new(&sample_weights(&ds.class_counts(), &ds.presence())?)
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        self.index.sample(rng)
    }
}

/// Timesteps drawn uniformly from `1..=steps`, one per batch item.
pub fn draw_timesteps(rng: &mut ChaCha8Rng, batch: usize, steps: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=steps)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.loss.problems();
        out.extend(self.optim.problems());
        if self.batch_size == 0 {
            out.push("train.batch_size must be >= 1".into());
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLoss {
    pub count: u64,
    pub mean: f64,
    pub last: f64,
}

impl RunningLoss {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.mean += (v - self.mean) / self.count as f64;
        self.last = v;
    }
}

/// Model, optimizer and the random stream that drives timesteps, noise and batches.
pub struct TrainState {
    pub model: CondDiffModel,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub loss: RunningLoss,
}

impl TrainState {
    pub fn new(model: CondDiffModel, optim: AdamWConfig, seed: u64) -> Self {
        Self {
            model,
            optimizer: AdamW::new(optim),
            step: 0,
            // offset so the data stream differs from the weight-init stream
            rng: seeded_rng(seed ^ 0xD1FF_5EED),
            loss: RunningLoss::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub grad_norm: f64,
    pub timesteps: Vec<usize>,
}

/// One optimisation step on a batch of images and `{0,1}` one-hot masks.
pub fn train_step(
    state: &mut TrainState,
    image: &Tensor,
    mask_onehot: &Tensor,
    schedule: &NoiseSchedule,
    loss_cfg: &LossConfig,
) -> Result<StepRecord> {
    let b = mask_onehot.dim(0)?;
    if image.dim(0)? != b {
        return shape_err(format!("{} images for {b} masks", image.dim(0)?));
    }
    let dtype = state.model.dtype();
    let device = state.model.device().clone();
    let x0 = mask::to_diffusion_domain(&mask_onehot.to_dtype(dtype)?)?;
    let image = image.to_dtype(dtype)?;
    let ts = draw_timesteps(&mut state.rng, b, schedule.steps());
    let eps = standard_normal(&mut state.rng, x0.dims(), dtype, &device)?;
    let x_t = q_sample_batch(&x0, &ts, &eps, schedule)?;
    let out = state.model.predict(&image, &x_t, &ts)?;
    let parts = hybrid_loss(&out.logits, &x0, loss_cfg)?;
    let loss = parts.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    state.step += 1;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            snapshot: format!("timesteps {ts:?}, dice {}, ce {}", parts.dice, parts.ce),
        });
    }
    let grads = parts.total.backward()?;
    let grad_norm = state.optimizer.step(state.model.params(), &grads)?;
    state.loss.push(loss);
    Ok(StepRecord {
        step: state.step,
        loss,
        dice_loss: parts.dice,
        ce_loss: parts.ce,
        grad_norm,
        timesteps: ts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_dice_loss: f64,
    pub mean_ce_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step {
        epoch: usize,
        #[serde(flatten)]
        record: &'a StepRecord,
        lr: f64,
        wall_s: f64,
    },
    Epoch(&'a EpochRecord),
}

/// Trains for `cfg.epochs` epochs of `len(train)` weighted draws each.
///
/// Every step and epoch is appended to `log` as one JSON line; `on_epoch`
/// runs after each epoch (checkpointing, validation).
pub fn fit(
    state: &mut TrainState,
    train: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let sampler = WeightedSampler::for_dataset(train)?;
    let dtype = state.model.dtype();
    let device = state.model.device().clone();
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let draws: Vec<usize> = (0..train.len()).map(|_| sampler.draw(&mut state.rng)).collect();
        let (mut sum, mut sum_d, mut sum_ce, mut n) = (0.0, 0.0, 0.0, 0u64);
        for chunk in draws.chunks(cfg.batch_size) {
            let (image, onehot) = train.batch(chunk, dtype, &device)?;
            let rec = train_step(state, &image, &onehot, schedule, &cfg.loss)?;
            sum += rec.loss;
            sum_d += rec.dice_loss;
            sum_ce += rec.ce_loss;
            n += 1;
            let line = LogLine::Step {
                epoch,
                record: &rec,
                lr: cfg.optim.lr,
                wall_s: started.elapsed().as_secs_f64(),
            };
            writeln!(log, "{}", serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        let n_f = n.max(1) as f64;
        let record = EpochRecord {
            epoch,
            steps: state.step,
            mean_loss: sum / n_f,
            mean_dice_loss: sum_d / n_f,
            mean_ce_loss: sum_ce / n_f,
            lr: cfg.optim.lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&LogLine::Epoch(&record)).map_err(|e| Error::Format(e.to_string()))?)?;
        on_epoch(state, &record)?;
        records.push(record);
    }
    Ok(records)
}
