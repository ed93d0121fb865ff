//! Reverse diffusion, consensus over intermediate predictions, best-of-n.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mask;
use crate::metrics::{confusion_labels, mean_foreground_dice, ConfusionCounts};
use crate::model::CondDiffModel;
use crate::nn;
use crate::params::{seeded_rng, standard_normal};
use crate::schedule::{reverse_step_between, NoiseSchedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusMode {
    #[default]
    MeanLastK,
    MajorityVote,
}

impl fmt::Display for ConsensusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsensusMode::MeanLastK => "mean-last-k",
            ConsensusMode::MajorityVote => "majority-vote",
        })
    }
}

impl FromStr for ConsensusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-last-k" => Ok(ConsensusMode::MeanLastK),
            "majority-vote" => Ok(ConsensusMode::MajorityVote),
            _ => Err(Error::Config(format!("unknown consensus mode {s:?} (mean-last-k, majority-vote)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub mode: ConsensusMode,
    /// Window size; clamped to the trace length.
    pub k: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            mode: ConsensusMode::MeanLastK,
            k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub consensus: ConsensusConfig,
    /// Reverse-step stride; 1 visits every timestep.
    pub stride: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            consensus: ConsensusConfig::default(),
            stride: 1,
        }
    }
}

impl SamplerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.consensus.k == 0 {
            out.push("consensus.k must be >= 1".into());
        }
        if self.stride == 0 {
            out.push("sample.stride must be >= 1".into());
        }
        out
    }
}

/// Intermediate predictions, one per reverse step, stored as class logits.
/// The matching clean-mask estimate is `2·softmax(logits) − 1`.
#[derive(Clone, Debug, Default)]
pub struct PredictionTrace {
    pub entries: Vec<Tensor>,
}

impl PredictionTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn x0_hat(&self, i: usize) -> Result<Tensor> {
        let p = nn::softmax(&self.entries[i], 1)?;
        Ok(p.affine(2.0, -1.0)?)
    }
}

/// Per-pixel labels from the last `k` entries of `trace`.
pub fn consensus_labels(trace: &[Tensor], cfg: &ConsensusConfig) -> Result<Vec<Vec<u8>>> {
    let Some(last) = trace.last() else {
        return Err(Error::Invalid("consensus of an empty trace".into()));
    };
    let dims = last.dims().to_vec();
    if trace.iter().any(|t| t.dims() != dims.as_slice()) {
        return shape_err("trace entries differ in shape".to_string());
    }
    let k = cfg.k.clamp(1, trace.len());
    let window = &trace[trace.len() - k..];
    match cfg.mode {
        ConsensusMode::MeanLastK => {
            let mut acc = nn::softmax(&window[0].to_dtype(DType::F64)?, 1)?;
            for t in &window[1..] {
                acc = (acc + nn::softmax(&t.to_dtype(DType::F64)?, 1)?)?;
            }
            mask::argmax_labels(&(acc / k as f64)?)
        }
        ConsensusMode::MajorityVote => {
            let (b, classes, h, w) = last.dims4()?;
            let mut votes = vec![vec![0u32; classes * h * w]; b];
            for t in window {
                for (i, labels) in mask::argmax_labels(t)?.iter().enumerate() {
                    for (p, &l) in labels.iter().enumerate() {
                        votes[i][l as usize * h * w + p] += 1;
                    }
                }
            }
            Ok(votes
                .iter()
                .map(|v| {
                    (0..h * w)
                        .map(|p| {
                            let mut best = 0;
                            for c in 1..classes {
                                if v[c * h * w + p] > v[best * h * w + p] {
                                    best = c;
                                }
                            }
                            best as u8
                        })
                        .collect()
                })
                .collect())
        }
    }
}

/// Consensus as a `{0,1}` one-hot mask of the trace's shape.
pub fn consensus(trace: &PredictionTrace, cfg: &ConsensusConfig) -> Result<Tensor> {
    let labels = consensus_labels(&trace.entries, cfg)?;
    let last = trace.entries.last().expect("checked non-empty");
    let (_, k, h, w) = last.dims4()?;
    mask::one_hot(&labels, k, h, w, last.dtype(), last.device())
}

/// Runs the reverse chain from pure noise, calling `visit` with each step's logits.
fn reverse_chain(
    model: &CondDiffModel,
    image: &Tensor,
    schedule: &NoiseSchedule,
    stride: usize,
    rng: &mut ChaCha8Rng,
    mut visit: impl FnMut(Tensor),
) -> Result<()> {
    let (b, _, h, w) = image.dims4()?;
    let classes = model.config().denoiser.classes;
    let dtype = model.dtype();
    let device = model.device().clone();
    let image = image.to_dtype(dtype)?;
    let mut x = standard_normal(rng, &[b, classes, h, w], dtype, &device)?;
    let steps = schedule.sampling_timesteps(stride);
    for (i, &t) in steps.iter().enumerate() {
        let s = steps.get(i + 1).copied().unwrap_or(0);
        let out = model.predict(&image, &x, &vec![t; b])?;
        let x0_hat = out.x0_hat.detach();
        let noise = if s > 0 {
            standard_normal(rng, x.dims(), dtype, &device)?
        } else {
            x.zeros_like()?
        };
        x = reverse_step_between(&x, &x0_hat, t, s, schedule, &noise)?.detach();
        visit(out.logits.detach());
    }
    Ok(())
}

/// Samples masks for a batch of images; returns the consensus one-hot mask
/// and the full trace.
pub fn sample(
    model: &CondDiffModel,
    image: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    cfg: &SamplerConfig,
) -> Result<(Tensor, PredictionTrace)> {
    let mut trace = PredictionTrace::default();
    reverse_chain(model, image, schedule, cfg.stride, rng, |l| trace.entries.push(l))?;
    let mask = consensus(&trace, &cfg.consensus)?;
    Ok((mask, trace))
}

/// Like [`sample`] but keeps only the consensus window; returns labels.
pub fn sample_labels(
    model: &CondDiffModel,
    image: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<u8>>> {
    let keep = cfg.consensus.k.max(1);
    let mut window = VecDeque::with_capacity(keep + 1);
    reverse_chain(model, image, schedule, cfg.stride, rng, |l| {
        window.push_back(l);
        if window.len() > keep {
            window.pop_front();
        }
    })?;
    consensus_labels(&Vec::from(window), &cfg.consensus)
}

#[derive(Clone, Debug)]
pub struct BestOfN {
    /// Best label map per image.
    pub labels: Vec<Vec<u8>>,
    /// Mean-foreground Dice of the best sample per image.
    pub dice: Vec<f64>,
    /// `per_stream[j][i]`: Dice of stream `j` on image `i`.
    pub per_stream: Vec<Vec<f64>>,
    /// Confusion counts of the best sample per image.
    pub counts: Vec<ConfusionCounts>,
}

fn select_best(per_stream: &[Vec<f64>], labels: &[Vec<Vec<u8>>], counts: &[Vec<ConfusionCounts>]) -> BestOfN {
    let images = per_stream.first().map_or(0, |s| s.len());
    let mut out = BestOfN {
        labels: Vec::with_capacity(images),
        dice: Vec::with_capacity(images),
        per_stream: per_stream.to_vec(),
        counts: Vec::with_capacity(images),
    };
    for i in 0..images {
        // strict improvement only, so the earliest stream wins ties
        let mut best = 0;
        for j in 1..per_stream.len() {
            if per_stream[j][i] > per_stream[best][i] {
                best = j;
            }
        }
        out.labels.push(labels[best][i].clone());
        out.dice.push(per_stream[best][i]);
        out.counts.push(counts[best][i].clone());
    }
    out
}

/// Full per-stream results of a best-of-n evaluation.
#[derive(Clone, Debug)]
pub struct StreamResults {
    pub labels: Vec<Vec<Vec<u8>>>,
    pub counts: Vec<Vec<ConfusionCounts>>,
    pub dice: Vec<Vec<f64>>,
}

impl StreamResults {
    /// Best over the first `n` streams; `n = 1` is the plain first sample.
    pub fn best_of(&self, n: usize) -> Result<BestOfN> {
        if n == 0 || n > self.dice.len() {
            return Err(Error::Invalid(format!("best of {n} from {} streams", self.dice.len())));
        }
        Ok(select_best(&self.dice[..n], &self.labels[..n], &self.counts[..n]))
    }
}

/// Draws `n` independent samples per image, stream `j` seeded with `seed + j`,
/// and scores each against `gt` by mean-foreground Dice. Images are processed
/// in batches of `batch`.
pub fn sample_streams(
    model: &CondDiffModel,
    images: &Tensor,
    gt: &[Vec<u8>],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
    batch: usize,
) -> Result<StreamResults> {
    if n == 0 {
        return Err(Error::Invalid("best_of_n needs n >= 1".into()));
    }
    let total = images.dim(0)?;
    if gt.len() != total {
        return shape_err(format!("{} ground-truth masks for {total} images", gt.len()));
    }
    let classes = model.config().denoiser.classes;
    let batch = batch.max(1);
    let mut out = StreamResults {
        labels: Vec::with_capacity(n),
        counts: Vec::with_capacity(n),
        dice: Vec::with_capacity(n),
    };
    for j in 0..n {
        let mut rng = seeded_rng(seed.wrapping_add(j as u64));
        let mut labels = Vec::with_capacity(total);
        for start in (0..total).step_by(batch) {
            let len = batch.min(total - start);
            labels.extend(sample_labels(model, &images.narrow(0, start, len)?, schedule, &mut rng, cfg)?);
        }
        let counts = labels
            .iter()
            .zip(gt)
            .map(|(p, g)| confusion_labels(p, g, classes))
            .collect::<Result<Vec<_>>>()?;
        out.dice.push(counts.iter().map(mean_foreground_dice).collect());
        out.labels.push(labels);
        out.counts.push(counts);
    }
    Ok(out)
}

/// Best of `n` samples per image by mean-foreground Dice against `gt`.
pub fn best_of_n(
    model: &CondDiffModel,
    images: &Tensor,
    gt: &[Vec<u8>],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<BestOfN> {
    let total = images.dim(0)?;
    sample_streams(model, images, gt, schedule, cfg, n, seed, total)?.best_of(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn logits(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_slice(v, (1, v.len() / (h * w), h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn two_entry_mean_prefers_background() {
        // class-1 probabilities 0.6 then 0.2 on a single pixel
        let a = logits(&[0.4f64.ln(), 0.6f64.ln()], 1, 1);
        let b = logits(&[0.8f64.ln(), 0.2f64.ln()], 1, 1);
        let cfg = ConsensusConfig { mode: ConsensusMode::MeanLastK, k: 2 };
        assert_eq!(consensus_labels(&[a.clone(), b.clone()], &cfg).unwrap(), vec![vec![0]]);
        let k1 = ConsensusConfig { k: 1, ..cfg };
        assert_eq!(consensus_labels(&[b, a], &k1).unwrap(), vec![vec![1]]);
    }

    #[test]
    fn majority_tie_goes_to_background() {
        let a = logits(&[0.0, 1.0], 1, 1);
        let b = logits(&[1.0, 0.0], 1, 1);
        let cfg = ConsensusConfig { mode: ConsensusMode::MajorityVote, k: 2 };
        assert_eq!(consensus_labels(&[a, b], &cfg).unwrap(), vec![vec![0]]);
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(consensus_labels(&[], &ConsensusConfig::default()).is_err());
    }

    #[test]
    fn window_clamps_to_trace_length() {
        let a = logits(&[0.0, 2.0, 1.0, 0.0], 1, 2);
        let cfg = ConsensusConfig { mode: ConsensusMode::MeanLastK, k: 50 };
        assert_eq!(consensus_labels(&[a], &cfg).unwrap(), vec![vec![1, 0]]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [ConsensusMode::MeanLastK, ConsensusMode::MajorityVote] {
            assert_eq!(m.to_string().parse::<ConsensusMode>().unwrap(), m);
        }
    }
}
