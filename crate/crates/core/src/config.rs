//! Run configuration as flat `section.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Every key has a default, unknown keys are errors, and parsing
//! reports every problem it finds rather than stopping at the first.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::adapter::FusionMode;
use crate::data::SyntheticSpec;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::sampling::{ConsensusMode, SamplerConfig};
use crate::training::{LossConfig, TrainConfig};

/// Conditioning variant: the unconditioned baseline or a fusion mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    None,
    Additive,
    Concat,
}

impl Conditioning {
    pub const ALL: [Conditioning; 3] = [Conditioning::None, Conditioning::Concat, Conditioning::Additive];
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conditioning::None => "none",
            Conditioning::Additive => "additive",
            Conditioning::Concat => "concat",
        })
    }
}

impl FromStr for Conditioning {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Conditioning::None),
            "additive" => Ok(Conditioning::Additive),
            "concat" => Ok(Conditioning::Concat),
            _ => Err(format!("expected none, additive or concat, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    /// Training file and optional validation file in the dataset format.
    Files { train: PathBuf, val: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// The usual 1e-4..0.02 range is sized for 1000 steps; at 100 steps it
/// leaves ᾱ_T near 0.37, far from the standard-normal start of sampling.
/// Scaling both ends by 1000/T keeps the per-run noise budget and brings ᾱ_T
/// below 1e-4.
impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Samples per case; the best by Dice is kept.
    pub best_of: usize,
    /// Images sampled together.
    pub batch: usize,
    pub export_masks: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            best_of: 4,
            batch: 25,
            export_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub resolution: usize,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            batch: 1,
            warmup: 5,
            iters: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub conditioning: Conditioning,
    pub train: TrainConfig,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub profile: ProfileConfig,
    pub data: DataSource,
    pub synthetic: SyntheticSpec,
    pub val_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub double_precision: bool,
    /// Seeds for `ablate`.
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            conditioning: Conditioning::Additive,
            train: TrainConfig::default(),
            checkpoint_every: 0,
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            profile: ProfileConfig::default(),
            data: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            val_size: 50,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            double_precision: false,
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

/// One configuration problem, tied to the key that caused it when known.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn new(key: Option<&str>, line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            key: key.map(str::to_string),
            line,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "{k}: ")?;
        }
        f.write_str(&self.message)
    }
}

fn parse_value<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_value(s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Every key in serialization order.
pub const KEYS: &[&str] = &[
    "run.seed",
    "run.out_dir",
    "run.precision",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "model.classes",
    "model.conditioning",
    "adapter.image_channels",
    "adapter.dims",
    "adapter.strides",
    "adapter.reduction_ratios",
    "adapter.heads",
    "adapter.depths",
    "adapter.mlp_ratio",
    "adapter.time_dim",
    "denoiser.stem_channels",
    "denoiser.widths",
    "denoiser.time_dim",
    "loss.lambda_dice",
    "loss.lambda_ce",
    "loss.smooth",
    "optim.lr",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.clip",
    "train.epochs",
    "train.batch_size",
    "train.checkpoint_every",
    "sample.consensus",
    "sample.k",
    "sample.stride",
    "eval.best_of",
    "eval.batch",
    "eval.export_masks",
    "data.source",
    "data.path",
    "data.val_path",
    "data.train_size",
    "data.val_size",
    "data.height",
    "data.width",
    "data.rare_rate",
    "data.seed",
    "profile.resolution",
    "profile.batch",
    "profile.warmup",
    "profile.iters",
    "ablate.seeds",
];

impl RunConfig {
    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    /// Model configuration with the conditioning variant applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        match self.conditioning {
            Conditioning::None => m.conditioned = false,
            Conditioning::Additive => {
                m.conditioned = true;
                m.adapter.fusion_mode = FusionMode::Additive;
            }
            Conditioning::Concat => {
                m.conditioned = true;
                m.adapter.fusion_mode = FusionMode::Concat;
            }
        }
        m
    }

    /// Current value of `key` in its textual form.
    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.model.adapter;
        let d = &self.model.denoiser;
        let o = &self.train.optim;
        Some(match key {
            "run.seed" => self.seed.to_string(),
            "run.out_dir" => self.out_dir.display().to_string(),
            "run.precision" => if self.double_precision { "f64" } else { "f32" }.to_string(),
            "schedule.steps" => self.schedule.steps.to_string(),
            "schedule.beta_start" => self.schedule.beta_start.to_string(),
            "schedule.beta_end" => self.schedule.beta_end.to_string(),
            "model.classes" => d.classes.to_string(),
            "model.conditioning" => self.conditioning.to_string(),
            "adapter.image_channels" => a.image_channels.to_string(),
            "adapter.dims" => join(&a.stage_dims),
            "adapter.strides" => join(&a.stage_strides),
            "adapter.reduction_ratios" => join(&a.reduction_ratios),
            "adapter.heads" => join(&a.num_heads),
            "adapter.depths" => join(&a.depths),
            "adapter.mlp_ratio" => a.mlp_ratio.to_string(),
            "adapter.time_dim" => a.time_dim.to_string(),
            "denoiser.stem_channels" => d.stem_channels.to_string(),
            "denoiser.widths" => join(&d.widths),
            "denoiser.time_dim" => d.time_dim.to_string(),
            "loss.lambda_dice" => self.train.loss.lambda_dice.to_string(),
            "loss.lambda_ce" => self.train.loss.lambda_ce.to_string(),
            "loss.smooth" => self.train.loss.smooth.to_string(),
            "optim.lr" => o.lr.to_string(),
            "optim.weight_decay" => o.weight_decay.to_string(),
            "optim.beta1" => o.beta1.to_string(),
            "optim.beta2" => o.beta2.to_string(),
            "optim.eps" => o.eps.to_string(),
            "optim.clip" => o.max_grad_norm.map_or("off".to_string(), |c| c.to_string()),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "sample.consensus" => self.sampler.consensus.mode.to_string(),
            "sample.k" => self.sampler.consensus.k.to_string(),
            "sample.stride" => self.sampler.stride.to_string(),
            "eval.best_of" => self.eval.best_of.to_string(),
            "eval.batch" => self.eval.batch.to_string(),
            "eval.export_masks" => self.eval.export_masks.to_string(),
            "data.source" => match &self.data {
                DataSource::Synthetic => "synthetic",
                DataSource::Files { .. } => "files",
            }
            .to_string(),
            "data.path" => match &self.data {
                DataSource::Files { train, .. } => train.display().to_string(),
                DataSource::Synthetic => String::new(),
            },
            "data.val_path" => match &self.data {
                DataSource::Files { val: Some(v), .. } => v.display().to_string(),
                _ => String::new(),
            },
            "data.train_size" => self.synthetic.n.to_string(),
            "data.val_size" => self.val_size.to_string(),
            "data.height" => self.synthetic.height.to_string(),
            "data.width" => self.synthetic.width.to_string(),
            "data.rare_rate" => self.synthetic.rare_rate.to_string(),
            "data.seed" => self.synthetic.seed.to_string(),
            "profile.resolution" => self.profile.resolution.to_string(),
            "profile.batch" => self.profile.batch.to_string(),
            "profile.warmup" => self.profile.warmup.to_string(),
            "profile.iters" => self.profile.iters.to_string(),
            "ablate.seeds" => join(&self.ablate_seeds),
            _ => return None,
        })
    }

    /// Sets one key from text. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let a = &mut self.model.adapter;
        let d = &mut self.model.denoiser;
        let o = &mut self.train.optim;
        match key {
            "run.seed" => self.seed = parse_value(v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.precision" => {
                self.double_precision = match v {
                    "f32" => false,
                    "f64" => true,
                    _ => return Err(format!("expected f32 or f64, got {v:?}")),
                }
            }
            "schedule.steps" => self.schedule.steps = parse_value(v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse_value(v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse_value(v)?,
            "model.classes" => {
                let k: usize = parse_value(v)?;
                d.classes = k;
                a.mask_channels = k;
                self.synthetic.classes = k;
            }
            "model.conditioning" => self.conditioning = v.parse()?,
            "adapter.image_channels" => a.image_channels = parse_value(v)?,
            "adapter.dims" => a.stage_dims = parse_list(v)?,
            "adapter.strides" => {
                a.stage_strides = parse_list(v)?;
                d.strides = a.stage_strides.clone();
            }
            "adapter.reduction_ratios" => a.reduction_ratios = parse_list(v)?,
            "adapter.heads" => a.num_heads = parse_list(v)?,
            "adapter.depths" => a.depths = parse_list(v)?,
            "adapter.mlp_ratio" => a.mlp_ratio = parse_value(v)?,
            "adapter.time_dim" => a.time_dim = parse_value(v)?,
            "denoiser.stem_channels" => d.stem_channels = parse_value(v)?,
            "denoiser.widths" => d.widths = parse_list(v)?,
            "denoiser.time_dim" => d.time_dim = parse_value(v)?,
            "loss.lambda_dice" => self.train.loss.lambda_dice = parse_value(v)?,
            "loss.lambda_ce" => self.train.loss.lambda_ce = parse_value(v)?,
            "loss.smooth" => self.train.loss.smooth = parse_value(v)?,
            "optim.lr" => o.lr = parse_value(v)?,
            "optim.weight_decay" => o.weight_decay = parse_value(v)?,
            "optim.beta1" => o.beta1 = parse_value(v)?,
            "optim.beta2" => o.beta2 = parse_value(v)?,
            "optim.eps" => o.eps = parse_value(v)?,
            "optim.clip" => o.max_grad_norm = if v == "off" { None } else { Some(parse_value(v)?) },
            "train.epochs" => self.train.epochs = parse_value(v)?,
            "train.batch_size" => self.train.batch_size = parse_value(v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_value(v)?,
            "sample.consensus" => self.sampler.consensus.mode = v.parse::<ConsensusMode>().map_err(|e| e.to_string())?,
            "sample.k" => self.sampler.consensus.k = parse_value(v)?,
            "sample.stride" => self.sampler.stride = parse_value(v)?,
            "eval.best_of" => self.eval.best_of = parse_value(v)?,
            "eval.batch" => self.eval.batch = parse_value(v)?,
            "eval.export_masks" => self.eval.export_masks = parse_value(v)?,
            "data.source" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    "files" => match &self.data {
                        DataSource::Files { .. } => self.data.clone(),
                        DataSource::Synthetic => DataSource::Files {
                            train: PathBuf::new(),
                            val: None,
                        },
                    },
                    _ => return Err(format!("expected synthetic or files, got {v:?}")),
                }
            }
            "data.path" => {
                let val = match &self.data {
                    DataSource::Files { val, .. } => val.clone(),
                    DataSource::Synthetic => None,
                };
                self.data = if v.is_empty() {
                    DataSource::Synthetic
                } else {
                    DataSource::Files {
                        train: PathBuf::from(v),
                        val,
                    }
                };
            }
            "data.val_path" => {
                if let DataSource::Files { val, .. } = &mut self.data {
                    *val = if v.is_empty() { None } else { Some(PathBuf::from(v)) };
                } else if !v.is_empty() {
                    return Err("data.val_path needs data.path to be set first".into());
                }
            }
            "data.train_size" => self.synthetic.n = parse_value(v)?,
            "data.val_size" => self.val_size = parse_value(v)?,
            "data.height" => self.synthetic.height = parse_value(v)?,
            "data.width" => self.synthetic.width = parse_value(v)?,
            "data.rare_rate" => self.synthetic.rare_rate = parse_value(v)?,
            "data.seed" => self.synthetic.seed = parse_value(v)?,
            "profile.resolution" => self.profile.resolution = parse_value(v)?,
            "profile.batch" => self.profile.batch = parse_value(v)?,
            "profile.warmup" => self.profile.warmup = parse_value(v)?,
            "profile.iters" => self.profile.iters = parse_value(v)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies `key=value` pairs; collects every failure.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Vec<Diagnostic> {
        pairs
            .into_iter()
            .filter_map(|(k, v)| self.set(k.trim(), v).err().map(|m| Diagnostic::new(Some(k.trim()), None, m)))
            .collect()
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<RunConfig, Vec<Diagnostic>> {
        let (cfg, mut diags) = Self::parse_unvalidated(text);
        diags.extend(cfg.validate());
        if diags.is_empty() {
            Ok(cfg)
        } else {
            Err(diags)
        }
    }

    /// Parses config text without the final validation pass, so callers can
    /// apply further overrides before validating.
    pub fn parse_unvalidated(text: &str) -> (RunConfig, Vec<Diagnostic>) {
        let mut cfg = RunConfig::default();
        let mut diags = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                diags.push(Diagnostic::new(None, Some(i + 1), format!("expected key = value, got {line:?}")));
                continue;
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                diags.push(Diagnostic::new(Some(k), Some(i + 1), "duplicate key"));
                continue;
            }
            if let Err(m) = cfg.set(k, v) {
                diags.push(Diagnostic::new(Some(k), Some(i + 1), m));
            }
        }
        (cfg, diags)
    }

    /// Every problem with the current values; empty when valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out: Vec<Diagnostic> = Vec::new();
        // messages lead with the offending key when there is one
        let mut push = |m: String| {
            let key = m.split_whitespace().next().filter(|k| KEYS.contains(k));
            out.push(Diagnostic::new(key, None, m.clone()))
        };
        let s = &self.schedule;
        if s.steps == 0 {
            push("schedule.steps must be >= 1".into());
        }
        if !(s.beta_start > 0.0 && s.beta_end < 1.0 && s.beta_start <= s.beta_end) {
            push(format!(
                "schedule betas must satisfy 0 < beta_start <= beta_end < 1, got {} and {}",
                s.beta_start, s.beta_end
            ));
        }
        self.model_config().problems().into_iter().for_each(&mut push);
        self.train.problems().into_iter().for_each(&mut push);
        self.sampler.problems().into_iter().for_each(&mut push);
        if self.eval.best_of == 0 {
            push("eval.best_of must be >= 1".into());
        }
        if self.eval.batch == 0 {
            push("eval.batch must be >= 1".into());
        }
        if self.profile.iters == 0 {
            push("profile.iters must be >= 1".into());
        }
        if self.profile.batch == 0 {
            push("profile.batch must be >= 1".into());
        }
        let total: usize = self.model.adapter.stage_strides.iter().product::<usize>().max(1);
        if self.profile.resolution == 0 || self.profile.resolution % total != 0 {
            push(format!("profile.resolution {} must be a positive multiple of {total}", self.profile.resolution));
        }
        if self.ablate_seeds.is_empty() {
            push("ablate.seeds must list at least one seed".into());
        }
        match &self.data {
            DataSource::Synthetic => {
                let spec = SyntheticSpec {
                    multiple_of: total,
                    ..self.synthetic.clone()
                };
                spec.problems().into_iter().for_each(&mut push);
                if self.synthetic.n == 0 {
                    push("data.train_size must be >= 1".into());
                }
                if self.model.adapter.image_channels != 1 {
                    push("synthetic data has 1 image channel; set adapter.image_channels = 1".into());
                }
            }
            DataSource::Files { train, val } => {
                if train.as_os_str().is_empty() {
                    push("data.path is required when data.source = files".into());
                } else if !train.is_file() {
                    push(format!("data.path {} does not exist", train.display()));
                }
                if let Some(v) = val {
                    if !v.is_file() {
                        push(format!("data.val_path {} does not exist", v.display()));
                    }
                }
            }
        }
        out
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        self.render(&[])
    }

    /// Text form without machine-local keys (the output directory), stored in
    /// checkpoints so identical runs in different directories match.
    pub fn snapshot_text(&self) -> String {
        self.render(&["run.out_dir"])
    }

    fn render(&self, skip: &[&str]) -> String {
        let mut s = String::new();
        let mut section = "";
        for key in KEYS {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = sec;
            }
            if skip.contains(key) {
                continue;
            }
            let value = self.get(key).expect("every listed key has a value");
            if value.is_empty() && matches!(*key, "data.path" | "data.val_path") {
                continue;
            }
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn optim(&self) -> &AdamWConfig {
        &self.train.optim
    }

    pub fn loss(&self) -> &LossConfig {
        &self.train.loss
    }
}
