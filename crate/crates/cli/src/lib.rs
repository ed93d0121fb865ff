//! Command-line front end: `condiff train|sample|eval|profile|ablate|gen-data`.
//!
//! Exit codes: 0 on success, 2 when the configuration or arguments are
//! invalid, 3 when a command fails at run time. Validation problems are
//! printed to stderr as one JSON object.

pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use condiff::config::{Conditioning, Diagnostic, RunConfig};
use condiff::data::save_dataset;
use condiff::profiling::{profile, ProfileOptions};
use condiff::sampling::sample_labels;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "condiff", about = "Image-conditioned diffusion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or the path of a training dataset file.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra settings as `key=value`.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `model.ckpt`.
    Train(Common),
    /// Sample masks for the validation images and export them as PNG.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: `<out>/model.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of images to sample.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Score best-of-1 and best-of-n samples on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself instead of sampling.
        #[arg(long)]
        oracle: bool,
    },
    /// Parameter count, memory and timing report.
    Profile(Common),
    /// Train and score the none / concat / additive variants over seeds.
    Ablate(Common),
    /// Write the synthetic train and validation sets to disk.
    GenData(Common),
}

#[derive(Debug)]
enum Failure {
    Invalid(Vec<Diagnostic>),
    Runtime(String),
}

impl From<condiff::Error> for Failure {
    fn from(e: condiff::Error) -> Self {
        match e {
            condiff::Error::Config(m) => Failure::Invalid(vec![Diagnostic {
                key: None,
                line: None,
                message: m,
            }]),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<&'a [Diagnostic]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<&'a str>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(d)) => {
            let report = ErrorReport {
                error: "validation",
                diagnostics: Some(&d),
                message: None,
            };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            EXIT_INVALID
        }
        Err(Failure::Runtime(m)) => {
            let report = ErrorReport {
                error: "runtime",
                diagnostics: None,
                message: Some(&m),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
            EXIT_FAILED
        }
    }
}

/// Builds the run configuration: file, then flags, then `key=value`
/// overrides; every problem is collected before anything runs.
fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let (mut cfg, mut diags) = match &common.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => RunConfig::parse_unvalidated(&text),
            Err(e) => (
                RunConfig::default(),
                vec![Diagnostic {
                    key: Some("--config".into()),
                    line: None,
                    message: format!("cannot read {}: {e}", path.display()),
                }],
            ),
        },
        None => (RunConfig::default(), Vec::new()),
    };
    let mut flags: Vec<(String, String)> = Vec::new();
    if let Some(d) = &common.data {
        if d == "synthetic" {
            flags.push(("data.source".into(), "synthetic".into()));
        } else {
            flags.push(("data.path".into(), d.clone()));
        }
    }
    if let Some(e) = common.epochs {
        flags.push(("train.epochs".into(), e.to_string()));
    }
    if let Some(s) = common.seed {
        flags.push(("run.seed".into(), s.to_string()));
    }
    if let Some(o) = &common.out {
        flags.push(("run.out_dir".into(), o.display().to_string()));
    }
    for o in &common.overrides {
        match o.split_once('=') {
            Some((k, v)) => flags.push((k.trim().to_string(), v.to_string())),
            None => diags.push(Diagnostic {
                key: None,
                line: None,
                message: format!("override {o:?} is not key=value"),
            }),
        }
    }
    diags.extend(cfg.apply(flags.iter().map(|(k, v)| (k.as_str(), v.as_str()))));
    diags.extend(cfg.validate());
    if diags.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Invalid(diags))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| if c == 0 { "background".to_string() } else { format!("organ{c}") })
        .collect()
}

/// One 8-bit grayscale PNG per mask (pixel value = class index) plus
/// `classes.txt` mapping indices to names.
fn export_masks(dir: &Path, ids: &[&str], labels: &[Vec<u8>], h: usize, w: usize, classes: usize) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    for (id, l) in ids.iter().zip(labels) {
        let img = image::GrayImage::from_raw(w as u32, h as u32, l.clone())
            .ok_or_else(|| Failure::Runtime(format!("mask {id} has the wrong size")))?;
        img.save(dir.join(format!("{id}.png"))).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let names: String = class_names(classes)
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i} {n}\n"))
        .collect();
    std::fs::write(dir.join("classes.txt"), names)?;
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<PathBuf, Failure> {
    let p = explicit.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    if p.is_file() {
        Ok(p)
    } else {
        Err(Failure::Invalid(vec![Diagnostic {
            key: Some("--checkpoint".into()),
            line: None,
            message: format!("checkpoint {} does not exist", p.display()),
        }]))
    }
}

/// Loads a checkpoint; a shape mismatch with the config is a validation error.
fn load_checked(cfg: &RunConfig, path: &Path) -> Result<condiff::model::CondDiffModel, Failure> {
    pipeline::load_model(cfg, path).map_err(|e| match e {
        condiff::Error::Shape(m) => Failure::Invalid(vec![Diagnostic {
            key: Some("--checkpoint".into()),
            line: None,
            message: m,
        }]),
        other => other.into(),
    })
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            let data = pipeline::load_data(&cfg)?;
            let outcome = pipeline::train(&cfg, &data.train, Some(&cfg.out_dir))?;
            write_json(&cfg.out_dir.join("train_summary.json"), &outcome.epochs)?;
            let digest = outcome.state.model.params().digest()?;
            println!(
                "trained {} epochs, {} steps; checkpoint {} (params digest {digest:08x})",
                outcome.epochs.len(),
                outcome.state.step,
                cfg.out_dir.join("model.ckpt").display()
            );
        }
        Command::Sample { common, checkpoint, limit } => {
            let cfg = resolve(&common)?;
            let path = checkpoint_path(&cfg, &checkpoint)?;
            let data = pipeline::load_data(&cfg)?;
            let model = load_checked(&cfg, &path)?;
            let n = limit.min(data.val.len());
            let idx: Vec<usize> = (0..n).collect();
            let (images, _) = data.val.batch(&idx, model.dtype(), model.device())?;
            let mut rng = condiff::params::seeded_rng(pipeline::eval_seed(&cfg));
            let labels = sample_labels(&model, &images, &pipeline::schedule(&cfg)?, &mut rng, &cfg.sampler)?;
            let ids: Vec<&str> = data.val.samples[..n].iter().map(|s| s.id.as_str()).collect();
            let dir = cfg.out_dir.join("samples");
            export_masks(&dir, &ids, &labels, data.val.height, data.val.width, data.val.classes)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            println!("wrote {n} masks to {}", dir.display());
        }
        Command::Eval { common, checkpoint, oracle } => {
            let cfg = resolve(&common)?;
            let data = pipeline::load_data(&cfg)?;
            let (summary, best_labels) = if oracle {
                let labels = data.val.samples.iter().map(|s| s.mask.clone()).collect::<Vec<_>>();
                (pipeline::oracle_summary(&data.val)?, labels)
            } else {
                let path = checkpoint_path(&cfg, &checkpoint)?;
                let model = load_checked(&cfg, &path)?;
                let (summary, streams) = pipeline::evaluate(&model, &cfg, &data.val, cfg.eval.best_of)?;
                let labels = streams.best_of(cfg.eval.best_of)?.labels;
                (summary, labels)
            };
            std::fs::create_dir_all(&cfg.out_dir)?;
            write_json(&cfg.out_dir.join("eval_report.json"), &summary)?;
            let table = pipeline::eval_table(&summary);
            std::fs::write(cfg.out_dir.join("eval_report.txt"), &table)?;
            std::fs::write(cfg.out_dir.join("eval_config.txt"), cfg.to_text())?;
            if cfg.eval.export_masks {
                let ids: Vec<&str> = data.val.samples.iter().map(|s| s.id.as_str()).collect();
                export_masks(&cfg.out_dir.join("masks"), &ids, &best_labels, data.val.height, data.val.width, data.val.classes)?;
            }
            print!("{table}");
        }
        Command::Profile(common) => {
            let cfg = resolve(&common)?;
            let model = pipeline::build_model(&cfg)?;
            let opts = ProfileOptions {
                resolution: cfg.profile.resolution,
                batch_size: cfg.profile.batch,
                warmup: cfg.profile.warmup,
                iters: cfg.profile.iters,
                seed: cfg.seed,
            };
            let report = profile(&model, &pipeline::schedule(&cfg)?, cfg.loss(), &opts)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            write_json(&cfg.out_dir.join("profile.json"), &report)?;
            let table = report.table(&format!("condiff ({})", cfg.conditioning));
            std::fs::write(cfg.out_dir.join("profile.txt"), &table)?;
            std::fs::write(cfg.out_dir.join("profile_config.txt"), cfg.to_text())?;
            print!("{table}");
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common)?;
            let data = pipeline::load_data(&cfg)?;
            let mut rows = Vec::new();
            for variant in Conditioning::ALL {
                let scores = cfg
                    .ablate_seeds
                    .iter()
                    .map(|&s| pipeline::run_variant(&cfg, variant, s, &data))
                    .collect::<condiff::Result<Vec<_>>>()?;
                rows.push(pipeline::ablation_row(variant, &cfg.ablate_seeds, &scores));
            }
            std::fs::create_dir_all(&cfg.out_dir)?;
            write_json(&cfg.out_dir.join("ablation.json"), &rows)?;
            let table = pipeline::ablation_table(&rows);
            std::fs::write(cfg.out_dir.join("ablation.txt"), &table)?;
            std::fs::write(cfg.out_dir.join("ablation_config.txt"), cfg.to_text())?;
            print!("{table}");
        }
        Command::GenData(common) => {
            let cfg = resolve(&common)?;
            let data = pipeline::load_data(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            save_dataset(&data.train, &cfg.out_dir.join("train.cdds"))?;
            save_dataset(&data.val, &cfg.out_dir.join("val.cdds"))?;
            let freqs = condiff::data::class_frequencies(&data.train)?;
            write_json(&cfg.out_dir.join("data_summary.json"), &serde_json::json!({
                "train": data.train.len(),
                "val": data.val.len(),
                "classes": data.train.classes,
                "height": data.train.height,
                "width": data.train.width,
                "class_frequencies": freqs,
            }))?;
            std::fs::write(cfg.out_dir.join("data_config.txt"), cfg.to_text())?;
            println!("wrote {} train and {} val samples to {}", data.train.len(), data.val.len(), cfg.out_dir.display());
        }
    }
    Ok(())
}
