//! Parameter count, memory and timing report.
//!
//! On a CPU host there is no allocator reservation to query, so the reserved
//! figure is reported as unavailable. Typical memory is the largest resident
//! set seen by a 10 Hz sampler of `/proc/self/status` during the run.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask;
use crate::model::CondDiffModel;
use crate::params::{seeded_rng, standard_normal};
use crate::schedule::{q_sample_batch, NoiseSchedule};
use crate::training::{hybrid_loss, LossConfig};

/// Scalar entries over trainable tensors.
pub fn count_params(model: &CondDiffModel) -> usize {
    model.params().count_trainable()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub samples: usize,
}

/// Statistics over `timings_ms` with the first `warmup` entries dropped.
/// The standard deviation uses the `n − 1` denominator and is 0 for one sample.
pub fn timing_stats(timings_ms: &[f64], warmup: usize) -> Result<TimingStats> {
    let kept = timings_ms.get(warmup..).unwrap_or(&[]);
    if kept.is_empty() {
        return Err(Error::Invalid(format!("{} timings leave none after {warmup} warmup", timings_ms.len())));
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let std = if kept.len() > 1 {
        (kept.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(TimingStats {
        mean_ms: mean,
        std_ms: std,
        samples: kept.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub device: String,
    pub resolution: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub trainable_params: usize,
    /// Peak allocator reservation; `None` when the runtime exposes none.
    pub reserved_memory_mb: Option<f64>,
    /// Monitor-sampled usage; `None` when no monitor is available.
    pub typical_memory_mb: Option<f64>,
    pub train_ms_per_step: Option<TimingStats>,
    pub infer_ms_per_image: Option<TimingStats>,
    pub environment: Environment,
    /// Failures (for example allocation errors) hit while measuring.
    pub failures: Vec<String>,
}

impl ProfileReport {
    /// Reserved is a peak, so it can never sit below typical usage.
    pub fn memory_consistent(&self) -> bool {
        match (self.reserved_memory_mb, self.typical_memory_mb) {
            (Some(r), Some(t)) => r >= t,
            _ => true,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Table with the columns: parameters, reserved and typical memory,
    /// train and sample time.
    pub fn table(&self, model_name: &str) -> String {
        let mb = |v: Option<f64>| v.map_or("N/A".to_string(), |v| format!("{v:.0}"));
        let ms = |v: &Option<TimingStats>| {
            v.as_ref()
                .map_or("N/A".to_string(), |s| format!("{:.2} ± {:.2}", s.mean_ms, s.std_ms))
        };
        let header = ["Model", "Parameter #", "Reserved (MB)", "Typical (MB)", "Train (ms)", "Sample (ms/image)"];
        let row = [
            model_name.to_string(),
            group_thousands(self.trainable_params),
            mb(self.reserved_memory_mb),
            mb(self.typical_memory_mb),
            ms(&self.train_ms_per_step),
            ms(&self.infer_ms_per_image),
        ];
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.chars().count().max(r.chars().count()))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let head: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        let rule = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-");
        format!(
            "{}\n{}\n{}\n({}, {}x{}, batch {})\n",
            line(&head),
            rule,
            line(&row),
            self.environment.device,
            self.environment.resolution,
            self.environment.resolution,
            self.environment.batch_size
        )
    }
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Current resident set size in MB, if the platform reports it.
pub fn resident_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// Samples [`resident_mb`] at 10 Hz until dropped.
struct MemoryMonitor {
    stop: Arc<AtomicBool>,
    peak: Arc<Mutex<Option<f64>>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl MemoryMonitor {
    fn start() -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let peak = Arc::new(Mutex::new(resident_mb()));
        let (s, p) = (stop.clone(), peak.clone());
        let handle = thread::spawn(move || {
            while !s.load(Ordering::Relaxed) {
                if let Some(v) = resident_mb() {
                    let mut g = p.lock().expect("monitor lock");
                    *g = Some(g.map_or(v, |old: f64| old.max(v)));
                }
                thread::sleep(Duration::from_millis(100));
            }
        });
        Self {
            stop,
            peak,
            handle: Some(handle),
        }
    }

    fn finish(mut self) -> Option<f64> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        *self.peak.lock().expect("monitor lock")
    }
}

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub resolution: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            resolution: 64,
            batch_size: 1,
            warmup: 5,
            iters: 20,
            seed: 0,
        }
    }
}

/// Times `warmup + iters` training passes (forward, loss, backward; no
/// parameter update) and as many single-image forward passes.
pub fn profile(model: &CondDiffModel, schedule: &NoiseSchedule, loss: &LossConfig, opts: &ProfileOptions) -> Result<ProfileReport> {
    if opts.iters == 0 {
        return Err(Error::Invalid("profile needs iters >= 1".into()));
    }
    let cfg = model.config();
    let (r, b) = (opts.resolution, opts.batch_size);
    cfg.adapter.check_input(r, r)?;
    let dtype = model.dtype();
    let device = model.device().clone();
    let mut rng = seeded_rng(opts.seed);
    let k = cfg.denoiser.classes;
    let environment = Environment {
        device: format!("{:?}", device).to_lowercase(),
        resolution: r,
        batch_size: b,
        warmup: opts.warmup,
        iters: opts.iters,
    };
    let mut failures = Vec::new();
    let monitor = MemoryMonitor::start();

    let image = standard_normal(&mut rng, &[b, cfg.adapter.image_channels, r, r], dtype, &device)?.affine(0.1, 0.5)?;
    let labels: Vec<Vec<u8>> = (0..b).map(|i| (0..r * r).map(|p| ((p / r + i) % k) as u8).collect()).collect();
    let x0 = mask::to_diffusion_domain(&mask::one_hot(&labels, k, r, r, dtype, &device)?)?;

    let mut train_ms = Vec::with_capacity(opts.warmup + opts.iters);
    let run_train = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<()> {
        let ts: Vec<usize> = (0..b).map(|i| 1 + (i * 37) % schedule.steps()).collect();
        let eps = standard_normal(rng, x0.dims(), dtype, &device)?;
        let x_t = q_sample_batch(&x0, &ts, &eps, schedule)?;
        let out = model.predict(&image, &x_t, &ts)?;
        let parts = hybrid_loss(&out.logits, &x0, loss)?;
        let grads = parts.total.backward()?;
        drop(grads);
        Ok(())
    };
    for _ in 0..opts.warmup + opts.iters {
        let t0 = Instant::now();
        match run_train(&mut rng) {
            Ok(()) => train_ms.push(t0.elapsed().as_secs_f64() * 1e3),
            Err(e) => {
                failures.push(format!("train step: {e}"));
                break;
            }
        }
    }

    let single = image.narrow(0, 0, 1)?;
    let mut infer_ms = Vec::with_capacity(opts.warmup + opts.iters);
    for i in 0..opts.warmup + opts.iters {
        let x_t: Tensor = standard_normal(&mut rng, &[1, k, r, r], dtype, &device)?;
        let t = 1 + (i * 13) % schedule.steps();
        let t0 = Instant::now();
        match model.predict(&single, &x_t, &[t]) {
            Ok(out) => {
                // force evaluation before reading the clock
                let _ = out.x0_hat.sum_all()?;
                infer_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            Err(e) => {
                failures.push(format!("inference: {e}"));
                break;
            }
        }
    }
    let typical = monitor.finish();

    Ok(ProfileReport {
        trainable_params: count_params(model),
        reserved_memory_mb: None,
        typical_memory_mb: typical,
        train_ms_per_step: timing_stats(&train_ms, opts.warmup).ok(),
        infer_ms_per_image: timing_stats(&infer_ms, opts.warmup).ok(),
        environment,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_entries_are_dropped() {
        let s = timing_stats(&[1000.0, 1000.0, 2.0, 4.0], 2).unwrap();
        assert_eq!(s.mean_ms, 3.0);
        assert_eq!(s.samples, 2);
        assert!((s.std_ms - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_has_zero_spread() {
        let s = timing_stats(&[7.5], 0).unwrap();
        assert_eq!((s.mean_ms, s.std_ms), (7.5, 0.0));
        assert!(timing_stats(&[1.0], 1).is_err());
    }

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(24651429), "24,651,429");
        assert_eq!(group_thousands(999), "999");
    }
}
