//! Noise schedule and the closed-form diffusion math.
//!
//! Timesteps are 1-based: `t = 1` is the least-noised state and `t = T` the
//! most. `alpha_bar(0)` is defined as 1 so the reverse mean is well defined at
//! the final step.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("number of steps must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "beta bounds must lie in (0, 1), got [{beta_start}, {beta_end}]"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::Schedule(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.iter().any(|a| *a <= 0.0) {
            return Err(Error::Schedule("cumulative signal underflowed to zero".into()));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Reverse-step noise scale, σ_t = √β_t.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    /// Coefficients `(c_xt, c_x0)` of the reverse mean from `t` to `s < t`.
    /// For `s = t - 1` these are exactly the single-step DDPM posterior
    /// coefficients built from the stored α_t.
    pub fn posterior_coefficients(&self, t: usize, s: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        if s >= t {
            return Err(Error::Invalid(format!("reverse jump must go down: {t} -> {s}")));
        }
        let ab_t = self.alpha_bar(t);
        let ab_s = self.alpha_bar(s);
        // per-jump "alpha" and "beta"
        let (a, b) = if s + 1 == t {
            (self.alpha(t), 1.0 - self.alpha(t))
        } else {
            let a = ab_t / ab_s;
            (a, 1.0 - a)
        };
        let c_xt = a.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let c_x0 = ab_s.sqrt() * b / (1.0 - ab_t);
        Ok((c_xt, c_x0))
    }

    /// Noise scale of a reverse jump; equals σ_t for adjacent steps.
    pub fn jump_sigma(&self, t: usize, s: usize) -> f64 {
        if s + 1 == t {
            self.sigma(t)
        } else {
            (1.0 - self.alpha_bar(t) / self.alpha_bar(s)).sqrt()
        }
    }

    /// Timesteps visited by a reverse run, descending from `T`. `stride = 1`
    /// visits every step; larger strides keep `T` and `1` and skip uniformly.
    pub fn sampling_timesteps(&self, stride: usize) -> Vec<usize> {
        let stride = stride.max(1);
        let mut ts: Vec<usize> = (1..=self.steps()).rev().step_by(stride).collect();
        if *ts.last().unwrap() != 1 {
            ts.push(1);
        }
        ts
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(x0, eps, "q_sample x0/eps")?;
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Per-item forward corruption: item `i` of the batch is noised to `ts[i]`.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "q_sample x0/eps")?;
    let b = x0.dim(0)?;
    if ts.len() != b {
        return shape_err(format!("{} timesteps for batch of {b}", ts.len()));
    }
    for &t in ts {
        schedule.check_t(t)?;
    }
    let sig: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect();
    let noise: Vec<f64> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt()).collect();
    let sig = per_item(&sig, x0)?;
    let noise = per_item(&noise, x0)?;
    Ok((x0.broadcast_mul(&sig)? + eps.broadcast_mul(&noise)?)?)
}

fn per_item(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(Tensor::from_slice(values, shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
}

/// Reverse mean μ(x_t, x̂0) of the single-step posterior.
pub fn posterior_mean(x_t: &Tensor, x0_hat: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    posterior_mean_between(x_t, x0_hat, t, t.saturating_sub(1), schedule)
}

pub fn posterior_mean_between(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x_t, x0_hat, "posterior_mean x_t/x0_hat")?;
    let (c_xt, c_x0) = schedule.posterior_coefficients(t, s)?;
    Ok(((x_t * c_xt)? + (x0_hat * c_x0)?)?)
}

/// One stochastic reverse step; `noise` is ignored at `t = 1`.
pub fn reverse_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    reverse_step_between(x_t, x0_hat, t, t.saturating_sub(1), schedule, noise)
}

pub fn reverse_step_between(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let mean = posterior_mean_between(x_t, x0_hat, t, s, schedule)?;
    if s == 0 {
        return Ok(mean);
    }
    same_shape(&mean, noise, "reverse_step noise")?;
    Ok((mean + (noise * schedule.jump_sigma(t, s))?)?)
}

/// Mean over every axis except the first; used for per-item diagnostics.
pub fn per_item_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.mean(D::Minus1)?)
}
