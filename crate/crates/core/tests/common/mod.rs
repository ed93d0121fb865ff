//! Independent reference implementations shared by the integration tests and
//! the acceptance suite. Nothing here calls into the code under test except
//! to read weights or evaluate the loss being differentiated.
#![allow(dead_code)]

use std::collections::HashSet;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use condiff::mask;
use condiff::model::{CondDiffModel, ModelConfig};
use condiff::training::{hybrid_loss, LossConfig};

/// ᾱ_t recomputed by a plain running product.
pub fn naive_alpha_bars(betas: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

/// Row-major `[n, in] × W^T + b` with `W: [out, in]`.
fn affine(x: &[f64], n: usize, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len() / n;
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        for o in 0..out {
            let mut s = b[o];
            for k in 0..inp {
                s += x[i * inp + k] * w[o * inp + k];
            }
            y[i * out + o] = s;
        }
    }
    y
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

/// Textbook multi-head self-attention over `n` tokens of width `c`, in f64.
/// `weights` holds (W, b) for the query, key, value and output projections.
pub fn dense_attention(x: &[f64], n: usize, c: usize, heads: usize, weights: &[(Vec<f64>, Vec<f64>); 4]) -> Vec<f64> {
    let q = affine(x, n, &weights[0].0, &weights[0].1, c);
    let k = affine(x, n, &weights[1].0, &weights[1].1, c);
    let v = affine(x, n, &weights[2].0, &weights[2].1, c);
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut merged = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..d {
                merged[i * c + h * d + e] = (0..n).map(|j| exps[j] / z * v[j * c + h * d + e]).sum();
            }
        }
    }
    affine(&merged, n, &weights[3].0, &weights[3].1, c)
}

/// Per-class Dice and IoU from explicit pixel-index sets (0/0 counts as 1),
/// averaged over the foreground classes.
pub fn brute_force_scores(pred: &[u8], gt: &[u8], classes: usize) -> (f64, f64) {
    let mut dice = 0.0;
    let mut iou = 0.0;
    for c in 1..classes {
        let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] as usize == c).collect();
        let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] as usize == c).collect();
        let inter = p.intersection(&g).count() as f64;
        let union = p.union(&g).count() as f64;
        let total = (p.len() + g.len()) as f64;
        dice += if total == 0.0 { 1.0 } else { 2.0 * inter / total };
        iou += if union == 0.0 { 1.0 } else { inter / union };
    }
    let fg = (classes - 1) as f64;
    (dice / fg, iou / fg)
}

pub struct GradCheck {
    pub checked: usize,
    pub tensors_covered: usize,
    pub max_rel_err: f64,
}

/// Central (five-point) finite differences against autograd on the tiny two-scale model in
/// double precision. Every parameter (including zero-initialised ones) is
/// first redrawn so no gradient path is trivially dead.
pub fn gradient_check(min_params: usize, seed: u64) -> GradCheck {
    let dev = Device::Cpu;
    let cfg = ModelConfig::tiny();
    let model = CondDiffModel::new(&cfg, seed, DType::F64, &dev).unwrap();
    let store = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<(String, Vec<usize>)> = store.trainable().map(|(n, v)| (n.to_string(), v.dims().to_vec())).collect();
    for (name, dims) in &names {
        let count: usize = dims.iter().product();
        let vals: Vec<f64> = (0..count).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.assign(name, &Tensor::from_vec(vals, dims.as_slice(), &dev).unwrap()).unwrap();
    }

    let (h, w, k) = (8, 8, cfg.denoiser.classes);
    let image = Tensor::from_vec((0..2 * h * w).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>(), (2, 1, h, w), &dev).unwrap();
    let labels: Vec<Vec<u8>> = (0..2).map(|_| (0..h * w).map(|_| rng.random_range(0..k) as u8).collect()).collect();
    let x0 = mask::to_diffusion_domain(&mask::one_hot(&labels, k, h, w, DType::F64, &dev).unwrap()).unwrap();
    let x_t = Tensor::from_vec((0..2 * k * h * w).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>(), (2, k, h, w), &dev).unwrap();
    let ts = [3usize, 40];
    let loss_cfg = LossConfig::default();
    let loss = || -> Tensor { hybrid_loss(&model.predict(&image, &x_t, &ts).unwrap().logits, &x0, &loss_cfg).unwrap().total };

    let total = loss();
    let grads = total.backward().unwrap();

    // one entry from every tensor, then random extras
    let mut picks: Vec<(usize, usize)> = names.iter().enumerate().map(|(t, (_, d))| (t, rng.random_range(0..d.iter().product::<usize>()))).collect();
    while picks.len() < min_params {
        let t = rng.random_range(0..names.len());
        let count: usize = names[t].1.iter().product();
        picks.push((t, rng.random_range(0..count)));
    }

    // five-point stencil: O(h⁴) truncation with a step large enough that
    // f64 roundoff stays far below the smallest gradients checked
    let h = 1e-3;
    let mut max_rel: f64 = 0.0;
    for &(t, idx) in &picks {
        let (name, dims) = &names[t];
        let var = &store.get(name).unwrap().var;
        let analytic = flat(grads.get(var.as_tensor()).expect("gradient present"))[idx];
        let base = flat(var.as_tensor());
        let eval_at = |delta: f64| -> f64 {
            let mut v = base.clone();
            v[idx] += delta;
            store.assign(name, &Tensor::from_vec(v, dims.as_slice(), &dev).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval_at(-2.0 * h) - 8.0 * eval_at(-h) + 8.0 * eval_at(h) - eval_at(2.0 * h)) / (12.0 * h);
        store.assign(name, &Tensor::from_vec(base, dims.as_slice(), &dev).unwrap()).unwrap();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-7 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
        if std::env::var("GRADCHECK_VERBOSE").is_ok() && rel > 1e-6 {
            eprintln!("{name}[{idx}] analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
        }
        max_rel = max_rel.max(rel);
    }
    GradCheck {
        checked: picks.len(),
        tensors_covered: names.len(),
        max_rel_err: max_rel,
    }
}

/// Random `n × c` token matrix in single precision.
pub fn random_tokens(rng: &mut ChaCha8Rng, b: usize, n: usize, c: usize) -> Tensor {
    let v: Vec<f32> = (0..b * n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (b, n, c), &Device::Cpu).unwrap()
}
