//! Mask tensors: `[batch, classes, height, width]` arrays.
//!
//! Clean targets are one-hot per pixel and enter the diffusion process
//! rescaled to `[-1, 1]`. Diffusion states and raw predictions are unbounded.

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Error, Result};

/// Mask tensors are plain candle tensors of rank 4.
pub type MaskTensor = Tensor;

/// Integer label maps `[batch][h*w]` to a `[B, K, H, W]` one-hot tensor in `{0, 1}`.
pub fn one_hot(labels: &[Vec<u8>], classes: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let b = labels.len();
    let mut data = vec![0f32; b * classes * h * w];
    for (i, lab) in labels.iter().enumerate() {
        if lab.len() != h * w {
            return shape_err(format!("label map {i} has {} pixels, expected {}", lab.len(), h * w));
        }
        for (p, &c) in lab.iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                return Err(Error::Invalid(format!("label {c} out of range for {classes} classes")));
            }
            data[(i * classes + c) * h * w + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (b, classes, h, w), device)?.to_dtype(dtype)?)
}

/// `{0,1}` → `{-1,1}`.
pub fn to_diffusion_domain(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

/// `[-1,1]` → `[0,1]`.
pub fn from_diffusion_domain(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.5)?)
}

/// Per-pixel argmax over the class axis, lowest index winning ties.
pub fn argmax_labels(x: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (b, k, h, w) = x.dims4()?;
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let hw = h * w;
    Ok((0..b)
        .map(|i| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    let mut best_v = v[(i * k) * hw + p];
                    for c in 1..k {
                        let cv = v[(i * k + c) * hw + p];
                        if cv > best_v {
                            best = c;
                            best_v = cv;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Checks that every pixel of a `{0,1}` tensor has exactly one active class.
pub fn check_one_hot(x: &Tensor) -> Result<()> {
    let (b, k, h, w) = x.dims4()?;
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let hw = h * w;
    for i in 0..b {
        for p in 0..hw {
            let mut ones = 0;
            for c in 0..k {
                let e = v[(i * k + c) * hw + p];
                if e == 1.0 {
                    ones += 1;
                } else if e != 0.0 {
                    return Err(Error::Invalid(format!("mask value {e} is not 0 or 1")));
                }
            }
            if ones != 1 {
                return Err(Error::Invalid(format!(
                    "pixel {p} of item {i} has {ones} active classes"
                )));
            }
        }
    }
    Ok(())
}
