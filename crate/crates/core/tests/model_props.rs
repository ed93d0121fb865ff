use candle_core::{DType, Device, Tensor};

use condiff::adapter::max_abs;
use condiff::model::{CondDiffModel, ModelConfig};
use condiff::params::{seeded_rng, standard_normal};

fn inputs(b: usize, k: usize, size: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = seeded_rng(seed);
    let image = standard_normal(&mut rng, &[b, 1, size, size], DType::F32, &Device::Cpu).unwrap();
    let x_t = standard_normal(&mut rng, &[b, k, size, size], DType::F32, &Device::Cpu).unwrap();
    (image, x_t)
}

#[test]
fn default_model_scales_match_adapter_pyramid() {
    let model = CondDiffModel::new(&ModelConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
    let (image, x_t) = inputs(1, 4, 64, 1);
    let z = model.denoiser().encode(&x_t, &[10]).unwrap();
    let shapes: Vec<Vec<usize>> = z.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 160, 4, 4], vec![1, 256, 2, 2]]);
    let c = model.conditioning(&image, &x_t, &[10]).unwrap();
    assert_eq!(c.shapes(), shapes);
    let out = model.predict(&image, &x_t, &[10]).unwrap();
    assert_eq!(out.logits.dims(), x_t.dims());
    assert_eq!(out.x0_hat.dims(), x_t.dims());
}

#[test]
fn injection_is_a_no_op_at_initialisation() {
    let model = CondDiffModel::new(&ModelConfig::tiny(), 4, DType::F32, &Device::Cpu).unwrap();
    let (image, x_t) = inputs(2, 2, 8, 2);
    let with = model.adapter().extract_conditioning(&image, &x_t, &[1, 50]).unwrap();
    let without = model.adapter().image_pyramid(&image).unwrap();
    for (a, b) in with.stages.iter().zip(&without.stages) {
        assert_eq!(max_abs(&(a - b).unwrap()).unwrap(), 0.0);
    }
}

#[test]
fn zero_conditioning_equals_unconditioned_model() {
    let cfg = ModelConfig::tiny();
    let conditioned = CondDiffModel::new(&cfg, 9, DType::F32, &Device::Cpu).unwrap();
    let baseline = CondDiffModel::new(&ModelConfig { conditioned: false, ..cfg }, 9, DType::F32, &Device::Cpu).unwrap();
    let (image, x_t) = inputs(2, 2, 8, 3);
    let zeros = conditioned.conditioning(&image, &x_t, &[5, 6]).unwrap().zeros_like().unwrap();
    let a = conditioned.denoiser().predict_x0(&x_t, &zeros, &[5, 6]).unwrap();
    let b = baseline.predict(&image, &x_t, &[5, 6]).unwrap();
    assert_eq!(max_abs(&(a.logits - b.logits).unwrap()).unwrap(), 0.0);
}

#[test]
fn prediction_is_deterministic_and_bounded() {
    let model = CondDiffModel::new(&ModelConfig::tiny(), 1, DType::F32, &Device::Cpu).unwrap();
    let (image, x_t) = inputs(3, 2, 8, 4);
    let a = model.predict(&image, &x_t, &[1, 2, 3]).unwrap();
    let b = model.predict(&image, &x_t, &[1, 2, 3]).unwrap();
    assert_eq!(max_abs(&(&a.logits - &b.logits).unwrap()).unwrap(), 0.0);
    assert!(max_abs(&a.x0_hat).unwrap() <= 1.0);
}

#[test]
fn same_seed_builds_identical_parameters() {
    let a = CondDiffModel::new(&ModelConfig::default(), 7, DType::F32, &Device::Cpu).unwrap();
    let b = CondDiffModel::new(&ModelConfig::default(), 7, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(a.params().digest().unwrap(), b.params().digest().unwrap());
}

#[test]
fn indivisible_inputs_are_rejected() {
    let model = CondDiffModel::new(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
    let (image, x_t) = inputs(1, 2, 6, 5);
    assert!(model.predict(&image, &x_t, &[1]).is_err());
}
