//! Adapter and denoiser bundled with their parameter store.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, FusionMode, PvtAdapter, PyramidFeatures};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserOutput};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, ParamBuilder, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub adapter: AdapterConfig,
    pub denoiser: DenoiserConfig,
    /// When false the adapter output is replaced by zeros (the unconditioned
    /// baseline) and the adapter's parameters are frozen.
    pub conditioned: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterConfig::default(),
            denoiser: DenoiserConfig::default(),
            conditioned: true,
        }
    }
}

impl ModelConfig {
    pub fn fusion_mode(&self) -> FusionMode {
        self.adapter.fusion_mode
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.adapter.problems();
        out.extend(self.denoiser.problems());
        if self.adapter.stage_dims.len() != self.denoiser.widths.len() {
            out.push(format!(
                "denoiser has {} scales but the adapter has {} stages",
                self.denoiser.widths.len(),
                self.adapter.stage_dims.len()
            ));
        }
        if self.adapter.stage_strides != self.denoiser.strides {
            out.push(format!(
                "denoiser strides {:?} must equal adapter strides {:?}",
                self.denoiser.strides, self.adapter.stage_strides
            ));
        }
        if self.adapter.mask_channels != self.denoiser.classes {
            out.push(format!(
                "adapter mask channels {} must equal the class count {}",
                self.adapter.mask_channels, self.denoiser.classes
            ));
        }
        out
    }

    /// A small two-scale configuration for `8 × 8` inputs and two classes.
    pub fn tiny() -> Self {
        Self {
            adapter: AdapterConfig {
                image_channels: 1,
                mask_channels: 2,
                stage_dims: vec![4, 8],
                stage_strides: vec![2, 2],
                reduction_ratios: vec![2, 1],
                num_heads: vec![1, 2],
                depths: vec![1, 1],
                mlp_ratio: 2,
                time_dim: 8,
                fusion_mode: FusionMode::Additive,
            },
            denoiser: DenoiserConfig {
                classes: 2,
                stem_channels: 4,
                widths: vec![4, 8],
                strides: vec![2, 2],
                time_dim: 8,
            },
            conditioned: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CondDiffModel {
    config: ModelConfig,
    params: ParamStore,
    adapter: PvtAdapter,
    denoiser: Denoiser,
}

impl CondDiffModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let mut params = ParamStore::new(dtype, device.clone());
        let mut rng = seeded_rng(seed);
        let (adapter, denoiser) = {
            let mut b = ParamBuilder::new(&mut params, &mut rng);
            let adapter = PvtAdapter::new(&mut b.pp("adapter"), &config.adapter)?;
            let denoiser = Denoiser::new(
                &mut b.pp("denoiser"),
                &config.denoiser,
                &config.adapter.stage_dims,
                config.adapter.fusion_mode,
            )?;
            (adapter, denoiser)
        };
        if !config.conditioned {
            let names: Vec<String> = params
                .iter()
                .filter(|(n, _)| n.starts_with("adapter."))
                .map(|(n, _)| n.to_string())
                .collect();
            for n in names {
                params.set_trainable(&n, false)?;
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            adapter,
            denoiser,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn adapter(&self) -> &PvtAdapter {
        &self.adapter
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Conditioning pyramid c = E(I, x_t, t), or zeros for the baseline.
    pub fn conditioning(&self, image: &Tensor, x_t: &Tensor, ts: &[usize]) -> Result<PyramidFeatures> {
        if self.config.conditioned {
            self.adapter.extract_conditioning(image, x_t, ts)
        } else {
            let (b, _, h, w) = image.dims4()?;
            let grids = self.config.adapter.stage_grids(h, w)?;
            let stages = grids
                .iter()
                .zip(&self.config.adapter.stage_dims)
                .map(|(&(gh, gw), &c)| Tensor::zeros((b, c, gh, gw), image.dtype(), image.device()))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Ok(PyramidFeatures {
                stages,
                reduction_ratios: self.config.adapter.reduction_ratios.clone(),
            })
        }
    }

    pub fn predict(&self, image: &Tensor, x_t: &Tensor, ts: &[usize]) -> Result<DenoiserOutput> {
        let cond = self.conditioning(image, x_t, ts)?;
        self.denoiser.predict_x0(x_t, &cond, ts)
    }
}
