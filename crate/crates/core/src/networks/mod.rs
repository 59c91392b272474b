//! Registration generators, discriminators and mask fusion.
//!
//! Parameter names follow `<net>.<layer>.<tensor>` with nets `g` (forward
//! generator), `f` (reverse generator), `d_ref` and `d_flt`
//! (discriminators judging alignment to the reference and floating image).

mod discriminator;
mod generator;
mod params;
mod segmentation;

pub use discriminator::{critic_graph, critic_input, discriminator_batch, discriminator_forward, Critic, CriticSample};
pub use generator::{generator_forward, generator_graph, reverse_generator_forward, GeneratorGraph, GeneratorOutput};
pub use params::{layer_of, Binder, Optimizer, ParamStore, Phase};
pub use segmentation::{fuse_maps, masks_from_fused, otsu_bin, otsu_split, otsu_threshold, split_threshold, OTSU_BINS};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sarreg_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};

/// Layer updated during transfer fine-tuning.
pub const LAST_LAYER: &str = "g.head";
pub const FUSION_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_res_blocks: usize,
    pub width: usize,
    pub kernel: usize,
    /// Largest displacement the field head can emit, in pixels.
    pub field_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 6,
            width: 64,
            kernel: 3,
            field_scale: 20.0,
        }
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            n_res_blocks: 3,
            width: 16,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width < 8 || self.width % 2 != 0 {
            return Err(SarError::Config(format!("generator width {} must be even and >= 8", self.width)));
        }
        if self.n_res_blocks == 0 {
            return Err(SarError::Config("generator needs at least one residual block".into()));
        }
        if self.kernel != 3 {
            return Err(SarError::Config("only 3x3 kernels are supported".into()));
        }
        if !(self.field_scale > 0.0) {
            return Err(SarError::Config("field_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub n_conv: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub dense_units: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_conv: 8,
            base_width: 64,
            max_width: 512,
            dense_units: 1024,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            n_conv: 8,
            base_width: 8,
            max_width: 64,
            dense_units: 32,
        }
    }

    /// Width of each convolution: pairs of layers share a width, doubling
    /// up to the cap.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.n_conv)
            .map(|i| (self.base_width << (i / 2)).min(self.max_width))
            .collect()
    }

    /// Layers whose width exceeds their predecessor's use stride 2.
    pub fn strides(&self) -> Vec<usize> {
        let w = self.widths();
        (0..self.n_conv)
            .map(|i| if i > 0 && w[i] > w[i - 1] { 2 } else { 1 })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_conv == 0 || self.base_width == 0 || self.max_width < self.base_width || self.dense_units == 0 {
            return Err(SarError::Config("invalid discriminator dimensions".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn desk(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        let down = 1 << self.discriminator.strides().iter().filter(|&&s| s == 2).count();
        let m = down.max(4);
        if self.height % m != 0 || self.width % m != 0 {
            return Err(SarError::Config(format!(
                "image size {}x{} must be divisible by {m}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub(crate) fn critic_flat_len(&self) -> usize {
        let down = 1 << self.discriminator.strides().iter().filter(|&&s| s == 2).count();
        let last = *self.discriminator.widths().last().unwrap();
        last * (self.height / down) * (self.width / down)
    }
}

/// All trainable state of the model together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

impl ModelParams<f32> {
    /// Fresh parameters: He-normal convolutions, unit/zero normalization,
    /// zero field heads and uniform fusion weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let gc = &config.generator;
        let (w, hw) = (gc.width, gc.width / 2);
        for net in ["g", "f"] {
            let mut conv_bn = |store: &mut ParamStore, layer: String, cin: usize, cout: usize| {
                store.insert_param(format!("{layer}.weight"), he_normal(&mut rng, &[cout, cin, 3, 3]));
                insert_bn(store, &format!("{layer}_bn"), cout);
            };
            conv_bn(&mut store, format!("{net}.enc1"), 1, hw);
            conv_bn(&mut store, format!("{net}.enc2"), hw, w);
            conv_bn(&mut store, format!("{net}.enc3"), w, w);
            conv_bn(&mut store, format!("{net}.down"), 2 * w, w);
            for i in 0..gc.n_res_blocks {
                conv_bn(&mut store, format!("{net}.res{i}.a"), w, w);
                conv_bn(&mut store, format!("{net}.res{i}.b"), w, w);
            }
            conv_bn(&mut store, format!("{net}.up1"), 3 * w, w);
            conv_bn(&mut store, format!("{net}.up2"), w + 2 * hw, hw);
            store.insert_param(format!("{net}.head.weight"), Tensor::zeros(&[2, hw, 3, 3]));
            store.insert_param(format!("{net}.head.bias"), Tensor::zeros(&[2]));
            store.insert_param(
                format!("{net}.fusion.weights"),
                Tensor::full(&[FUSION_LAYERS], 1.0 / FUSION_LAYERS as f32),
            );
        }
        let dc = &config.discriminator;
        for net in ["d_ref", "d_flt"] {
            let mut cin = discriminator::CRITIC_CHANNELS;
            for (i, cout) in dc.widths().into_iter().enumerate() {
                store.insert_param(format!("{net}.conv{i}.weight"), he_normal(&mut rng, &[cout, cin, 3, 3]));
                store.insert_param(format!("{net}.conv{i}.bias"), Tensor::zeros(&[cout]));
                cin = cout;
            }
            let flat = config.critic_flat_len();
            store.insert_param(format!("{net}.dense1.weight"), he_normal(&mut rng, &[flat, dc.dense_units]));
            store.insert_param(format!("{net}.dense1.bias"), Tensor::zeros(&[dc.dense_units]));
            store.insert_param(format!("{net}.dense2.weight"), he_normal(&mut rng, &[dc.dense_units, 1]));
            store.insert_param(format!("{net}.dense2.bias"), Tensor::zeros(&[1]));
        }
        Ok(Self { config, store })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store
            .save_checkpoint(dir, &serde_json::to_value(&self.config)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, echo) = ParamStore::load_checkpoint(dir)?;
        let config: ModelConfig = serde_json::from_value(echo)?;
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        for name in reference.store.names() {
            let want = reference.store.get(name).unwrap().shape();
            match store.get(name) {
                Some(t) if t.shape() == want => {}
                _ => {
                    return Err(SarError::Format {
                        path: dir.to_path_buf(),
                        reason: format!("checkpoint lacks a tensor {name} of shape {want:?}"),
                    })
                }
            }
        }
        Ok(Self { config, store })
    }
}

impl<T: Real> ModelParams<T> {
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }

    pub(crate) fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape != (self.config.height, self.config.width) {
            return Err(SarError::contract(format!(
                "model expects {}x{} images, got {}x{}",
                self.config.height, self.config.width, shape.0, shape.1
            )));
        }
        Ok(())
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng) as f32).collect())
}

fn insert_bn(store: &mut ParamStore, layer: &str, channels: usize) {
    store.insert_param(format!("{layer}.gamma"), Tensor::full(&[channels], 1.0));
    store.insert_param(format!("{layer}.beta"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{layer}.running_mean"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{layer}.running_var"), Tensor::full(&[channels], 1.0));
}
