//! Fixed multi-scale convolutional feature extractor with a VGG16-style
//! layer pattern, and the feature distance built on it.
//!
//! Convolutions are 3×3, stride 1, zero padded and followed by ReLU. A 2×2
//! max pool separates consecutive blocks. Every returned map is min-max
//! normalized to `[0, 1]` on its own.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sarreg_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::imagecore::Image;
use crate::sart::{self, SartTensor};

/// Convolutions per block at full scale, with the base width of each block.
const BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (2, 256), (3, 512), (3, 512)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Every layer width is divided by this factor.
    pub width_divisor: usize,
    pub seed: u64,
}

impl ExtractorConfig {
    pub fn full_scale(seed: u64) -> Self {
        Self { width_divisor: 1, seed }
    }

    pub fn desk_scale(seed: u64) -> Self {
        Self { width_divisor: 8, seed }
    }

    /// Output width of every convolution, in order.
    pub fn layer_widths(&self) -> Vec<usize> {
        BLOCKS
            .iter()
            .flat_map(|&(n, w)| std::iter::repeat((w / self.width_divisor).max(1)).take(n))
            .collect()
    }

    pub fn map_count(&self) -> usize {
        self.layer_widths().iter().sum()
    }

    pub fn pool_stages(&self) -> usize {
        BLOCKS.len() - 1
    }

    fn pools_after(&self) -> Vec<bool> {
        BLOCKS
            .iter()
            .enumerate()
            .flat_map(|(b, &(n, _))| (0..n).map(move |i| i + 1 == n && b + 1 < BLOCKS.len()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, 3, 3]`
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    layers: Vec<ConvLayer>,
}

impl FeatureExtractor {
    /// He-normal weights and zero biases drawn from the config seed.
    pub fn seeded(config: ExtractorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fan_in = 1;
        let mut layers = Vec::new();
        for width in config.layer_widths() {
            let std = (2.0 / (9 * fan_in) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = (0..width * fan_in * 9).map(|_| normal.sample(&mut rng) as f32).collect();
            layers.push(ConvLayer {
                weight: Tensor::new(&[width, fan_in, 3, 3], weight),
                bias: Tensor::zeros(&[width]),
            });
            fan_in = width;
        }
        Self { config, layers }
    }

    /// Load weights from a SART file holding one float32 record per layer,
    /// in layer order, each of dims `[out, in * 9 + 1]`: the flattened 3×3
    /// kernels followed by the bias.
    pub fn from_weight_file(config: ExtractorConfig, path: &Path) -> Result<Self> {
        let records = sart::read_all(path)?;
        let bad = |reason: String| SarError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let widths = config.layer_widths();
        if records.len() != widths.len() {
            return Err(bad(format!("expected {} layers, found {}", widths.len(), records.len())));
        }
        let mut fan_in = 1;
        let mut layers = Vec::new();
        for (i, (rec, &width)) in records.iter().zip(&widths).enumerate() {
            let data = rec.as_f32().ok_or_else(|| bad(format!("layer {i} is not float32")))?;
            if rec.dims_usize() != [width, fan_in * 9 + 1] {
                return Err(bad(format!(
                    "layer {i} has dims {:?}, expected [{width}, {}]",
                    rec.dims_usize(),
                    fan_in * 9 + 1
                )));
            }
            let mut weight = Vec::with_capacity(width * fan_in * 9);
            let mut bias = Vec::with_capacity(width);
            for row in data.chunks(fan_in * 9 + 1) {
                weight.extend_from_slice(&row[..fan_in * 9]);
                bias.push(row[fan_in * 9]);
            }
            layers.push(ConvLayer {
                weight: Tensor::new(&[width, fan_in, 3, 3], weight),
                bias: Tensor::new(&[width], bias),
            });
            fan_in = width;
        }
        Ok(Self { config, layers })
    }

    /// Write the weights in the layout read by [`FeatureExtractor::from_weight_file`].
    pub fn save_weight_file(&self, path: &Path) -> Result<()> {
        let records: Vec<_> = self
            .layers
            .iter()
            .map(|l| {
                let [out, fan_in, _, _] = l.weight.dims4();
                let row = fan_in * 9;
                let mut data = Vec::with_capacity(out * (row + 1));
                for o in 0..out {
                    data.extend_from_slice(&l.weight.data()[o * row..(o + 1) * row]);
                    data.push(l.bias.data()[o]);
                }
                SartTensor::f32(&[out, row + 1], data)
            })
            .collect();
        sart::write_all(path, &records)
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        let m = 1 << self.config.pool_stages();
        if shape.0 % m != 0 || shape.1 % m != 0 {
            return Err(SarError::contract(format!(
                "feature extraction needs dims divisible by {m}, got {}x{}",
                shape.0, shape.1
            )));
        }
        Ok(())
    }

    /// Normalized maps of every layer for a `[N, 1, H, W]` input. The weights
    /// enter the graph as constants.
    pub fn forward<'g, T: Real>(&self, graph: &'g Graph<T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let s = x.shape();
        self.check_shape((s[2], s[3]))?;
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, pool) in self.layers.iter().zip(self.config.pools_after()) {
            let w = graph.constant(layer.weight.cast());
            let b = graph.constant(layer.bias.cast());
            h = h.conv2d(w, 1, 1).add_channel_bias(b).relu();
            out.push(h.min_max_normalize());
            if pool {
                h = h.max_pool2();
            }
        }
        Ok(out)
    }
}

/// Normalized feature maps grouped by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    /// One `[C, H, W]` tensor per layer.
    maps: Vec<Tensor<f32>>,
    layer_widths: Vec<usize>,
}

impl FeatureStack {
    pub fn layers(&self) -> &[Tensor<f32>] {
        &self.maps
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn map_count(&self) -> usize {
        self.layer_widths.iter().sum()
    }
}

pub fn extract_features(img: &Image, extractor: &FeatureExtractor) -> Result<FeatureStack> {
    let g = Graph::<f32>::new();
    let x = g.constant(img.to_tensor());
    let maps = extractor
        .forward(&g, x)?
        .into_iter()
        .map(|v| {
            let t = v.value();
            let s = t.shape();
            Tensor::new(&s[1..], t.data().to_vec())
        })
        .collect();
    Ok(FeatureStack {
        maps,
        layer_widths: extractor.config().layer_widths(),
    })
}

/// Mean over all maps of the per-map mean squared difference.
pub fn vgg_distance(a: &FeatureStack, b: &FeatureStack) -> Result<f64> {
    if a.layer_widths != b.layer_widths || a.maps.iter().zip(&b.maps).any(|(x, y)| x.shape() != y.shape()) {
        return Err(SarError::contract("feature stacks come from different configurations"));
    }
    let mut total = 0.0;
    for (x, y) in a.maps.iter().zip(&b.maps) {
        let plane = (x.shape()[1] * x.shape()[2]) as f64;
        let sq: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| ((p - q) as f64).powi(2))
            .sum();
        total += sq / plane;
    }
    Ok(total / a.map_count() as f64)
}

/// Differentiable [`vgg_distance`] between two batched layer lists, averaged
/// over the batch as well.
pub fn feature_distance<'g, T: Real>(a: &[Var<'g, T>], b: &[Var<'g, T>]) -> Var<'g, T> {
    assert_eq!(a.len(), b.len());
    let mut maps = 0;
    let mut total: Option<Var<'g, T>> = None;
    for (&x, &y) in a.iter().zip(b) {
        let s = x.shape();
        maps += s[0] * s[1];
        let term = (x - y).square().sum().scale(T::from_usize(1).unwrap() / T::from_usize(s[2] * s[3]).unwrap());
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    total
        .expect("at least one layer")
        .scale(T::one() / T::from_usize(maps).unwrap())
}
