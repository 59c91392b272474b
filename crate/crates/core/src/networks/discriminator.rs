//! Convolutional critic scoring how plausible a registration result is.
//!
//! Input channels: registered image, its target image, both masks, the
//! recovered field and the applied field (both divided by the field scale;
//! the applied field is zero when unknown).

use sarreg_autodiff::{Graph, Real, Tensor, Var};

use super::params::{Binder, Phase};
use super::ModelParams;
use crate::error::{Result, SarError};
use crate::imagecore::{DisplacementField, Image, SegMask};

pub(crate) const CRITIC_CHANNELS: usize = 8;
const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Critic {
    /// Judges images registered into the reference frame (`g` outputs).
    Reference,
    /// Judges images mapped back into the floating frame (`f` outputs).
    Floating,
}

impl Critic {
    pub fn prefix(self) -> &'static str {
        match self {
            Critic::Reference => "d_ref",
            Critic::Floating => "d_flt",
        }
    }
}

/// Stack critic evidence into `[N, 8, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn critic_input<'g, T: Real>(
    graph: &'g Graph<T>,
    image: Var<'g, T>,
    reference: Var<'g, T>,
    seg_image: Var<'g, T>,
    seg_reference: Var<'g, T>,
    field: Var<'g, T>,
    target: Option<Var<'g, T>>,
    field_scale: f64,
) -> Var<'g, T> {
    let inv = T::from_f64(1.0 / field_scale).unwrap();
    let target = match target {
        Some(t) => t.scale(inv),
        None => graph.constant(Tensor::zeros(&field.shape())),
    };
    graph.concat(&[image, reference, seg_image, seg_reference, field.scale(inv), target])
}

/// Probabilities `[N, 1]` that each sample is a correct registration.
pub fn critic_graph<'g, T: Real>(b: &Binder<'_, 'g, T>, critic: Critic, params: &ModelParams<T>, input: Var<'g, T>) -> Var<'g, T> {
    let net = critic.prefix();
    let cfg = &params.config.discriminator;
    let leak = T::from_f64(LEAK).unwrap();
    let mut h = input;
    for (i, stride) in cfg.strides().into_iter().enumerate() {
        h = h
            .conv2d(b.var(&format!("{net}.conv{i}.weight")), stride, 1)
            .add_channel_bias(b.var(&format!("{net}.conv{i}.bias")))
            .leaky_relu(leak);
    }
    let n = h.shape()[0];
    let flat = h.value().numel() / n;
    h.reshape(&[n, flat])
        .matmul(b.var(&format!("{net}.dense1.weight")))
        .add_row_bias(b.var(&format!("{net}.dense1.bias")))
        .leaky_relu(leak)
        .matmul(b.var(&format!("{net}.dense2.weight")))
        .add_row_bias(b.var(&format!("{net}.dense2.bias")))
        .sigmoid()
}

/// One set of critic evidence.
#[derive(Clone, Debug)]
pub struct CriticSample {
    pub image: Image,
    pub reference: Image,
    pub seg_image: SegMask,
    pub seg_reference: SegMask,
    pub field: DisplacementField,
    pub target: Option<DisplacementField>,
}

/// Score a batch. Samples are independent of each other.
pub fn discriminator_batch(params: &ModelParams, critic: Critic, samples: &[CriticSample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(SarError::contract("empty critic batch"));
    }
    let with_target = samples[0].target.is_some();
    for s in samples {
        let shape = s.image.shape();
        params.check_shape(shape)?;
        if s.reference.shape() != shape
            || s.seg_image.shape() != shape
            || s.seg_reference.shape() != shape
            || s.field.shape() != shape
            || s.target.as_ref().is_some_and(|t| t.shape() != shape)
        {
            return Err(SarError::contract("critic inputs have inconsistent shapes"));
        }
        if s.target.is_some() != with_target {
            return Err(SarError::contract("critic batch mixes samples with and without applied fields"));
        }
    }
    let graph = Graph::<f32>::new();
    let b = Binder::new(&params.store, &graph, Phase::Eval);
    let stack = |f: &dyn Fn(&CriticSample) -> Tensor<f32>| {
        let parts: Vec<_> = samples.iter().map(|s| graph.constant(f(s))).collect();
        graph.concat_batch(&parts)
    };
    let input = critic_input(
        &graph,
        stack(&|s| s.image.to_tensor()),
        stack(&|s| s.reference.to_tensor()),
        stack(&|s| s.seg_image.to_tensor()),
        stack(&|s| s.seg_reference.to_tensor()),
        stack(&|s| s.field.to_tensor()),
        with_target.then(|| stack(&|s| s.target.as_ref().unwrap().to_tensor())),
        params.config.generator.field_scale,
    );
    let p = critic_graph(&b, critic, params, input);
    Ok(p.value().data().iter().map(|&v| v as f64).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn discriminator_forward(
    params: &ModelParams,
    critic: Critic,
    trans: &Image,
    ref_img: &Image,
    seg_trans: &SegMask,
    seg_ref: &SegMask,
    def_recv: &DisplacementField,
    def_app: Option<&DisplacementField>,
) -> Result<f64> {
    let sample = CriticSample {
        image: trans.clone(),
        reference: ref_img.clone(),
        seg_image: seg_trans.clone(),
        seg_reference: seg_ref.clone(),
        field: def_recv.clone(),
        target: def_app.cloned(),
    };
    Ok(discriminator_batch(params, critic, &[sample])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64, with_target: bool) -> CriticSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Image::from_fn(16, 16, |_, _| rng.gen::<f32>()).unwrap();
        let (image, reference) = (img(), img());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut mask = || SegMask::from_fn(16, 16, |_, _| rng.gen::<bool>());
        let (seg_image, seg_reference) = (mask(), mask());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let mut field = || DisplacementField::from_fn(16, 16, |_, _| (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0))).unwrap();
        let f = field();
        let target = with_target.then(field);
        CriticSample {
            image,
            reference,
            seg_image,
            seg_reference,
            field: f,
            target,
        }
    }

    #[test]
    fn bounded_and_deterministic() {
        let p = ModelParams::init(ModelConfig::desk(16, 16), 4).unwrap();
        for seed in 0..5 {
            let s = sample(seed, seed % 2 == 0);
            let a = discriminator_batch(&p, Critic::Reference, &[s.clone()]).unwrap()[0];
            let b = discriminator_batch(&p, Critic::Reference, &[s]).unwrap()[0];
            assert!(a > 0.0 && a < 1.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let p = ModelParams::init(ModelConfig::desk(16, 16), 4).unwrap();
        let samples: Vec<_> = (0..4).map(|s| sample(s, true)).collect();
        let batched = discriminator_batch(&p, Critic::Floating, &samples).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| samples[i].clone()).collect();
        let out = discriminator_batch(&p, Critic::Floating, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((out[k] - batched[i]).abs() < 1e-6);
            let single = discriminator_batch(&p, Critic::Floating, &[samples[i].clone()]).unwrap()[0];
            assert!((single - batched[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let p = ModelParams::init(ModelConfig::desk(16, 16), 4).unwrap();
        let mut s = sample(0, false);
        s.seg_image = SegMask::empty(8, 8);
        assert!(discriminator_batch(&p, Critic::Reference, &[s]).is_err());
    }
}
