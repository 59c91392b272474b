//! Residual registration generator.
//!
//! Both inputs pass through a shared three-layer encoder; the joint path
//! downsamples once more, runs the residual blocks at quarter resolution and
//! upsamples with skip connections to a per-pixel field head. The moving
//! image is then warped by the field, so the warped image and the field can
//! never disagree.

use sarreg_autodiff::{Graph, Real, Var};

use super::params::{Binder, Phase};
use super::segmentation::{fuse_maps, masks_from_fused};
use super::{GeneratorConfig, ModelParams};
use crate::error::{Result, SarError};
use crate::imagecore::{warp_mask, DisplacementField, Image, SegMask};

/// Graph nodes produced by one generator pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorGraph<'g, T: Real> {
    /// `[N, 2, H, W]` backward-warping field.
    pub field: Var<'g, T>,
    /// `[N, 1, H, W]` moving image warped by `field`.
    pub warped: Var<'g, T>,
    /// `[N, 1, H, W]` fused encoder maps of the moving and fixed inputs.
    pub fused_moving: Var<'g, T>,
    pub fused_fixed: Var<'g, T>,
}

fn conv_bn_relu<'g, T: Real>(b: &Binder<'_, 'g, T>, layer: &str, x: Var<'g, T>, stride: usize) -> Var<'g, T> {
    let y = x.conv2d(b.var(&format!("{layer}.weight")), stride, 1);
    b.batch_norm(&format!("{layer}_bn"), y).relu()
}

/// Generator `net` (`"g"` or `"f"`) applied to `[N, 1, H, W]` batches.
pub fn generator_graph<'g, T: Real>(
    b: &Binder<'_, 'g, T>,
    net: &str,
    cfg: &GeneratorConfig,
    moving: Var<'g, T>,
    fixed: Var<'g, T>,
) -> GeneratorGraph<'g, T> {
    let g = b.graph();
    let n = moving.shape()[0];
    let height = moving.shape()[2];
    let both = g.concat_batch(&[moving, fixed]);
    let e1 = conv_bn_relu(b, &format!("{net}.enc1"), both, 1);
    let e2 = conv_bn_relu(b, &format!("{net}.enc2"), e1, 2);
    let e3 = conv_bn_relu(b, &format!("{net}.enc3"), e2, 1);
    let pair = |x: Var<'g, T>| g.concat(&[x.slice_batch(0, n), x.slice_batch(n, n)]);

    let mut h = conv_bn_relu(b, &format!("{net}.down"), pair(e3), 2);
    for i in 0..cfg.n_res_blocks {
        let r = conv_bn_relu(b, &format!("{net}.res{i}.a"), h, 1);
        let r = r.conv2d(b.var(&format!("{net}.res{i}.b.weight")), 1, 1);
        h = h + b.batch_norm(&format!("{net}.res{i}.b_bn"), r);
    }
    let h = conv_bn_relu(b, &format!("{net}.up1"), g.concat(&[h.upsample_nearest(2), pair(e3)]), 1);
    let h = conv_bn_relu(b, &format!("{net}.up2"), g.concat(&[h.upsample_nearest(2), pair(e1)]), 1);
    let raw = h
        .conv2d(b.var(&format!("{net}.head.weight")), 1, 1)
        .add_channel_bias(b.var(&format!("{net}.head.bias")));
    let field = raw.tanh().scale(T::from_f64(cfg.field_scale).unwrap());
    let warped = moving.warp(field);

    let fused = fuse_maps(&[e1, e2, e3], b.var(&format!("{net}.fusion.weights")), height);
    GeneratorGraph {
        field,
        warped,
        fused_moving: fused.slice_batch(0, n),
        fused_fixed: fused.slice_batch(n, n),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput {
    pub trans: Image,
    pub def_recv: DisplacementField,
    /// Fused-map masks of the floating and reference inputs.
    pub seg_flt: SegMask,
    pub seg_ref: SegMask,
    /// The floating ground-truth mask when given, else `seg_flt`, warped
    /// with nearest-neighbour sampling.
    pub seg_trans: SegMask,
}

fn check_pair(params: &ModelParams, a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SarError::contract(format!("image shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    params.check_shape(a.shape())
}

/// Inference pass of `g` with running normalization statistics.
pub fn generator_forward(
    params: &ModelParams,
    flt: &Image,
    ref_img: &Image,
    flt_seg: Option<&SegMask>,
) -> Result<GeneratorOutput> {
    check_pair(params, flt, ref_img)?;
    if let Some(m) = flt_seg {
        if m.shape() != flt.shape() {
            return Err(SarError::contract("floating mask shape differs from image"));
        }
    }
    let graph = Graph::<f32>::new();
    let b = Binder::new(&params.store, &graph, Phase::Eval);
    let out = generator_graph(
        &b,
        "g",
        &params.config.generator,
        graph.constant(flt.to_tensor()),
        graph.constant(ref_img.to_tensor()),
    );
    let (h, w) = flt.shape();
    let def_recv = DisplacementField::from_tensor(&out.field.value())?;
    let trans = Image::from_clamped(h, w, out.warped.value().data().to_vec())?;
    let seg_flt = masks_from_fused(&out.fused_moving)?.remove(0).0;
    let seg_ref = masks_from_fused(&out.fused_fixed)?.remove(0).0;
    let seg_trans = warp_mask(flt_seg.unwrap_or(&seg_flt), &def_recv)?;
    Ok(GeneratorOutput {
        trans,
        def_recv,
        seg_flt,
        seg_ref,
        seg_trans,
    })
}

/// Inference pass of the reverse generator `f`, warping `moving` towards
/// `fixed`.
pub fn reverse_generator_forward(params: &ModelParams, moving: &Image, fixed: &Image) -> Result<Image> {
    check_pair(params, moving, fixed)?;
    let graph = Graph::<f32>::new();
    let b = Binder::new(&params.store, &graph, Phase::Eval);
    let out = generator_graph(
        &b,
        "f",
        &params.config.generator,
        graph.constant(moving.to_tensor()),
        graph.constant(fixed.to_tensor()),
    );
    Image::from_clamped(moving.height(), moving.width(), out.warped.value().data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{warp, InterpMode};
    use crate::networks::{ModelConfig, LAST_LAYER};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(shift: f32) -> Image {
        Image::from_fn(16, 16, |r, c| {
            let d = ((r as f32 - 8.0 - shift).powi(2) + (c as f32 - 7.0).powi(2)).sqrt();
            (1.0 - d / 8.0).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    fn randomize_head(p: &mut ModelParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in [format!("{LAST_LAYER}.weight"), format!("{LAST_LAYER}.bias")] {
            for v in p.store.get_mut(&name).unwrap().data_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
        }
    }

    #[test]
    fn identity_at_init() {
        let p = ModelParams::init(ModelConfig::desk(16, 16), 0).unwrap();
        let (flt, ref_img) = (blob(2.0), blob(0.0));
        let out = generator_forward(&p, &flt, &ref_img, None).unwrap();
        assert_eq!(out.def_recv, DisplacementField::zeros(16, 16));
        assert_eq!(out.trans, flt);
        assert_eq!(out.seg_trans, out.seg_flt);
        let back = reverse_generator_forward(&p, &out.trans, &flt).unwrap();
        assert_eq!(back, flt);
    }

    #[test]
    fn trans_is_the_warped_floating_image() {
        let mut p = ModelParams::init(ModelConfig::desk(16, 16), 0).unwrap();
        randomize_head(&mut p, 5);
        let (flt, ref_img) = (blob(2.0), blob(0.0));
        let out = generator_forward(&p, &flt, &ref_img, None).unwrap();
        assert!(out.def_recv.max_norm() > 0.0);
        let bound = out.def_recv.rows().iter().chain(out.def_recv.cols()).all(|v| v.abs() <= 20.0);
        assert!(bound);
        assert_eq!(out.trans, warp(&flt, &out.def_recv, InterpMode::Bilinear).unwrap());
        let gt = SegMask::from_fn(16, 16, |r, _| r > 8);
        let with_gt = generator_forward(&p, &flt, &ref_img, Some(&gt)).unwrap();
        assert_eq!(with_gt.seg_trans, warp_mask(&gt, &out.def_recv).unwrap());
    }

    #[test]
    fn shape_violations() {
        let p = ModelParams::init(ModelConfig::desk(16, 16), 0).unwrap();
        let small = Image::constant(8, 8, 0.5).unwrap();
        assert!(generator_forward(&p, &small, &small, None).is_err());
        assert!(generator_forward(&p, &blob(0.0), &small, None).is_err());
    }
}
