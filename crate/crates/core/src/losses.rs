//! Training objectives and their differentiable building blocks.
//!
//! Graph-level functions take `[N, C, H, W]` batches and average over the
//! batch. The image-level wrappers evaluate the same code in `f64`.

use sarreg_autodiff::{Graph, Real, Tensor, Var};

use crate::error::{Result, SarError};
use crate::imagecore::Image;
use crate::metrics::SsimParams;
use crate::networks::{critic_graph, critic_input, generator_graph, otsu_split, split_threshold, Binder, Critic, ModelParams};
use crate::perceptual::{feature_distance, FeatureExtractor};

pub const LAMBDA_CYC: f64 = 10.0;
pub const SOFT_NMI_BINS: usize = 32;
/// Added inside the logarithms of the dice and field terms.
pub const LOG_EPS: f64 = 1e-6;
pub const DICE_EPS: f64 = 1e-6;
/// Critic probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;
/// Slope of the sigmoid that turns a fused map into a soft mask.
pub const SOFT_MASK_SHARPNESS: f64 = 25.0;

fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).unwrap()
}

/// Shannon entropy (nats) of a normalized histogram node.
fn entropy<'g, T: Real>(p: Var<'g, T>) -> Var<'g, T> {
    -(p * p.add_scalar(lit(1e-12)).log()).sum()
}

/// Normalized mutual information `(H(a) + H(b)) / H(a, b) - 1` from the soft
/// joint histogram, clamped to `[0, 1]`, averaged over the batch.
pub fn soft_nmi_graph<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>, bins: usize) -> Var<'g, T> {
    let g = a.graph();
    let n = a.shape()[0];
    let mut total: Option<Var<'g, T>> = None;
    for s in 0..n {
        let joint = a.index_batch(s).joint_histogram(b.index_batch(s), bins);
        let ones_col = g.constant(Tensor::full(&[bins, 1], T::one()));
        let ones_row = g.constant(Tensor::full(&[1, bins], T::one()));
        let ha = entropy(joint.matmul(ones_col));
        let hb = entropy(ones_row.matmul(joint));
        let hab = entropy(joint).add_scalar(lit(1e-12));
        let v = ((ha + hb) / hab).add_scalar(-T::one()).clamp(T::zero(), T::one());
        total = Some(total.map_or(v, |t| t + v));
    }
    total.unwrap().scale(T::one() / T::from_usize(n).unwrap())
}

/// `(2 Σ pq + ε) / (Σ p + Σ q + ε)` per sample, averaged over the batch.
pub fn soft_dice_graph<'g, T: Real>(p: Var<'g, T>, q: Var<'g, T>) -> Var<'g, T> {
    let n = p.shape()[0];
    let eps = lit(DICE_EPS);
    let inter = (p * q).sum_per_sample().scale(lit(2.0)).add_scalar(eps);
    let denom = (p.sum_per_sample() + q.sum_per_sample()).add_scalar(eps);
    (inter / denom).sum().scale(T::one() / T::from_usize(n).unwrap())
}

/// Mean windowed SSIM with population statistics, clamped to `[-1, 1]`.
pub fn ssim_graph<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>, p: &SsimParams) -> Var<'g, T> {
    let pool = |x: Var<'g, T>| x.avg_pool(p.window, p.stride);
    let (ma, mb) = (pool(a), pool(b));
    let va = pool(a.square()) - ma.square();
    let vb = pool(b.square()) - mb.square();
    let cov = pool(a * b) - ma * mb;
    let (c1, c2) = (lit(p.c1()), lit(p.c2()));
    let num = (ma * mb).scale(lit(2.0)).add_scalar(c1) * cov.scale(lit(2.0)).add_scalar(c2);
    let den = (ma.square() + mb.square()).add_scalar(c1) * (va + vb).add_scalar(c2);
    (num / den).mean().clamp(-T::one(), T::one())
}

/// Mean squared field difference divided by `(2 d_max)^2`, clamped to `[0, 1]`.
pub fn mse_norm_graph<'g, T: Real>(f1: Var<'g, T>, f2: Var<'g, T>, d_max: f64) -> Var<'g, T> {
    (f1 - f2)
        .square()
        .mean()
        .scale(lit(1.0 / (4.0 * d_max * d_max)))
        .clamp(T::zero(), T::one())
}

/// `-log(clamp(x, ε, 1))`: exactly zero at `x = 1`, finite at `x = 0`.
pub fn neg_log<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    -x.clamp(lit(LOG_EPS), T::one()).log()
}

/// Mean of `-log(clamp(p))`.
fn bce_one<'g, T: Real>(p: Var<'g, T>) -> Var<'g, T> {
    -p.clamp(lit(PROB_CLAMP), lit(1.0 - PROB_CLAMP)).log().mean()
}

/// Mean of `-log(1 - clamp(p))`.
fn bce_zero<'g, T: Real>(p: Var<'g, T>) -> Var<'g, T> {
    -p.clamp(lit(PROB_CLAMP), lit(1.0 - PROB_CLAMP)).one_minus().log().mean()
}

/// Content terms `(1 - NMI, 1 - SSIM, feature distance)`.
pub fn content_graph<'g, T: Real>(
    extractor: &FeatureExtractor,
    reference: Var<'g, T>,
    trans: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
    let g = reference.graph();
    let nmi = soft_nmi_graph(reference, trans, SOFT_NMI_BINS).one_minus();
    let ssim = ssim_graph(reference, trans, &SsimParams::default()).one_minus();
    let both = g.concat_batch(&[reference, trans]);
    let n = reference.shape()[0];
    let maps = extractor.forward(g, both)?;
    let fa: Vec<_> = maps.iter().map(|m| m.slice_batch(0, n)).collect();
    let fb: Vec<_> = maps.iter().map(|m| m.slice_batch(n, n)).collect();
    Ok((nmi, ssim, feature_distance(&fa, &fb)))
}

/// Soft mask `sigmoid(k (fused - t))` with each sample's Otsu threshold `t`
/// held constant. Degenerate maps give an (almost) empty mask.
pub fn soft_mask<'g, T: Real>(fused: Var<'g, T>) -> Var<'g, T> {
    let v = fused.value();
    let [n, c, h, w] = v.dims4();
    let plane = c * h * w;
    let mut thresholds = Vec::with_capacity(n * plane);
    for s in 0..n {
        let vals: Vec<f64> = v.data()[s * plane..(s + 1) * plane]
            .iter()
            .map(|x| x.to_f64().unwrap())
            .collect();
        let t = otsu_split(&vals).map_or(2.0, split_threshold);
        thresholds.extend(std::iter::repeat(lit::<T>(t)).take(plane));
    }
    let t = fused.graph().constant(Tensor::new(v.shape(), thresholds));
    (fused - t).scale(lit(SOFT_MASK_SHARPNESS)).sigmoid()
}

/// One registration batch as graph constants. Masks are 0/1 float tensors.
#[derive(Clone, Copy, Debug)]
pub struct PairBatch<'g, T: Real> {
    pub flt: Var<'g, T>,
    pub reference: Var<'g, T>,
    pub flt_seg: Option<Var<'g, T>>,
    pub ref_seg: Option<Var<'g, T>>,
    /// `(target for the forward field, applied field)` when known.
    pub fields: Option<(Var<'g, T>, Var<'g, T>)>,
    /// Show the known fields to the critics. When false the critics judge
    /// the pair as they would at test time, with no applied field.
    pub critic_fields: bool,
}

/// Which terms to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Every term of the training objective.
    Full,
    /// Adversarial generator terms and the dice term only.
    Transfer,
}

/// Critic evidence for one generator, before concatenation.
#[derive(Clone, Copy, Debug)]
pub struct CriticFeed<'g, T: Real> {
    pub image: Var<'g, T>,
    pub reference: Var<'g, T>,
    pub seg_image: Var<'g, T>,
    pub seg_reference: Var<'g, T>,
    pub field: Var<'g, T>,
    pub target: Option<Var<'g, T>>,
}

impl<'g, T: Real> CriticFeed<'g, T> {
    pub fn stack(&self, graph: &'g Graph<T>, field_scale: f64) -> Var<'g, T> {
        critic_input(
            graph,
            self.image,
            self.reference,
            self.seg_image,
            self.seg_reference,
            self.field,
            self.target,
            field_scale,
        )
    }

    pub fn evidence(&self) -> CriticEvidence<T> {
        let v = |x: Var<'g, T>| (*x.value()).clone();
        CriticEvidence {
            image: v(self.image),
            reference: v(self.reference),
            seg_image: v(self.seg_image),
            seg_reference: v(self.seg_reference),
            field: v(self.field),
            target: self.target.map(v),
        }
    }

    /// The same evidence cut off from the graph.
    pub fn detached(&self) -> Self {
        Self {
            image: self.image.detach(),
            reference: self.reference.detach(),
            seg_image: self.seg_image.detach(),
            seg_reference: self.seg_reference.detach(),
            field: self.field.detach(),
            target: self.target.map(Var::detach),
        }
    }
}

/// Critic evidence as plain tensors, for reuse in another graph.
#[derive(Clone, Debug)]
pub struct CriticEvidence<T: Real> {
    pub image: Tensor<T>,
    pub reference: Tensor<T>,
    pub seg_image: Tensor<T>,
    pub seg_reference: Tensor<T>,
    pub field: Tensor<T>,
    pub target: Option<Tensor<T>>,
}

impl<T: Real> CriticEvidence<T> {
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> CriticFeed<'g, T> {
        CriticFeed {
            image: graph.constant(self.image.clone()),
            reference: graph.constant(self.reference.clone()),
            seg_image: graph.constant(self.seg_image.clone()),
            seg_reference: graph.constant(self.seg_reference.clone()),
            field: graph.constant(self.field.clone()),
            target: self.target.as_ref().map(|t| graph.constant(t.clone())),
        }
    }
}

/// Graph nodes of every loss term. Absent terms are constant zeros.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g, T: Real> {
    pub content_nmi: Var<'g, T>,
    pub content_ssim: Var<'g, T>,
    pub content_vgg: Var<'g, T>,
    pub adv_g: Var<'g, T>,
    pub adv_f: Var<'g, T>,
    pub adv_dice: Var<'g, T>,
    pub adv_field: Var<'g, T>,
    pub cycle: Var<'g, T>,
}

impl<'g, T: Real> LossTerms<'g, T> {
    pub fn total(&self) -> Var<'g, T> {
        self.adv_g
            + self.adv_f
            + self.adv_dice
            + self.adv_field
            + self.content_nmi
            + self.content_ssim
            + self.content_vgg
            + self.cycle.scale(lit(LAMBDA_CYC))
    }

    pub fn breakdown(&self) -> LossBreakdown {
        let f = |v: Var<'g, T>| v.item().to_f64().unwrap();
        LossBreakdown {
            content_nmi: f(self.content_nmi),
            content_ssim: f(self.content_ssim),
            content_vgg: f(self.content_vgg),
            adv_g: f(self.adv_g),
            adv_f: f(self.adv_f),
            adv_dice: f(self.adv_dice),
            adv_field: f(self.adv_field),
            cycle: f(self.cycle),
            lambda_cyc: LAMBDA_CYC,
        }
    }
}

/// Everything one generator-side pass produces.
pub struct ObjectiveGraph<'g, T: Real> {
    pub terms: LossTerms<'g, T>,
    /// Forward generator output judged by the reference critic.
    pub fake_ref: CriticFeed<'g, T>,
    /// Reverse generator output judged by the floating critic.
    pub fake_flt: CriticFeed<'g, T>,
    /// `[N, 2, H, W]` forward field and `[N, 1, H, W]` registered image.
    pub field: Var<'g, T>,
    pub trans: Var<'g, T>,
    /// Soft masks fed to the critic and the dice term.
    pub seg_trans: Var<'g, T>,
    pub seg_ref: Var<'g, T>,
}

/// Build the generator-side objective. Ground-truth masks are used where
/// supplied; otherwise masks come from fused generator maps.
pub fn objective_graph<'g, T: Real>(
    b: &Binder<'_, 'g, T>,
    params: &ModelParams<T>,
    extractor: &FeatureExtractor,
    batch: &PairBatch<'g, T>,
    objective: Objective,
) -> Result<ObjectiveGraph<'g, T>> {
    let g = b.graph();
    let cfg = &params.config.generator;
    let scale = cfg.field_scale;
    let zero = || g.scalar(T::zero());

    let fwd = generator_graph(b, "g", cfg, batch.flt, batch.reference);
    let trans = fwd.warped;
    let seg_ref = batch.ref_seg.unwrap_or_else(|| soft_mask(fwd.fused_fixed));
    let seg_flt = batch.flt_seg.unwrap_or_else(|| soft_mask(fwd.fused_moving));
    let seg_trans = seg_flt.warp(fwd.field);
    let shown = batch.fields.filter(|_| batch.critic_fields);

    let back = generator_graph(b, "f", cfg, trans, batch.flt);
    let seg_flt_for_f = batch.flt_seg.unwrap_or_else(|| soft_mask(back.fused_fixed));
    let fake_ref = CriticFeed {
        image: trans,
        reference: batch.reference,
        seg_image: seg_trans,
        seg_reference: seg_ref,
        field: fwd.field,
        target: shown.map(|f| f.0),
    };
    let fake_flt = CriticFeed {
        image: back.warped,
        reference: batch.flt,
        seg_image: seg_trans.warp(back.field),
        seg_reference: seg_flt_for_f,
        field: back.field,
        target: shown.map(|f| f.1),
    };
    let adv_g = bce_one(critic_graph(b, Critic::Reference, params, fake_ref.stack(g, scale)));
    let adv_f = bce_one(critic_graph(b, Critic::Floating, params, fake_flt.stack(g, scale)));
    let adv_dice = neg_log(soft_dice_graph(seg_ref, seg_trans));
    let adv_field = match (objective, batch.fields) {
        (Objective::Full, Some((target, _))) => neg_log(mse_norm_graph(target, fwd.field, scale).one_minus()),
        _ => zero(),
    };

    let (content_nmi, content_ssim, content_vgg, cycle) = match objective {
        Objective::Full => {
            let (nmi, ssim, vgg) = content_graph(extractor, batch.reference, trans)?;
            let to_flt = generator_graph(b, "f", cfg, batch.reference, batch.flt);
            let again = generator_graph(b, "g", cfg, to_flt.warped, batch.reference);
            let cycle = (back.warped - batch.flt).abs().mean() + (again.warped - batch.reference).abs().mean();
            (nmi, ssim, vgg, cycle)
        }
        Objective::Transfer => (zero(), zero(), zero(), zero()),
    };
    Ok(ObjectiveGraph {
        terms: LossTerms {
            content_nmi,
            content_ssim,
            content_vgg,
            adv_g,
            adv_f,
            adv_dice,
            adv_field,
            cycle,
        },
        fake_ref,
        fake_flt,
        field: fwd.field,
        trans,
        seg_trans,
        seg_ref,
    })
}

/// Critic loss `-[log D(real) + log(1 - D(fake))]` for both critics. The
/// real evidence is a perfect registration: the target image against
/// itself, its mask twice, the known field as the recovered one and the
/// applied field exactly when the fake evidence carries it.
pub fn critic_objective<'g, T: Real>(
    b: &Binder<'_, 'g, T>,
    params: &ModelParams<T>,
    batch: &PairBatch<'g, T>,
    fake_ref: &CriticFeed<'g, T>,
    fake_flt: &CriticFeed<'g, T>,
) -> Var<'g, T> {
    let g = b.graph();
    let scale = params.config.generator.field_scale;
    let mut total: Option<Var<'g, T>> = None;
    for (critic, fake, image, seg, known) in [
        (
            Critic::Reference,
            fake_ref,
            batch.reference,
            batch.ref_seg.unwrap_or(fake_ref.seg_reference),
            batch.fields.map(|f| f.0),
        ),
        (
            Critic::Floating,
            fake_flt,
            batch.flt,
            batch.flt_seg.unwrap_or(fake_flt.seg_reference),
            batch.fields.map(|f| f.1),
        ),
    ] {
        let fake = fake.detached();
        let field = known.or(fake.target).unwrap_or(fake.field);
        let real = CriticFeed {
            image,
            reference: image,
            seg_image: seg.detach(),
            seg_reference: seg.detach(),
            field,
            target: fake.target,
        };
        let (d_real, d_fake) = (
            critic_graph(b, critic, params, real.stack(g, scale)),
            critic_graph(b, critic, params, fake.stack(g, scale)),
        );
        let term = bce_one(d_real) + bce_zero(d_fake);
        total = Some(total.map_or(term, |t| t + term));
    }
    total.unwrap()
}

/// Scalar view of every objective term.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub content_nmi: f64,
    pub content_ssim: f64,
    pub content_vgg: f64,
    pub adv_g: f64,
    pub adv_f: f64,
    pub adv_dice: f64,
    pub adv_field: f64,
    pub cycle: f64,
    pub lambda_cyc: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.adv_g
            + self.adv_f
            + self.adv_dice
            + self.adv_field
            + self.content_nmi
            + self.content_ssim
            + self.content_vgg
            + self.lambda_cyc * self.cycle
    }

    /// Named components in log-column order.
    pub fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("content_nmi", self.content_nmi),
            ("content_ssim", self.content_ssim),
            ("content_vgg", self.content_vgg),
            ("adv_g", self.adv_g),
            ("adv_f", self.adv_f),
            ("adv_dice", self.adv_dice),
            ("adv_field", self.adv_field),
            ("cycle", self.cycle),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Generator objective from precomputed pieces: adversarial terms, content
/// sum and cycle term.
pub fn full_objective(adversarial: f64, content: f64, cycle: f64) -> f64 {
    adversarial + content + LAMBDA_CYC * cycle
}

/// `(loss_D, loss_G)` of the non-saturating GAN objective.
pub fn gan_loss(d_real: f64, d_fake: f64) -> (f64, f64) {
    let c = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (r, f) = (c(d_real), c(d_fake));
    (-(r.ln() + (1.0 - f).ln()), -f.ln())
}

/// `adv_g + adv_f - log(dice + ε) [- log(1 - mse_norm + ε)]`.
pub fn adversarial_total(adv_g: f64, adv_f: f64, soft_dice: f64, mse_norm: Option<f64>) -> f64 {
    let neg_log = |x: f64| -x.clamp(LOG_EPS, 1.0).ln();
    adv_g + adv_f + neg_log(soft_dice) + mse_norm.map_or(0.0, |m| neg_log(1.0 - m))
}

fn image_pair<T: Real>(a: &Image, b: &Image) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.shape() != b.shape() {
        return Err(SarError::contract(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok((a.to_tensor(), b.to_tensor()))
}

pub fn soft_nmi(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    let (ta, tb) = image_pair::<f64>(a, b)?;
    let g = Graph::new();
    Ok(soft_nmi_graph(g.constant(ta), g.constant(tb), bins).item())
}

/// Soft dice of two same-sized soft masks with values in `[0, 1]`.
pub fn soft_dice(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(SarError::contract("soft masks must be non-empty and equally sized"));
    }
    let inter: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + q.iter().sum::<f64>();
    Ok((2.0 * inter + DICE_EPS) / (total + DICE_EPS))
}

/// Content loss and its `(nmi, ssim, vgg)` components.
pub fn content_loss(reference: &Image, trans: &Image, extractor: &FeatureExtractor) -> Result<(f64, [f64; 3])> {
    let (ta, tb) = image_pair::<f64>(reference, trans)?;
    let g = Graph::new();
    let (a, b, c) = content_graph(extractor, g.constant(ta), g.constant(tb))?;
    let parts = [a.item(), b.item(), c.item()];
    Ok((parts.iter().sum(), parts))
}

/// Cycle term for one pair using the reverse generator `f` and forward
/// generator `g` of `params` (inference statistics).
pub fn cycle_loss(params: &ModelParams, flt: &Image, reference: &Image) -> Result<f64> {
    let (ta, tb) = image_pair::<f64>(flt, reference)?;
    params.check_shape(flt.shape())?;
    let p64 = params.cast::<f64>();
    let g = Graph::new();
    let b = Binder::new(&p64.store, &g, crate::networks::Phase::Eval);
    let cfg = &params.config.generator;
    let (x, y) = (g.constant(ta), g.constant(tb));
    let fwd = generator_graph(&b, "g", cfg, x, y);
    let back = generator_graph(&b, "f", cfg, fwd.warped, x);
    let to_flt = generator_graph(&b, "f", cfg, y, x);
    let again = generator_graph(&b, "g", cfg, to_flt.warped, y);
    Ok(((back.warped - x).abs().mean() + (again.warped - y).abs().mean()).item())
}
