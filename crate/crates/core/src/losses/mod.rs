//! Training objectives: image reconstruction, masked mouth term,
//! primitive regularizers and the view-regularized fine-tuning objective.

mod perceptual;
mod ssim;

use serde::{Deserialize, Serialize};

pub use perceptual::{PerceptualBackend, RandomPyramid, PYRAMID_SCALES, PYRAMID_WIDTH};
pub use ssim::{ssim, ssim_op, SSIM_SIGMA, SSIM_WINDOW};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mouth: f64,
    pub l1: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub alpha: f64,
    pub scale: f64,
    pub position: f64,
    pub arap: f64,
    pub reference: f64,
    pub eps_scale: f64,
    pub eps_position: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mouth: 10.0,
            l1: 0.8,
            ssim: 0.2,
            lpips: 0.4,
            alpha: 1.0,
            scale: 1.0,
            position: 0.01,
            arap: 1.0,
            reference: 0.01,
            eps_scale: 0.6,
            eps_position: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mouth,
            self.l1,
            self.ssim,
            self.lpips,
            self.alpha,
            self.scale,
            self.position,
            self.arap,
            self.reference,
            self.eps_scale,
            self.eps_position,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth for one rendered view.
#[derive(Clone, Debug)]
pub struct Supervision {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Binary head mask `[1, H, W]`.
    pub mask: Tensor,
    /// Binary mouth mask `[1, H, W]`.
    pub mouth: Tensor,
}

impl Supervision {
    pub fn check(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("supervision image", "[3, H, W]", format!("{s:?}")));
        }
        for m in [&self.mask, &self.mouth] {
            if m.shape() != [1, s[1], s[2]] {
                return Err(Error::shape("supervision mask", format!("[1, {}, {}]", s[1], s[2]), format!("{:?}", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument("supervision masks must be binary".into()));
            }
        }
        Ok(())
    }
}

/// Scalar values of each term of a composed loss, for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec_refined: f64,
    pub rec_rgb: f64,
    pub mouth: f64,
    pub opacity: f64,
    pub scale: f64,
    pub position: f64,
    pub arap: f64,
    pub reference: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "total,rec_refined,rec_rgb,mouth,opacity,scale,position,arap,reference";

    pub fn csv_row(&self) -> String {
        [
            self.total,
            self.rec_refined,
            self.rec_rgb,
            self.mouth,
            self.opacity,
            self.scale,
            self.position,
            self.arap,
            self.reference,
        ]
        .iter()
        .map(|v| format!("{v:.9e}"))
        .collect::<Vec<_>>()
        .join(",")
    }
}

/// Weights plus the perceptual backend.
pub struct LossContext {
    pub weights: LossWeights,
    pub perceptual: Box<dyn PerceptualBackend>,
}

impl LossContext {
    pub fn new(weights: LossWeights) -> Self {
        LossContext {
            weights,
            perceptual: Box::new(RandomPyramid::default()),
        }
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?}", g.shape(a)), format!("{:?}", g.shape(b))));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "l1_loss")?;
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `λ_l1·L1 + λ_ssim·(1 − SSIM) + λ_lpips·perceptual`.
pub fn reconstruction_loss(g: &mut Graph, ctx: &LossContext, image: Var, target: Var) -> Result<Var> {
    same_shape(g, image, target, "reconstruction_loss")?;
    let w = &ctx.weights;
    let l1 = l1_loss(g, image, target)?;
    let s = ssim_op(g, image, target)?;
    let one_minus = g.scale(s, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let mut terms = vec![(w.l1, l1), (w.ssim, one_minus)];
    if w.lpips > 0.0 {
        let p = ctx.perceptual.distance(g, image, target)?;
        terms.push((w.lpips, p));
    }
    Ok(g.weighted_sum(&terms))
}

/// `‖max(x, eps)‖₂` over every entry, with the literal dead zone below `eps`.
pub fn floored_norm(g: &mut Graph, x: Var, eps: f64) -> Var {
    let n: usize = g.shape(x).iter().product();
    let m = g.max_scalar(x, eps);
    let flat = g.reshape(m, &[1, n]);
    let r = g.row_norm(flat);
    g.reshape(r, &[])
}

/// Inputs to the regularizer.
pub struct RegularizerInputs {
    /// Rendered accumulated opacity `[1, H, W]`.
    pub alpha: Var,
    pub mask: Tensor,
    /// Local scales `[n, 3]`.
    pub scales: Var,
    /// Local position offsets `[n, 3]`.
    pub offsets: Var,
    /// ARAP energy between the posed and reference meshes, if any.
    pub arap: Option<Var>,
}

/// Returns the regularizer and its four weighted-free components
/// `(opacity, scale, position, arap)`.
pub fn regularization_loss(g: &mut Graph, w: &LossWeights, r: &RegularizerInputs) -> Result<(Var, [Var; 4])> {
    if g.shape(r.alpha) != r.mask.shape() {
        return Err(Error::shape("regularization_loss", format!("{:?}", r.mask.shape()), format!("{:?}", g.shape(r.alpha))));
    }
    let mask = g.constant(r.mask.clone());
    let opacity = l1_loss(g, r.alpha, mask)?;
    let scale = floored_norm(g, r.scales, w.eps_scale);
    let position = floored_norm(g, r.offsets, w.eps_position);
    let arap = match r.arap {
        Some(a) => a,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let total = g.weighted_sum(&[(w.alpha, opacity), (w.scale, scale), (w.position, position), (w.arap, arap)]);
    Ok((total, [opacity, scale, position, arap]))
}

/// Rendered quantities consumed by the prior objective.
pub struct RenderTerms {
    pub image: Var,
    pub rgb: Var,
    pub alpha: Var,
    pub scales: Var,
    pub offsets: Var,
    pub arap: Option<Var>,
}

fn masked(g: &mut Graph, x: Var, mouth3: &Tensor) -> Var {
    let m = g.constant(mouth3.clone());
    g.mul(x, m)
}

fn broadcast_mask(mask: &Tensor, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels * mask.len());
    for _ in 0..channels {
        data.extend_from_slice(mask.data());
    }
    let s = mask.shape();
    Tensor::new(&[channels, s[1], s[2]], data)
}

/// `L_rec(I, I*) + L_rec(I_rgb, I*) + λ_m·L_rec(I_m, I*_m) + L_reg`.
pub fn total_prior_loss(g: &mut Graph, ctx: &LossContext, out: &RenderTerms, sup: &Supervision) -> Result<(Var, LossBreakdown)> {
    sup.check()?;
    let w = &ctx.weights;
    let target = g.constant(sup.image.clone());
    let rec_refined = reconstruction_loss(g, ctx, out.image, target)?;
    let rec_rgb = reconstruction_loss(g, ctx, out.rgb, target)?;
    let mouth = if w.mouth > 0.0 && sup.mouth.data().iter().any(|&v| v != 0.0) {
        let m3 = broadcast_mask(&sup.mouth, 3);
        let im = masked(g, out.image, &m3);
        let tm = Tensor::new(
            &m3.shape().to_vec(),
            sup.image.data().iter().zip(m3.data()).map(|(a, b)| a * b).collect(),
        );
        let tm = g.constant(tm);
        reconstruction_loss(g, ctx, im, tm)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let (reg, [opacity, scale, position, arap]) = regularization_loss(
        g,
        w,
        &RegularizerInputs {
            alpha: out.alpha,
            mask: sup.mask.clone(),
            scales: out.scales,
            offsets: out.offsets,
            arap: out.arap,
        },
    )?;
    let total = g.weighted_sum(&[(1.0, rec_refined), (1.0, rec_rgb), (w.mouth, mouth), (1.0, reg)]);
    let v = |g: &Graph, x: Var| g.value(x).data()[0];
    let breakdown = LossBreakdown {
        total: v(g, total),
        rec_refined: v(g, rec_refined),
        rec_rgb: v(g, rec_rgb),
        mouth: v(g, mouth),
        opacity: v(g, opacity),
        scale: v(g, scale),
        position: v(g, position),
        arap: v(g, arap),
        reference: 0.0,
    };
    Ok((total, breakdown))
}

/// Frozen renders on the reference cameras, captured before fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCache {
    pub images: Vec<Tensor>,
}

/// `data + λ_ref·Σ_i L_rec(R_i, R̃_i)`. `renders[i]` pairs with
/// `cache.images[indices[i]]`.
pub fn finetune_loss(
    g: &mut Graph,
    ctx: &LossContext,
    data: Var,
    renders: &[Var],
    indices: &[usize],
    cache: Option<&ReferenceCache>,
) -> Result<(Var, f64)> {
    let cache = cache.ok_or(Error::MissingReferenceCache)?;
    if renders.len() != indices.len() {
        return Err(Error::Dimension {
            what: "reference renders",
            expected: indices.len(),
            got: renders.len(),
        });
    }
    let mut terms = vec![(1.0, data)];
    let mut reference = 0.0;
    for (&r, &i) in renders.iter().zip(indices) {
        let target = cache
            .images
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("reference view {i} is not cached")))?;
        let t = g.constant(target.clone());
        let l = reconstruction_loss(g, ctx, r, t)?;
        reference += g.value(l).data()[0];
        terms.push((ctx.weights.reference, l));
    }
    Ok((g.weighted_sum(&terms), reference))
}
