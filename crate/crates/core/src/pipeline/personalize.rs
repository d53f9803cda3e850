use std::sync::Arc;

use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::avatar::{Avatar, Phase};
use super::train::{dataset_samples, fit, gather_grads, mean_breakdown, CsvLog, TrainReport, TrainSample};
use super::{PersonalizationConfig, PriorConfig};
use crate::diffengine::{Adam, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gapnet::{encoding_name, inversion_name, GapNet, Identity, ModelConfig};
use crate::headmodel::{HeadParams, Part};
use crate::losses::{
    finetune_loss, reconstruction_loss, total_prior_loss, LossBreakdown, LossContext, LossWeights, ReferenceCache,
    RenderTerms,
};
use crate::raster::Camera;
use crate::synthdata::{reference_rig, Dataset};

/// Loss history of one personalization stage.
#[derive(Clone, Debug, Default)]
pub struct PersonalizationReport {
    pub history: Vec<LossBreakdown>,
}

impl PersonalizationReport {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |b| b.total)
    }
}

/// The few-shot input: views `shot_views` of frame `frame` of the subject.
pub fn shot_samples(data: &Dataset, cfg: &PersonalizationConfig) -> Result<Vec<TrainSample>> {
    let j = cfg.subject;
    if j >= data.identities.len() || cfg.frame >= data.identities[j].views.len() {
        return Err(Error::Dataset(format!("subject {j} frame {} is not in the dataset", cfg.frame)));
    }
    if let Some(&v) = cfg.shot_views.iter().find(|&&v| v >= data.cameras.len()) {
        return Err(Error::Dataset(format!("shot view {v} is not in the rig")));
    }
    let all = dataset_samples(data, j..j + 1, |v| cfg.shot_views.contains(&v))?;
    let per_frame = cfg.shot_views.len();
    Ok(all[cfg.frame * per_frame..(cfg.frame + 1) * per_frame].to_vec())
}

fn sample_grads(
    net: &GapNet,
    ctx: &LossContext,
    s: &TrainSample,
    identity: &Identity,
) -> Result<(Graph, Var, LossBreakdown)> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, &s.params, None, &s.camera, identity)?;
    let terms = RenderTerms {
        image: out.image,
        rgb: out.rgb,
        alpha: out.alpha,
        scales: out.scales,
        offsets: out.offsets,
        arap: None,
    };
    let (loss, b) = total_prior_loss(&mut g, ctx, &terms, &s.target)?;
    Ok((g, loss, b))
}

fn check_shots(shots: &[TrainSample]) -> Result<()> {
    if shots.is_empty() {
        return Err(Error::InvalidArgument("personalization needs at least one input image".into()));
    }
    Ok(())
}

/// Fits the per-part mixture logits over the codebook with every network
/// parameter frozen, then caches reference renders of the result.
pub fn invert(
    prior: &Avatar,
    shots: &[TrainSample],
    cfg: &PersonalizationConfig,
    weights: &LossWeights,
    mut log: Option<&mut CsvLog<'_>>,
) -> Result<(Avatar, PersonalizationReport)> {
    if prior.phase != Phase::Prior {
        return Err(Error::Phase(format!("inversion needs a prior checkpoint, got phase {}", prior.phase)));
    }
    cfg.validate()?;
    check_shots(shots)?;
    let mut av = prior.clone();
    av.net.store.freeze_all();
    av.net.reset_inversion_weights();
    for part in Part::ALL {
        let id = av.net.pid(&inversion_name(part))?;
        av.net.store.set_frozen(id, false);
    }
    let ctx = LossContext::new(weights.clone());
    let mut adam = Adam::new();
    let mut report = PersonalizationReport::default();
    let items: Vec<(&TrainSample, f64)> = shots.iter().map(|s| (s, 1.0 / shots.len() as f64)).collect();
    for step in 0..cfg.inversion_steps {
        let (grads, logs) = gather_grads(&items, |s| {
            let (g, loss, b) = sample_grads(&av.net, &ctx, s, &Identity::Mixture)?;
            Ok((g.backward(loss)?.into_param_grads(), b))
        })?;
        adam.step(&mut av.net.store, &grads, cfg.inversion_lr)?;
        let b = mean_breakdown(&logs);
        if let Some(l) = log.as_deref_mut() {
            l.row(step, cfg.inversion_lr, &b)?;
        }
        if step % 100 == 0 {
            info!("inversion step {step} loss {:.5}", b.total);
        }
        report.history.push(b);
    }
    let subject = shots[0].params.neutralized();
    let res = shots[0].camera.width;
    av.reference = Some(reference_cache(&av.net, &subject, res, cfg.reference_views)?);
    av.subject = Some(subject);
    av.adam = adam;
    av.phase = Phase::Inverted;
    Ok((av, report))
}

/// Renders of `net` under the mixture identity on the first `m` reference cameras.
pub fn reference_cache(net: &GapNet, subject: &HeadParams, resolution: usize, m: usize) -> Result<ReferenceCache> {
    let cams = reference_cameras(resolution, m)?;
    let images: Vec<Result<Tensor>> = cams
        .par_iter()
        .map(|c| Ok(net.render(subject, c, &Identity::Mixture)?.image))
        .collect();
    Ok(ReferenceCache {
        images: images.into_iter().collect::<Result<_>>()?,
    })
}

/// The first `m` of the 16 reference cameras.
pub fn reference_cameras(resolution: usize, m: usize) -> Result<Vec<Camera>> {
    let mut cams = reference_rig(resolution)?;
    if m == 0 || m > cams.len() {
        return Err(Error::InvalidArgument(format!("reference view count {m} outside 1..={}", cams.len())));
    }
    cams.truncate(m);
    Ok(cams)
}

/// Mean image L1 between current renders on the reference cameras and the
/// cached pre-fine-tuning renders.
pub fn reference_drift(av: &Avatar) -> Result<f64> {
    let cache = av.reference.as_ref().ok_or(Error::MissingReferenceCache)?;
    let subject = av.subject.as_ref().ok_or(Error::MissingReferenceCache)?;
    let res = cache.images.first().map_or(0, |t| t.shape()[2]);
    let cams = reference_cameras(res, cache.images.len())?;
    let id = av.identity()?;
    let d: Vec<Result<f64>> = cams
        .par_iter()
        .zip(&cache.images)
        .map(|(c, r)| {
            let img = av.net.render(subject, c, &id)?.image;
            Ok(img.data().iter().zip(r.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64)
        })
        .collect();
    let d = d.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

enum Job<'a> {
    Shot(&'a TrainSample),
    Reference(usize),
}

/// Fine-tunes the inverted avatar on the shots with per-group learning
/// rates, the mouth parts frozen and reference renders anchoring other views.
pub fn finetune(
    inverted: &Avatar,
    shots: &[TrainSample],
    cfg: &PersonalizationConfig,
    weights: &LossWeights,
    seed: u64,
    mut log: Option<&mut CsvLog<'_>>,
) -> Result<(Avatar, PersonalizationReport)> {
    if inverted.phase != Phase::Inverted {
        return Err(Error::Phase(format!("fine-tuning needs an inverted avatar, got phase {}", inverted.phase)));
    }
    cfg.validate()?;
    check_shots(shots)?;
    let cache = inverted.reference.as_ref().ok_or(Error::MissingReferenceCache)?;
    let subject = inverted.subject.clone().ok_or(Error::MissingReferenceCache)?;
    let m = cache.images.len();
    let per_step = cfg.references_per_step.min(m);
    let cams = reference_cameras(cache.images[0].shape()[2], m)?;

    let mut av = inverted.clone();
    let encodings: Vec<String> = Part::ALL.iter().map(|&p| encoding_name(p)).collect();
    let ids: Vec<_> = av.net.store.ids().collect();
    for id in ids {
        let is_enc = encodings.contains(&av.net.store.group(id).name);
        av.net.store.set_frozen(id, false);
        av.net.store.set_lr_mult(id, if is_enc { 1.0 } else { cfg.lr_other / cfg.lr_encoding })?;
    }
    // Tracked offsets stay as given.
    for id in av.net.store.ids().collect::<Vec<_>>() {
        if av.net.store.group(id).name.starts_with("delta/") {
            av.net.store.set_frozen(id, true);
        }
    }
    for &part in &cfg.frozen_parts {
        for id in av.net.part_params(part) {
            av.net.store.set_frozen(id, true);
        }
    }

    let ctx = LossContext::new(weights.clone());
    let ref_weight = weights.reference * m as f64 / per_step as f64;
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6669_6e65);
    let mut report = PersonalizationReport::default();
    for step in 0..cfg.finetune_steps {
        let chosen = if weights.reference > 0.0 {
            let mut v = sample(&mut rng, m, per_step).into_vec();
            v.sort_unstable();
            v
        } else {
            Vec::new()
        };
        let mut jobs: Vec<(Job, f64)> = shots.iter().map(|s| (Job::Shot(s), 1.0 / shots.len() as f64)).collect();
        jobs.extend(chosen.iter().map(|&i| (Job::Reference(i), ref_weight)));
        let (grads, logs) = gather_grads(&jobs, |job| match job {
            Job::Shot(s) => {
                let (mut g, loss, b) = sample_grads(&av.net, &ctx, s, &Identity::Mixture)?;
                let (loss, _) = finetune_loss(&mut g, &ctx, loss, &[], &[], Some(cache))?;
                Ok((g.backward(loss)?.into_param_grads(), b))
            }
            Job::Reference(i) => {
                let mut g = Graph::new();
                let out = av.net.forward(&mut g, &subject, None, &cams[*i], &Identity::Mixture)?;
                let target = g.constant(cache.images[*i].clone());
                let loss = reconstruction_loss(&mut g, &ctx, out.image, target)?;
                let v = g.value(loss).item();
                let b = LossBreakdown {
                    total: v,
                    reference: v,
                    ..Default::default()
                };
                Ok((g.backward(loss)?.into_param_grads(), b))
            }
        })?;
        let rate = cfg.lr_encoding;
        adam.step(&mut av.net.store, &grads, rate)?;
        let mut b = mean_breakdown(&logs[..shots.len()]);
        let reference: f64 = logs[shots.len()..].iter().map(|b| b.reference).sum::<f64>() * m as f64 / per_step as f64;
        b.reference = reference;
        b.total += weights.reference * reference;
        if let Some(l) = log.as_deref_mut() {
            l.row(step, rate, &b)?;
        }
        if step % 100 == 0 {
            info!("fine-tune step {step} loss {:.5}", b.total);
        }
        report.history.push(b);
    }
    av.adam = adam;
    av.phase = Phase::Finetuned;
    Ok((av, report))
}

/// The no-prior baseline: a single-identity model trained from scratch on
/// the shots alone. Render it with `Identity::Codebook(0)`.
pub fn train_from_scratch(
    template: Arc<crate::headmodel::HeadTemplate>,
    model: &ModelConfig,
    shots: &[TrainSample],
    prior: &PriorConfig,
    steps: usize,
    weights: &LossWeights,
    seed: u64,
) -> Result<(GapNet, TrainReport)> {
    check_shots(shots)?;
    let shots: Vec<TrainSample> = shots
        .iter()
        .cloned()
        .map(|mut s| {
            s.identity = 0;
            s
        })
        .collect();
    let mut net = GapNet::new(template, model.clone(), 1, seed)?;
    let mut adam = Adam::new();
    let ctx = LossContext::new(weights.clone());
    let report = fit(
        &mut net,
        &mut adam,
        &shots,
        &ctx,
        steps,
        prior.batch_size.min(shots.len()),
        (prior.lr, prior.lr_min),
        false,
        seed,
        None,
    )?;
    Ok((net, report))
}
