use std::io::Write;
use std::sync::Arc;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::avatar::Avatar;
use super::metrics::psnr;
use crate::config::RunConfig;
use crate::diffengine::{cosine_lr, Adam, Graph, ParamGrads, Tensor};
use crate::error::{Error, Result};
use crate::gapnet::{offsets_name, GapNet, Identity};
use crate::headmodel::{arap_energy_op, pose_mesh, HeadParams, Neighborhoods};
use crate::losses::{total_prior_loss, LossBreakdown, LossContext, RenderTerms, Supervision};
use crate::raster::Camera;
use crate::synthdata::Dataset;

/// One supervised view.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Codebook row (or offset table) this view belongs to.
    pub identity: usize,
    pub params: Arc<HeadParams>,
    pub camera: Camera,
    pub target: Arc<Supervision>,
}

/// Samples for `identities`, every frame, and the views kept by `keep_view`.
pub fn dataset_samples(
    data: &Dataset,
    identities: std::ops::Range<usize>,
    keep_view: impl Fn(usize) -> bool,
) -> Result<Vec<TrainSample>> {
    if identities.end > data.identities.len() {
        return Err(Error::Dataset(format!(
            "dataset has {} identities, {} requested",
            data.identities.len(),
            identities.end
        )));
    }
    let mut out = Vec::new();
    for j in identities.clone() {
        let id = &data.identities[j];
        for (f, views) in id.views.iter().enumerate() {
            let params = Arc::new(id.identity.frames[f].clone());
            for (v, sup) in views.iter().enumerate() {
                if keep_view(v) {
                    out.push(TrainSample {
                        identity: j - identities.start,
                        params: params.clone(),
                        camera: data.cameras[v].clone(),
                        target: Arc::new(sup.clone()),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Per-step loss history of an optimization run.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<LossBreakdown>,
}

impl TrainReport {
    /// Mean total loss over the first or last `n` steps.
    pub fn head_mean(&self, n: usize) -> f64 {
        mean(self.history.iter().take(n).map(|b| b.total))
    }

    pub fn tail_mean(&self, n: usize) -> f64 {
        mean(self.history.iter().rev().take(n).map(|b| b.total))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// CSV training log: `step,lr,` followed by the loss components.
pub struct CsvLog<'a> {
    out: &'a mut dyn Write,
    every: usize,
}

impl<'a> CsvLog<'a> {
    pub fn new(out: &'a mut dyn Write, every: usize) -> Result<CsvLog<'a>> {
        writeln!(out, "step,lr,{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io("training log", e))?;
        Ok(CsvLog { out, every: every.max(1) })
    }

    pub(crate) fn row(&mut self, step: usize, lr: f64, b: &LossBreakdown) -> Result<()> {
        if step % self.every == 0 {
            writeln!(self.out, "{step},{lr:.6e},{}", b.csv_row()).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

pub(crate) fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.total += b.total / n;
        m.rec_refined += b.rec_refined / n;
        m.rec_rgb += b.rec_rgb / n;
        m.mouth += b.mouth / n;
        m.opacity += b.opacity / n;
        m.scale += b.scale / n;
        m.position += b.position / n;
        m.arap += b.arap / n;
        m.reference += b.reference / n;
    }
    m
}

/// Evaluates `f` on every item in parallel and sums the gradients in item
/// order, each scaled by its weight.
pub(crate) fn gather_grads<T: Sync>(
    items: &[(T, f64)],
    f: impl Fn(&T) -> Result<(ParamGrads, LossBreakdown)> + Sync,
) -> Result<(ParamGrads, Vec<LossBreakdown>)> {
    let parts: Vec<Result<(ParamGrads, LossBreakdown)>> = items.par_iter().map(|(t, _)| f(t)).collect();
    let mut acc = ParamGrads::new();
    let mut logs = Vec::with_capacity(items.len());
    for (r, (_, w)) in parts.into_iter().zip(items) {
        let (mut g, b) = r?;
        if !b.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        g.scale(*w);
        acc.accumulate(g);
        logs.push(b);
    }
    Ok((acc, logs))
}

/// Mesh-and-render loss of one prior sample with its gradients.
fn prior_sample_grads(
    net: &GapNet,
    ctx: &LossContext,
    nb: &Arc<Neighborhoods>,
    s: &TrainSample,
    train_offsets: bool,
) -> Result<(ParamGrads, LossBreakdown)> {
    let mut g = Graph::new();
    let delta = if train_offsets {
        Some(g.param(&net.store, net.pid(&offsets_name(s.identity))?))
    } else {
        None
    };
    let out = net.forward(&mut g, &s.params, delta, &s.camera, &Identity::Codebook(s.identity))?;
    let arap = if train_offsets {
        let tracked = pose_mesh(&net.template, &s.params)?;
        let reference = g.constant(Tensor::new(&[tracked.len(), 3], tracked.iter().flatten().copied().collect()));
        Some(arap_energy_op(&mut g, nb.clone(), out.posed_vertices, reference)?)
    } else {
        None
    };
    let terms = RenderTerms {
        image: out.image,
        rgb: out.rgb,
        alpha: out.alpha,
        scales: out.scales,
        offsets: out.offsets,
        arap,
    };
    let (loss, b) = total_prior_loss(&mut g, ctx, &terms, &s.target)?;
    Ok((g.backward(loss)?.into_param_grads(), b))
}

/// Adam with a cosine schedule over random minibatches of `samples`.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    net: &mut GapNet,
    adam: &mut Adam,
    samples: &[TrainSample],
    ctx: &LossContext,
    steps: usize,
    batch_size: usize,
    lr: (f64, f64),
    train_offsets: bool,
    seed: u64,
    mut log: Option<&mut CsvLog<'_>>,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let nb = Arc::new(Neighborhoods::new(net.template.num_vertices(), &net.template.faces));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut report = TrainReport::default();
    for step in 0..steps {
        let batch: Vec<(&TrainSample, f64)> = (0..batch_size)
            .map(|_| (&samples[rng.random_range(0..samples.len())], 1.0 / batch_size as f64))
            .collect();
        let (grads, logs) = gather_grads(&batch, |s| prior_sample_grads(net, ctx, &nb, s, train_offsets))?;
        let rate = cosine_lr(step, steps, lr.0, lr.1);
        adam.step(&mut net.store, &grads, rate)?;
        let b = mean_breakdown(&logs);
        if let Some(l) = log.as_deref_mut() {
            l.row(step, rate, &b)?;
        }
        if step % 100 == 0 {
            info!("step {step}/{steps} lr {rate:.3e} loss {:.5}", b.total);
        }
        report.history.push(b);
    }
    Ok(report)
}

/// Builds the model and learns the prior over the first `k` identities.
pub fn train_prior(data: &Dataset, cfg: &RunConfig, log: Option<&mut CsvLog<'_>>) -> Result<(Avatar, TrainReport)> {
    let p = &cfg.prior;
    p.validate()?;
    if p.identities < 2 {
        return Err(Error::Config("prior learning needs at least two identities".into()));
    }
    let (net, adam, report) = train_identities(data, cfg, log)?;
    Ok((Avatar::new_prior(net, adam, cfg.to_toml()), report))
}

/// Shared by prior learning and single-identity fitting.
pub(crate) fn train_identities(
    data: &Dataset,
    cfg: &RunConfig,
    log: Option<&mut CsvLog<'_>>,
) -> Result<(GapNet, Adam, TrainReport)> {
    let p = &cfg.prior;
    let k = p.identities;
    let samples = dataset_samples(data, 0..k, |v| !p.holdout_views.contains(&v))?;
    let mut net = GapNet::new(Arc::new(data.template.clone()), cfg.model.clone(), k, cfg.seed)?;
    if p.train_offsets {
        for j in 0..k {
            let d = &data.identities[j].identity.frames[0].delta;
            net.store
                .add(offsets_name(j), Tensor::new(&[d.len(), 3], d.iter().flatten().copied().collect()));
        }
    }
    let ctx = LossContext::new(cfg.losses.clone());
    let mut adam = Adam::new();
    let report = fit(
        &mut net,
        &mut adam,
        &samples,
        &ctx,
        p.steps,
        p.batch_size,
        (p.lr, p.lr_min),
        p.train_offsets,
        cfg.seed,
        log,
    )?;
    Ok((net, adam, report))
}

/// Refined render of a sample with the learned offsets when present.
pub fn render_sample(net: &GapNet, s: &TrainSample, identity: &Identity) -> Result<Tensor> {
    let mut g = Graph::new();
    let delta = match net.store.id(&offsets_name(s.identity)) {
        Some(id) if matches!(identity, Identity::Codebook(_)) => Some(g.param(&net.store, id)),
        _ => None,
    };
    let out = net.forward(&mut g, &s.params, delta, &s.camera, identity)?;
    Ok(g.value(out.image).clone())
}

/// Mean PSNR over samples, rendered with `identity(sample)`.
pub fn evaluate(net: &GapNet, samples: &[TrainSample], identity: impl Fn(&TrainSample) -> Identity + Sync) -> Result<f64> {
    let scores: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| psnr(&render_sample(net, s, &identity(s))?, &s.target.image))
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(mean(scores.into_iter()))
}
