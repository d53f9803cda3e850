use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, Container};
use crate::diffengine::{Adam, Moments, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::gapnet::{GapNet, Identity, ModelConfig, RenderedImages};
use crate::headmodel::{HeadParams, HeadTemplate};
use crate::losses::ReferenceCache;
use crate::raster::Camera;
use crate::splatcore::FeaturePointCloud;

pub const AVATAR_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prior,
    Inverted,
    Finetuned,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Prior => "prior",
            Phase::Inverted => "inverted",
            Phase::Finetuned => "finetuned",
        })
    }
}

/// A model at some stage of the workflow together with its optimizer
/// state and personalization context.
#[derive(Clone)]
pub struct Avatar {
    pub phase: Phase,
    pub net: GapNet,
    pub adam: Adam,
    /// Neutral parameters of the personalized subject.
    pub subject: Option<HeadParams>,
    pub reference: Option<ReferenceCache>,
    /// Identifies the prior this avatar descends from.
    pub prior_fingerprint: u64,
    /// TOML echo of the run configuration that produced this state.
    pub config_echo: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupMeta {
    name: String,
    lr_mult: f64,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    /// `(parameter name, per-parameter step count)`.
    moments: Vec<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    schema_version: u32,
    phase: Phase,
    model: ModelConfig,
    num_identities: usize,
    template: HeadTemplate,
    points: FeaturePointCloud,
    params: Vec<GroupMeta>,
    adam: AdamMeta,
    subject: Option<HeadParams>,
    reference_views: usize,
    prior_fingerprint: String,
    config: String,
}

impl Avatar {
    /// Wraps a freshly trained prior.
    pub fn new_prior(net: GapNet, adam: Adam, config_echo: String) -> Avatar {
        let fp = params_fingerprint(&net.store);
        Avatar {
            phase: Phase::Prior,
            net,
            adam,
            subject: None,
            reference: None,
            prior_fingerprint: fp,
            config_echo,
        }
    }

    /// Identity driving renders of a personalized avatar.
    pub fn identity(&self) -> Result<Identity> {
        match self.phase {
            Phase::Prior => Err(Error::Phase(
                "a prior checkpoint has no personal identity; select a codebook row".into(),
            )),
            _ => Ok(Identity::Mixture),
        }
    }

    pub fn render(&self, params: &HeadParams, camera: &Camera, identity: Option<&Identity>) -> Result<RenderedImages> {
        let id = match identity {
            Some(i) => i.clone(),
            None => self.identity()?,
        };
        self.net.render(params, camera, &id)
    }

    pub fn to_container(&self) -> Result<Container> {
        let store = &self.net.store;
        let mut blobs = BTreeMap::new();
        let mut params = Vec::with_capacity(store.len());
        for id in store.ids() {
            let gr = store.group(id);
            params.push(GroupMeta {
                name: gr.name.clone(),
                lr_mult: gr.lr_mult,
                frozen: gr.frozen,
            });
            blobs.insert(format!("param/{}", gr.name), store.get(id).clone());
        }
        let mut moments = Vec::new();
        for (id, m) in &self.adam.moments {
            let name = &store.group(*id).name;
            moments.push((name.clone(), m.steps));
            blobs.insert(format!("adam/m/{name}"), m.m.clone());
            blobs.insert(format!("adam/v/{name}"), m.v.clone());
        }
        let reference_views = self.reference.as_ref().map_or(0, |r| r.images.len());
        if let Some(r) = &self.reference {
            for (i, img) in r.images.iter().enumerate() {
                blobs.insert(format!("reference/{i:02}"), img.clone());
            }
        }
        let meta = Meta {
            schema_version: AVATAR_SCHEMA,
            phase: self.phase,
            model: self.net.config.clone(),
            num_identities: self.net.num_identities,
            template: (*self.net.template).clone(),
            points: self.net.points.clone(),
            params,
            adam: AdamMeta {
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                step: self.adam.step,
                moments,
            },
            subject: self.subject.clone(),
            reference_views,
            prior_fingerprint: format!("{:016x}", self.prior_fingerprint),
            config: self.config_echo.clone(),
        };
        Ok(Container {
            metadata: serde_json::to_value(meta)?,
            blobs,
        })
    }

    pub fn from_container(c: &Container) -> Result<Avatar> {
        let meta: Meta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.schema_version != AVATAR_SCHEMA {
            return Err(Error::Checkpoint(format!("unsupported avatar schema {}", meta.schema_version)));
        }
        let mut store = ParamStore::new();
        for p in &meta.params {
            let id = store.add(p.name.clone(), c.blob(&format!("param/{}", p.name))?.clone());
            store.set_lr_mult(id, p.lr_mult)?;
            store.set_frozen(id, p.frozen);
        }
        let mut adam = Adam {
            beta1: meta.adam.beta1,
            beta2: meta.adam.beta2,
            eps: meta.adam.eps,
            step: meta.adam.step,
            moments: BTreeMap::new(),
        };
        for (name, steps) in &meta.adam.moments {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            adam.moments.insert(
                id,
                Moments {
                    m: c.blob(&format!("adam/m/{name}"))?.clone(),
                    v: c.blob(&format!("adam/v/{name}"))?.clone(),
                    steps: *steps,
                },
            );
        }
        let reference = if meta.reference_views > 0 {
            let images = (0..meta.reference_views)
                .map(|i| c.blob(&format!("reference/{i:02}")).cloned())
                .collect::<Result<Vec<Tensor>>>()?;
            Some(ReferenceCache { images })
        } else {
            None
        };
        let net = GapNet::from_parts(Arc::new(meta.template), meta.model, meta.points, store, meta.num_identities)?;
        let prior_fingerprint = u64::from_str_radix(&meta.prior_fingerprint, 16)
            .map_err(|_| Error::Checkpoint("bad prior fingerprint".into()))?;
        Ok(Avatar {
            phase: meta.phase,
            net,
            adam,
            subject: meta.subject,
            reference,
            prior_fingerprint,
            config_echo: meta.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Avatar> {
        Avatar::from_container(&Container::load(path)?)
    }
}

/// Fingerprint of every parameter tensor in a store.
pub fn params_fingerprint(store: &ParamStore) -> u64 {
    let items: Vec<(String, &Tensor)> = store.ids().map(|id| (store.group(id).name.clone(), store.get(id))).collect();
    fingerprint(items.iter().map(|(n, t)| (n.as_str(), *t)))
}
