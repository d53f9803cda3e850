//! Prior learning across identities, few-shot personalization (inversion
//! then fine-tuning), reenactment and identity editing.

mod animate;
mod avatar;
mod metrics;
mod personalize;
mod train;

use serde::{Deserialize, Serialize};

pub use animate::{edit_identity, reenact, retarget, EditMode};
pub use avatar::{Avatar, Phase, AVATAR_SCHEMA};
pub use metrics::{metrics, psnr, Metrics};
pub use personalize::{
    finetune, invert, reference_cache, reference_cameras, reference_drift, shot_samples, train_from_scratch,
    PersonalizationReport,
};
pub use train::{
    dataset_samples, evaluate, fit, render_sample, train_prior, CsvLog, TrainReport, TrainSample,
};

use crate::error::{Error, Result};
use crate::headmodel::Part;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Number of dataset identities in the codebook (the first `k`).
    pub identities: usize,
    /// Desk-scale default; the original schedule runs 100K steps.
    pub steps: usize,
    /// Desk-scale default; the original uses 32.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Optimize per-identity vertex offsets along with the network.
    pub train_offsets: bool,
    /// Dataset views withheld from training.
    pub holdout_views: Vec<usize>,
    pub log_every: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            identities: 8,
            steps: 20_000,
            batch_size: 4,
            lr: 1e-3,
            lr_min: 1e-5,
            train_offsets: true,
            holdout_views: Vec::new(),
            log_every: 10,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.identities == 0 {
            return Err(Error::Config("prior steps, batch_size and identities must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("prior learning rates must satisfy 0 <= lr_min <= lr, lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizationConfig {
    /// Dataset identity to personalize to.
    pub subject: usize,
    /// Frame of the subject used as input.
    pub frame: usize,
    /// Dataset views used as the few-shot input.
    pub shot_views: Vec<usize>,
    pub inversion_steps: usize,
    pub finetune_steps: usize,
    pub inversion_lr: f64,
    /// Learning rate of the point encodings during fine-tuning.
    pub lr_encoding: f64,
    /// Learning rate of every other parameter during fine-tuning.
    pub lr_other: f64,
    pub frozen_parts: Vec<Part>,
    /// Number of reference cameras for view regularization.
    pub reference_views: usize,
    /// Reference views rendered per fine-tuning step; the sum over the
    /// sampled subset is rescaled to the full count.
    pub references_per_step: usize,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        PersonalizationConfig {
            subject: 8,
            frame: 0,
            shot_views: vec![2, 7, 13],
            inversion_steps: 500,
            finetune_steps: 500,
            inversion_lr: 1e-2,
            lr_encoding: 1e-3,
            lr_other: 1e-5,
            frozen_parts: vec![Part::Lip, Part::Teeth],
            reference_views: 16,
            references_per_step: 16,
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shot_views.is_empty() {
            return Err(Error::Config("personalization needs at least one shot view".into()));
        }
        if !(self.inversion_lr > 0.0 && self.lr_encoding > 0.0 && self.lr_other >= 0.0) {
            return Err(Error::Config("personalization learning rates must be positive".into()));
        }
        if self.reference_views == 0 || self.reference_views > 16 {
            return Err(Error::Config("reference_views must be in 1..=16".into()));
        }
        if self.references_per_step == 0 || self.references_per_step > self.reference_views {
            return Err(Error::Config("references_per_step must be in 1..=reference_views".into()));
        }
        Ok(())
    }
}
