use std::sync::Arc;

use rayon::prelude::*;

use super::avatar::Avatar;
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::gapnet::Identity;
use crate::headmodel::HeadParams;
use crate::raster::Camera;

/// The subject's shape and offsets driven by another sequence's pose and
/// expression.
pub fn retarget(subject: &HeadParams, driving: &HeadParams) -> HeadParams {
    HeadParams {
        beta: subject.beta.clone(),
        theta: driving.theta.clone(),
        phi: driving.phi.clone(),
        delta: subject.delta.clone(),
    }
}

/// Renders one frame per driving parameter set. `cameras` holds either one
/// camera for every frame or one per frame.
pub fn reenact(avatar: &Avatar, driving: &[HeadParams], cameras: &[Camera]) -> Result<Vec<Tensor>> {
    let identity = avatar.identity()?;
    if cameras.len() != 1 && cameras.len() != driving.len() {
        return Err(Error::Dimension {
            what: "reenactment cameras",
            expected: driving.len(),
            got: cameras.len(),
        });
    }
    let frames: Vec<Result<Tensor>> = driving
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cam = &cameras[if cameras.len() == 1 { 0 } else { i }];
            Ok(avatar.render(p, cam, Some(&identity))?.image)
        })
        .collect();
    frames.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EditMode {
    /// `(1 − t)·z_a + t·z_b` on the chosen mesh.
    Interpolate(f64),
    /// Appearance codes of `a` with the geometry codes and mesh of `b`.
    SwapTexture,
    /// All of `a`'s codes on `b`'s mesh.
    SwapGeometry,
}

/// Renders an edit of two avatars personalized from the same prior, using
/// `a`'s network. `mesh` defaults to `a`'s subject for interpolation and to
/// `b`'s subject for the swaps.
pub fn edit_identity(
    a: &Avatar,
    b: &Avatar,
    mode: EditMode,
    mesh: Option<&HeadParams>,
    camera: &Camera,
) -> Result<Tensor> {
    if a.prior_fingerprint != b.prior_fingerprint {
        return Err(Error::InvalidArgument(format!(
            "avatars descend from different priors ({:016x} vs {:016x})",
            a.prior_fingerprint, b.prior_fingerprint
        )));
    }
    let za = a.net.identity_codes(&a.identity()?)?;
    let zb = b.net.identity_codes(&b.identity()?)?;
    let subject = |av: &Avatar| {
        av.subject
            .clone()
            .ok_or_else(|| Error::InvalidArgument("avatar has no personalized subject".into()))
    };
    let (identity, default_mesh) = match mode {
        EditMode::Interpolate(t) => {
            if !t.is_finite() {
                return Err(Error::InvalidArgument("interpolation weight must be finite".into()));
            }
            let z = za
                .iter()
                .zip(&zb)
                .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| (1.0 - t) * x + t * y).collect())
                .collect();
            (Identity::Fixed(Arc::new(z)), a)
        }
        EditMode::SwapTexture => (
            Identity::Split {
                geometry: Arc::new(zb),
                appearance: Arc::new(za),
            },
            b,
        ),
        EditMode::SwapGeometry => (Identity::Fixed(Arc::new(za)), b),
    };
    let params = match mesh {
        Some(p) => p.clone(),
        None => subject(default_mesh)?,
    };
    Ok(a.net.render(&params, camera, &identity)?.image)
}
