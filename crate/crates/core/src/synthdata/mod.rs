//! Procedural multi-identity, multi-view, multi-expression datasets rendered
//! from textured head meshes.

mod render;
mod store;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use render::{render_mesh, MeshRender, SUPERSAMPLE};
pub use store::{load_dataset, write_dataset, MANIFEST_SCHEMA};

use crate::error::{Error, Result};
use crate::headmodel::{pose_mesh, HeadParams, HeadTemplate, Part, NUM_PARTS};
use crate::losses::Supervision;
use crate::raster::Camera;

/// Number of cameras in the capture rig.
pub const RIG_SIZE: usize = 16;
pub const CAMERA_DISTANCE: f64 = 0.6;
/// Point the cameras aim at, roughly the middle of head plus neck.
pub const HEAD_CENTER: [f64; 3] = [0.0, -0.03, 0.0];
/// Focal length as a multiple of image width.
pub const FOCAL_PER_PIXEL: f64 = 1.8;

/// Camera on a sphere around the head, angles in degrees. Positive
/// azimuth moves toward +x, positive elevation looks down from above.
pub fn orbit_camera(azimuth_deg: f64, elevation_deg: f64, resolution: usize) -> Result<Camera> {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let c = HEAD_CENTER;
    let eye = [
        c[0] + CAMERA_DISTANCE * e.cos() * a.sin(),
        c[1] + CAMERA_DISTANCE * e.sin(),
        c[2] + CAMERA_DISTANCE * e.cos() * a.cos(),
    ];
    let f = FOCAL_PER_PIXEL * resolution as f64;
    Camera::look_at(eye, c, [0.0, 1.0, 0.0], f, resolution, resolution)
}

/// Capture rig: `RIG_SIZE` cameras on a frontal arc spanning ±60° azimuth
/// with elevations alternating between ±8°.
pub fn capture_rig(resolution: usize) -> Result<Vec<Camera>> {
    (0..RIG_SIZE)
        .map(|i| {
            let az = -60.0 + 120.0 * i as f64 / (RIG_SIZE - 1) as f64;
            let el = if i % 2 == 0 { 8.0 } else { -8.0 };
            orbit_camera(az, el, resolution)
        })
        .collect()
}

/// `views` cameras spread evenly over the capture rig.
pub fn rig_subset(views: usize, resolution: usize) -> Result<Vec<Camera>> {
    if views == 0 || views > RIG_SIZE {
        return Err(Error::InvalidArgument(format!("views must be in 1..={RIG_SIZE}, got {views}")));
    }
    let rig = capture_rig(resolution)?;
    Ok((0..views)
        .map(|i| {
            let k = if views == 1 {
                RIG_SIZE / 2
            } else {
                (i * (RIG_SIZE - 1) + (views - 1) / 2) / (views - 1)
            };
            rig[k].clone()
        })
        .collect())
}

/// Reference cameras for view regularization: a 4×4 grid over ±60°
/// azimuth and ±20° elevation.
pub fn reference_rig(resolution: usize) -> Result<Vec<Camera>> {
    let mut cams = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            let el = -20.0 + 40.0 * i as f64 / 3.0;
            let az = -60.0 + 120.0 * j as f64 / 3.0;
            cams.push(orbit_camera(az, el, resolution)?);
        }
    }
    Ok(cams)
}

/// Procedural albedo of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Base color per part, linear RGB in `[0, 1]`.
    pub base: [[f64; 3]; NUM_PARTS],
    /// Sinusoidal detail: `(fu, fv, phase, amplitude)` per component.
    pub waves: Vec<[f64; 4]>,
    /// Per-channel response to the detail signal.
    pub tint: [f64; 3],
}

impl Texture {
    pub fn random(rng: &mut ChaCha8Rng) -> Texture {
        let mut jitter = |c: [f64; 3], amount: f64| -> [f64; 3] {
            let s = rng.random_range(1.0 - amount..1.0 + amount);
            c.map(|v| (v * s * rng.random_range(0.9..1.1)).clamp(0.02, 0.98))
        };
        let skin = jitter([0.80, 0.58, 0.46], 0.25);
        let hair = jitter([0.30, 0.20, 0.12], 0.6);
        let lip = jitter([0.72, 0.30, 0.32], 0.15);
        let mut base = [skin; NUM_PARTS];
        base[Part::Hair.index()] = hair;
        base[Part::Lip.index()] = lip;
        base[Part::Teeth.index()] = [0.92, 0.90, 0.84];
        base[Part::Eye.index()] = jitter([0.25, 0.28, 0.35], 0.3);
        base[Part::Nose.index()] = skin.map(|v| (v * 1.05).min(1.0));
        base[Part::Ear.index()] = skin.map(|v| v * 0.95);
        base[Part::Neck.index()] = skin.map(|v| v * 0.92);
        base[Part::Boundary.index()] = skin.map(|v| v * 0.97);
        base[Part::Other.index()] = hair.map(|v| v * 0.9);
        let waves = (0..4)
            .map(|_| {
                [
                    rng.random_range(1.0..6.0),
                    rng.random_range(1.0..6.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.03..0.08),
                ]
            })
            .collect();
        let tint = [rng.random_range(0.7..1.3), rng.random_range(0.7..1.3), rng.random_range(0.7..1.3)];
        Texture { base, waves, tint }
    }

    pub fn sample(&self, u: f64, v: f64, part: Part) -> [f64; 3] {
        let tau = std::f64::consts::TAU;
        let d: f64 = self
            .waves
            .iter()
            .map(|w| w[3] * (tau * (w[0] * u + w[1] * v) + w[2]).sin())
            .sum();
        let b = self.base[part.index()];
        std::array::from_fn(|c| (b[c] * (1.0 + d * self.tint[c])).clamp(0.0, 1.0))
    }
}

/// One synthetic person: shape draw, texture and expression sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub seed: u64,
    pub texture: Texture,
    /// Frame 0 is the exact neutral face of this identity.
    pub frames: Vec<HeadParams>,
}

fn smooth_offsets(template: &HeadTemplate, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let centers: Vec<(Vector3<f64>, f64)> = (0..6)
        .map(|_| {
            let d = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.0),
            )
            .normalize();
            (d, rng.random_range(-0.003..0.003))
        })
        .collect();
    template
        .vertices
        .iter()
        .map(|p| {
            let v = Vector3::from(*p);
            let dir = v.normalize();
            let s: f64 = centers
                .iter()
                .map(|(c, a)| a * (-(dir - c).norm_squared() / 0.15).exp())
                .sum();
            (dir * s).into()
        })
        .collect()
}

impl SyntheticIdentity {
    /// Identity with `expressions` frames; frame 0 is neutral.
    pub fn generate(template: &HeadTemplate, seed: u64, expressions: usize) -> Result<SyntheticIdentity> {
        if expressions == 0 {
            return Err(Error::InvalidArgument("need at least the neutral frame".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = Texture::random(&mut rng);
        let normal = Normal::new(0.0, 0.8).expect("valid std");
        let mut neutral = HeadParams::neutral(template);
        neutral.beta = (0..template.shape_dim).map(|_| normal.sample(&mut rng)).collect();
        neutral.delta = smooth_offsets(template, &mut rng);
        let mut frames = vec![neutral.clone()];
        for _ in 1..expressions {
            let mut p = neutral.clone();
            p.phi = (0..template.expr_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            p.set_joint(template, "jaw", [rng.random_range(0.0..0.3), 0.0, 0.0])?;
            p.set_joint(
                template,
                "neck",
                [rng.random_range(-0.1..0.1), rng.random_range(-0.15..0.15), rng.random_range(-0.05..0.05)],
            )?;
            frames.push(p);
        }
        Ok(SyntheticIdentity { seed, texture, frames })
    }

    /// Renders frame `frame` through `camera`.
    pub fn render(&self, template: &HeadTemplate, frame: usize, camera: &Camera) -> Result<MeshRender> {
        let params = self
            .frames
            .get(frame)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {frame} out of range")))?;
        let verts = pose_mesh(template, params)?;
        render_mesh(template, &verts, &self.texture, camera)
    }
}

/// Generation settings; also the dataset manifest core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub identities: usize,
    pub views: usize,
    pub expressions: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Per-identity seed derivation, so identity `j` does not depend on `k`.
pub fn identity_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((j as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9).wrapping_add(1))
}

/// One identity with all its frames and views.
#[derive(Clone, Debug)]
pub struct IdentityData {
    pub identity: SyntheticIdentity,
    /// `views[frame][view]`.
    pub views: Vec<Vec<Supervision>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub template: HeadTemplate,
    pub cameras: Vec<Camera>,
    pub identities: Vec<IdentityData>,
}

impl Dataset {
    pub fn num_bundles(&self) -> usize {
        self.identities.iter().map(|d| d.views.iter().map(Vec::len).sum::<usize>()).sum()
    }

    /// `(identity, frame, view)` for every bundle, in storage order.
    pub fn bundle_index(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (j, d) in self.identities.iter().enumerate() {
            for (f, views) in d.views.iter().enumerate() {
                for v in 0..views.len() {
                    out.push((j, f, v));
                }
            }
        }
        out
    }
}

/// Renders an identity across frames and cameras.
pub fn render_identity(template: &HeadTemplate, identity: SyntheticIdentity, cameras: &[Camera]) -> Result<IdentityData> {
    let mut views = Vec::with_capacity(identity.frames.len());
    for f in 0..identity.frames.len() {
        let mut row = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let mut r = identity.render(template, f, cam)?;
            // Quantize like the stored PNGs so disk and memory agree exactly.
            for v in r.image.data_mut() {
                *v = (*v * 255.0).round() / 255.0;
            }
            row.push(Supervision {
                image: r.image,
                mask: r.mask,
                mouth: r.mouth,
            });
        }
        views.push(row);
    }
    Ok(IdentityData { identity, views })
}

/// Builds a dataset in memory. Deterministic in `spec`.
pub fn generate_dataset(template: &HeadTemplate, spec: &DatasetSpec) -> Result<Dataset> {
    if spec.identities == 0 || spec.resolution == 0 {
        return Err(Error::InvalidArgument("need at least one identity and a positive resolution".into()));
    }
    let cameras = rig_subset(spec.views, spec.resolution)?;
    let identities = (0..spec.identities)
        .map(|j| {
            let id = SyntheticIdentity::generate(template, identity_seed(spec.seed, j), spec.expressions)?;
            render_identity(template, id, &cameras)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        template: template.clone(),
        cameras,
        identities,
    })
}
