use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::headmodel::{triangle_frames, HeadTemplate, Part, NUM_PARTS};
use crate::error::{Error, Result};

/// Width of the per-point feature encoding.
pub const ENCODING_DIM: usize = 48;
/// Standard deviation of the initial encodings.
pub const ENCODING_INIT_STD: f64 = 0.01;

/// Gaussian primitives bound to mesh faces.
///
/// Points are stored grouped by part so that each part owns a contiguous
/// row range. The count and labels never change after initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePointCloud {
    pub parent_face: Vec<usize>,
    pub part: Vec<Part>,
    pub bary: Vec<[f64; 3]>,
    /// Texel-center surface point expressed in the neutral template frame of
    /// its parent face.
    pub anchor_local: Vec<[f64; 3]>,
    /// Row-major `n × ENCODING_DIM` initial encodings.
    pub encodings: Vec<f64>,
    pub uv_resolution: usize,
}

impl FeaturePointCloud {
    pub fn len(&self) -> usize {
        self.parent_face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent_face.is_empty()
    }

    /// Row range of each part, indexed by [`Part::index`].
    pub fn part_ranges(&self) -> [Range<usize>; NUM_PARTS] {
        std::array::from_fn(|k| {
            let start = self.part.partition_point(|p| p.index() < k);
            let end = self.part.partition_point(|p| p.index() <= k);
            start..end
        })
    }

    pub fn validate(&self, template: &HeadTemplate) -> Result<()> {
        let n = self.len();
        if self.part.len() != n || self.bary.len() != n || self.anchor_local.len() != n {
            return Err(Error::InvalidArgument("point cloud field lengths differ".into()));
        }
        if self.encodings.len() != n * ENCODING_DIM {
            return Err(Error::Dimension {
                what: "encodings",
                expected: n * ENCODING_DIM,
                got: self.encodings.len(),
            });
        }
        for (i, (&f, &p)) in self.parent_face.iter().zip(&self.part).enumerate() {
            if f >= template.num_faces() {
                return Err(Error::InvalidArgument(format!("point {i} has invalid parent face {f}")));
            }
            if template.part_of_face(f) != p {
                return Err(Error::InvalidArgument(format!("point {i} part label differs from its face")));
            }
        }
        if self.part.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("points are not grouped by part".into()));
        }
        Ok(())
    }

    /// One primitive per texel whose center lies inside a face's UV triangle.
    pub fn init_uv(template: &HeadTemplate, uv_resolution: usize, seed: u64) -> Result<FeaturePointCloud> {
        if uv_resolution == 0 {
            return Err(Error::InvalidArgument("uv resolution must be positive".into()));
        }
        let hits = texel_hits(template, uv_resolution);
        if hits.is_empty() {
            return Err(Error::Template("uv atlas covers no texel centers".into()));
        }
        let mut order: Vec<usize> = (0..hits.len()).collect();
        order.sort_by_key(|&i| (template.part_of_face(hits[i].0).index(), i));

        let frames = triangle_frames(&template.vertices, &template.faces)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, ENCODING_INIT_STD).expect("valid normal");
        let n = hits.len();
        let mut pc = FeaturePointCloud {
            parent_face: Vec::with_capacity(n),
            part: Vec::with_capacity(n),
            bary: Vec::with_capacity(n),
            anchor_local: Vec::with_capacity(n),
            encodings: (0..n * ENCODING_DIM).map(|_| normal.sample(&mut rng)).collect(),
            uv_resolution,
        };
        for i in order {
            let (face, bary) = hits[i];
            let f = template.faces[face];
            let p: nalgebra::Vector3<f64> =
                (0..3).map(|k| bary[k] * nalgebra::Vector3::from(template.vertices[f[k]])).sum();
            let fr = &frames[face];
            let local = fr.r.transpose() * (p - fr.t) / fr.s;
            pc.parent_face.push(face);
            pc.part.push(template.part_of_face(face));
            pc.bary.push(bary);
            pc.anchor_local.push([local.x, local.y, local.z]);
        }
        Ok(pc)
    }
}

/// Texel hits in row-major texel order; a texel is claimed by the first
/// face that contains its center.
fn texel_hits(template: &HeadTemplate, res: usize) -> Vec<(usize, [f64; 3])> {
    let mut claimed: Vec<Option<(usize, [f64; 3])>> = vec![None; res * res];
    for (fi, f) in template.faces.iter().enumerate() {
        let [a, b, c] = f.map(|i| template.uv[i]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if det.abs() < 1e-18 {
            continue;
        }
        let lo = |k: usize| a[k].min(b[k]).min(c[k]);
        let hi = |k: usize| a[k].max(b[k]).max(c[k]);
        let to_texel = |x: f64| ((x * res as f64 - 0.5).floor().max(0.0) as usize).min(res - 1);
        let (x0, x1) = (to_texel(lo(0)), (to_texel(hi(0)) + 1).min(res - 1));
        let (y0, y1) = (to_texel(lo(1)), (to_texel(hi(1)) + 1).min(res - 1));
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                let slot = &mut claimed[ty * res + tx];
                if slot.is_some() {
                    continue;
                }
                let p = [(tx as f64 + 0.5) / res as f64, (ty as f64 + 0.5) / res as f64];
                let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
                let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
                let l0 = 1.0 - l1 - l2;
                let eps = -1e-12;
                if l0 >= eps && l1 >= eps && l2 >= eps {
                    *slot = Some((fi, [l0, l1, l2]));
                }
            }
        }
    }
    claimed.into_iter().flatten().collect()
}
