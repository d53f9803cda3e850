use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::parts::Part;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub position: [f64; 3],
    /// Parents always precede their children.
    pub parent: Option<usize>,
}

/// Rest mesh plus the linear bases and rig that parameterize it.
///
/// `shape_basis` and `expr_basis` are row-major `(V·3) × dim` matrices: the
/// displacement of vertex `v`, axis `a` is row `3v + a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTemplate {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub shape_dim: usize,
    pub shape_basis: Vec<f64>,
    pub expr_dim: usize,
    pub expr_basis: Vec<f64>,
    pub joints: Vec<Joint>,
    /// Row-major `V × J`.
    pub skin_weights: Vec<f64>,
    pub face_parts: Vec<Part>,
}

impl HeadTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn skin_weight(&self, vertex: usize, joint: usize) -> f64 {
        self.skin_weights[vertex * self.joints.len() + joint]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Part label of a face. Total over valid face indices.
    pub fn part_of_face(&self, face: usize) -> Part {
        self.face_parts[face]
    }

    pub fn part_histogram(&self) -> [usize; super::NUM_PARTS] {
        let mut h = [0; super::NUM_PARTS];
        for p in &self.face_parts {
            h[p.index()] += 1;
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        let nj = self.joints.len();
        let bad = |m: String| Err(Error::Template(m));
        if self.uv.len() != nv {
            return bad(format!("{} uv coordinates for {nv} vertices", self.uv.len()));
        }
        if let Some((f, _)) = self
            .faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.iter().any(|&i| i >= nv))
        {
            return bad(format!("face {f} indexes a missing vertex"));
        }
        if self.face_parts.len() != self.faces.len() {
            return bad(format!(
                "{} part labels for {} faces",
                self.face_parts.len(),
                self.faces.len()
            ));
        }
        if self.shape_basis.len() != nv * 3 * self.shape_dim {
            return bad("shape basis size".into());
        }
        if self.expr_basis.len() != nv * 3 * self.expr_dim {
            return bad("expression basis size".into());
        }
        for (k, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= k {
                    return bad(format!("joint {k} has parent {p} that does not precede it"));
                }
            }
        }
        if self.skin_weights.len() != nv * nj {
            return bad("skin weight table size".into());
        }
        for v in 0..nv {
            let row = &self.skin_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return bad(format!("vertex {v} has a negative skin weight"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return bad(format!("skin weights of vertex {v} sum to {s}"));
            }
        }
        if self
            .uv
            .iter()
            .any(|t| !(0.0..=1.0).contains(&t[0]) || !(0.0..=1.0).contains(&t[1]))
        {
            return bad("uv coordinates outside the unit square".into());
        }
        Ok(())
    }
}

/// Resolution and basis sizes of the procedural head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTemplateConfig {
    /// Latitude rings between the two poles.
    pub rings: usize,
    /// Longitude segments around the head.
    pub segments: usize,
}

impl Default for SyntheticTemplateConfig {
    fn default() -> Self {
        SyntheticTemplateConfig {
            rings: 38,
            segments: 48,
        }
    }
}

pub const SHAPE_DIM: usize = 8;
pub const EXPR_DIM: usize = 6;

// Fraction of the v range used by the cranium; the rest is the neck.
const HEAD_V: f64 = 0.8;
const HEAD_POLAR_END: f64 = 150.0;
const RADII: [f64; 3] = [0.078, 0.105, 0.095];
const NECK_BOTTOM_Y: f64 = -0.17;
const NECK_RADIUS: f64 = 0.047;
const NECK_Z: f64 = -0.012;
const AZIMUTH_WARP: f64 = 0.5;

pub(crate) const NECK_JOINT: [f64; 3] = [0.0, -0.1, -0.012];
pub(crate) const JAW_JOINT: [f64; 3] = [0.0, -0.02, -0.025];

/// Longitude for a `u` texture coordinate; `u = 0.5` faces +z. The warp
/// spends more of the atlas on the front of the head.
pub fn azimuth_of_u(u: f64) -> f64 {
    let x = 2.0 * PI * (u - 0.5);
    x - AZIMUTH_WARP * x.sin()
}

/// Polar angle (degrees from +y) for a cranium `v`, or `None` on the neck.
pub fn polar_of_v(v: f64) -> Option<f64> {
    (v <= HEAD_V).then(|| v / HEAD_V * HEAD_POLAR_END)
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn direction(polar_deg: f64, az: f64) -> [f64; 3] {
    let t = polar_deg.to_radians();
    [t.sin() * az.sin(), t.cos(), t.sin() * az.cos()]
}

fn surface_point(u: f64, v: f64) -> [f64; 3] {
    let az = azimuth_of_u(u);
    match polar_of_v(v) {
        Some(t) => {
            let d = direction(t, az);
            [RADII[0] * d[0], RADII[1] * d[1], RADII[2] * d[2]]
        }
        None => {
            let end = direction(HEAD_POLAR_END, az);
            let top = [RADII[0] * end[0], RADII[1] * end[1], RADII[2] * end[2]];
            let q = (v - HEAD_V) / (1.0 - HEAD_V);
            let blend = smoothstep(0.0, 0.35, q);
            let y = top[1] + q * (NECK_BOTTOM_Y - top[1]);
            let neck = [NECK_RADIUS * az.sin(), y, NECK_Z + NECK_RADIUS * az.cos()];
            [
                top[0] + blend * (neck[0] - top[0]),
                y,
                top[2] + blend * (neck[2] - top[2]),
            ]
        }
    }
}

/// Angular proximity weight in `[0, 1]` between unit directions.
fn bump(d: &[f64; 3], center: &[f64; 3], width_deg: f64) -> f64 {
    let c = dot(d, center).clamp(-1.0, 1.0);
    let ang = c.acos();
    let w = width_deg.to_radians();
    (-(ang * ang) / (2.0 * w * w)).exp()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(&a, &a).sqrt();
    if n == 0.0 {
        return [0.0, 1.0, 0.0];
    }
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Part assignment from a face's mean texture coordinate.
pub fn part_at_uv(u: f64, v: f64) -> Part {
    let Some(t) = polar_of_v(v) else {
        return Part::Neck;
    };
    let a = azimuth_of_u(u).to_degrees();
    let aa = a.abs();
    if t < 42.0 || (aa > 105.0 && t < 125.0) {
        return Part::Hair;
    }
    if (aa - 90.0).abs() < 10.0 && (78.0..108.0).contains(&t) {
        return Part::Ear;
    }
    if t < 52.0 || (aa > 88.0 && t < 125.0) {
        return Part::Boundary;
    }
    if aa < 20.0 && (111.0..119.0).contains(&t) {
        return Part::Teeth;
    }
    if aa < 28.0 && (103.0..127.0).contains(&t) {
        return Part::Lip;
    }
    if ((a - 28.0).abs() < 13.0 || (a + 28.0).abs() < 13.0) && (t - 76.0).abs() < 7.0 {
        return Part::Eye;
    }
    if aa < 11.0 && (70.0..100.0).contains(&t) {
        return Part::Nose;
    }
    if (52.0..68.0).contains(&t) && aa < 75.0 {
        return Part::Forehead;
    }
    if aa <= 88.0 {
        return Part::OtherFace;
    }
    Part::Other
}

impl HeadTemplate {
    /// Procedural head: a warped latitude/longitude ellipsoid with a neck,
    /// duplicated seam and pole vertices so the UV atlas is injective, a
    /// two-joint rig (neck, jaw), smooth shape/expression bases and
    /// procedurally labeled parts.
    pub fn synthetic(cfg: &SyntheticTemplateConfig) -> Result<HeadTemplate> {
        if cfg.rings < 4 || cfg.segments < 6 {
            return Err(Error::Template(format!(
                "synthetic template needs at least 4 rings and 6 segments, got {}x{}",
                cfg.rings, cfg.segments
            )));
        }
        let (rings, segs) = (cfg.rings, cfg.segments);
        let mut vertices = Vec::new();
        let mut uv = Vec::new();
        let ring_v = |r: usize| (r + 1) as f64 / (rings + 1) as f64;
        // Ring vertices, with a duplicated seam column.
        for r in 0..rings {
            for c in 0..=segs {
                let u = c as f64 / segs as f64;
                let v = ring_v(r);
                vertices.push(surface_point(u, v));
                uv.push([u, v]);
            }
        }
        let ring_idx = |r: usize, c: usize| r * (segs + 1) + c;
        let top0 = vertices.len();
        for c in 0..segs {
            vertices.push(surface_point(0.5, 0.0));
            uv.push([(c as f64 + 0.5) / segs as f64, 0.0]);
        }
        let bottom0 = vertices.len();
        let bottom = [0.0, NECK_BOTTOM_Y, NECK_Z];
        for c in 0..segs {
            vertices.push(bottom);
            uv.push([(c as f64 + 0.5) / segs as f64, 1.0]);
        }

        let mut faces = Vec::new();
        for c in 0..segs {
            faces.push([top0 + c, ring_idx(0, c), ring_idx(0, c + 1)]);
        }
        for r in 0..rings - 1 {
            for c in 0..segs {
                let (a, b) = (ring_idx(r, c), ring_idx(r, c + 1));
                let (d, e) = (ring_idx(r + 1, c), ring_idx(r + 1, c + 1));
                faces.push([a, d, b]);
                faces.push([b, d, e]);
            }
        }
        for c in 0..segs {
            faces.push([ring_idx(rings - 1, c), bottom0 + c, ring_idx(rings - 1, c + 1)]);
        }

        let face_parts = faces
            .iter()
            .map(|f| {
                let u = (uv[f[0]][0] + uv[f[1]][0] + uv[f[2]][0]) / 3.0;
                let v = (uv[f[0]][1] + uv[f[1]][1] + uv[f[2]][1]) / 3.0;
                part_at_uv(u, v)
            })
            .collect();

        let nv = vertices.len();
        let dirs: Vec<[f64; 3]> = vertices.iter().map(|p| normalize(*p)).collect();
        let mut shape_basis = vec![0.0; nv * 3 * SHAPE_DIM];
        let mut expr_basis = vec![0.0; nv * 3 * EXPR_DIM];
        for (i, (p, d)) in vertices.iter().zip(&dirs).enumerate() {
            let s = shape_fields(p, d);
            let e = expr_fields(p, d);
            for a in 0..3 {
                for k in 0..SHAPE_DIM {
                    shape_basis[(3 * i + a) * SHAPE_DIM + k] = s[k][a];
                }
                for k in 0..EXPR_DIM {
                    expr_basis[(3 * i + a) * EXPR_DIM + k] = e[k][a];
                }
            }
        }

        let joints = vec![
            Joint {
                name: "neck".into(),
                position: NECK_JOINT,
                parent: None,
            },
            Joint {
                name: "jaw".into(),
                position: JAW_JOINT,
                parent: Some(0),
            },
        ];
        let mut skin_weights = Vec::with_capacity(nv * 2);
        for d in &dirs {
            let w = jaw_weight(d);
            skin_weights.push(1.0 - w);
            skin_weights.push(w);
        }

        let t = HeadTemplate {
            vertices,
            faces,
            uv,
            shape_dim: SHAPE_DIM,
            shape_basis,
            expr_dim: EXPR_DIM,
            expr_basis,
            joints,
            skin_weights,
            face_parts,
        };
        t.validate()?;
        Ok(t)
    }
}

fn polar_azimuth(d: &[f64; 3]) -> (f64, f64) {
    (d[1].clamp(-1.0, 1.0).acos().to_degrees(), d[0].atan2(d[2]).to_degrees())
}

fn jaw_weight(d: &[f64; 3]) -> f64 {
    let (t, a) = polar_azimuth(d);
    smoothstep(112.0, 118.0, t) * (1.0 - smoothstep(60.0, 80.0, a.abs())) * (1.0 - smoothstep(140.0, 150.0, t))
}

fn scaled(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn shape_fields(p: &[f64; 3], d: &[f64; 3]) -> [[f64; 3]; SHAPE_DIM] {
    let nose = normalize([0.0, -0.05, 1.0]);
    let forehead = direction(60.0, 0.0);
    let chin = direction(135.0, 0.0);
    let ear_l = direction(92.0, PI / 2.0);
    let ear_r = direction(92.0, -PI / 2.0);
    let low = smoothstep(-0.02, -0.07, p[1]);
    [
        [0.08 * p[0], 0.0, 0.0],
        [0.0, 0.06 * p[1], 0.0],
        [0.0, 0.0, 0.08 * p[2]],
        scaled(*d, 0.006 * bump(d, &nose, 9.0)),
        [0.1 * p[0] * low, 0.0, 0.0],
        [0.0, 0.0, 0.005 * bump(d, &forehead, 18.0)],
        scaled(*d, 0.005 * (bump(d, &ear_l, 8.0) + bump(d, &ear_r, 8.0))),
        [0.0, -0.004 * bump(d, &chin, 14.0), 0.004 * bump(d, &chin, 14.0)],
    ]
}

fn expr_fields(p: &[f64; 3], d: &[f64; 3]) -> [[f64; 3]; EXPR_DIM] {
    let corner_l = direction(115.0, 25f64.to_radians());
    let corner_r = direction(115.0, -25f64.to_radians());
    let brow = direction(66.0, 0.0);
    let cheek_l = direction(100.0, 42f64.to_radians());
    let cheek_r = direction(100.0, -42f64.to_radians());
    let mouth = direction(115.0, 0.0);
    let eye_l = direction(76.0, 28f64.to_radians());
    let eye_r = direction(76.0, -28f64.to_radians());
    let nose = direction(85.0, 0.0);
    let (cl, cr) = (bump(d, &corner_l, 9.0), bump(d, &corner_r, 9.0));
    let m = bump(d, &mouth, 12.0);
    let cheeks = bump(d, &cheek_l, 12.0) + bump(d, &cheek_r, 12.0);
    [
        [0.002 * (cl - cr), 0.004 * (cl + cr), -0.002 * (cl + cr)],
        [0.0, 0.004 * bump(d, &brow, 22.0), 0.0],
        scaled(*d, 0.004 * cheeks),
        [-0.3 * p[0] * m, 0.0, 0.005 * m],
        [0.0, -0.002 * (bump(d, &eye_l, 8.0) + bump(d, &eye_r, 8.0)), 0.0],
        [0.0, 0.003 * bump(d, &nose, 8.0), 0.0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> HeadTemplate {
        HeadTemplate::synthetic(&SyntheticTemplateConfig::default()).unwrap()
    }

    #[test]
    fn synthetic_template_is_valid() {
        let t = template();
        t.validate().unwrap();
        assert!(t.num_faces() > 3000);
        assert_eq!(t.num_joints(), 2);
    }

    #[test]
    fn every_part_is_present() {
        let h = template().part_histogram();
        for (i, &count) in h.iter().enumerate() {
            assert!(count > 0, "part {} has no faces", Part::ALL[i]);
        }
    }

    #[test]
    fn lip_region_faces_are_labeled_lip() {
        let t = template();
        // Centroid near the mouth but outside the teeth strip.
        let mut found = false;
        for (f, face) in t.faces.iter().enumerate() {
            let u = face.iter().map(|&i| t.uv[i][0]).sum::<f64>() / 3.0;
            let v = face.iter().map(|&i| t.uv[i][1]).sum::<f64>() / 3.0;
            let (Some(pol), az) = (polar_of_v(v), azimuth_of_u(u).to_degrees()) else {
                continue;
            };
            if az.abs() < 20.0 && (104.0..110.0).contains(&pol) {
                assert_eq!(t.part_of_face(f), Part::Lip);
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn faces_are_outward_oriented() {
        let t = template();
        let mut outward = 0;
        for f in &t.faces {
            let [a, b, c] = f.map(|i| t.vertices[i]);
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            let centroid = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0];
            let axis = [centroid[0], centroid[1] - centroid[1].clamp(-0.12, 0.0), centroid[2] - NECK_Z * 0.0];
            if dot(&n, &axis) > 0.0 {
                outward += 1;
            }
        }
        assert!(outward as f64 > 0.97 * t.num_faces() as f64, "{outward}/{}", t.num_faces());
    }

    #[test]
    fn jaw_weights_only_on_lower_face() {
        let t = template();
        let jaw = t.joint_index("jaw").unwrap();
        for (i, p) in t.vertices.iter().enumerate() {
            if t.skin_weight(i, jaw) > 0.0 {
                assert!(p[1] < 0.0 && p[2] > -0.05, "vertex {i} at {p:?}");
            }
        }
    }

    #[test]
    fn invalid_resolution_is_rejected() {
        let cfg = SyntheticTemplateConfig { rings: 2, segments: 48 };
        assert!(HeadTemplate::synthetic(&cfg).is_err());
    }
}
