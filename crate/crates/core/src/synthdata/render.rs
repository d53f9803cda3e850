use nalgebra::Vector3;

use super::Texture;
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::headmodel::{HeadTemplate, Part};
use crate::raster::{Camera, NEAR};

/// Samples per pixel along each axis.
pub const SUPERSAMPLE: usize = 3;

/// Ground-truth render of a textured mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshRender {
    /// `[3, H, W]` albedo under uniform light, black background.
    pub image: Tensor,
    /// `[1, H, W]` binary head coverage (majority of subsamples).
    pub mask: Tensor,
    /// `[1, H, W]` binary lip/teeth coverage.
    pub mouth: Tensor,
}

struct Sample {
    depth: f64,
    face: usize,
    uv: [f64; 2],
}

/// Z-buffered, perspective-correct rasterization of `vertices` with the
/// template faces and UVs, supersampled and box-filtered.
pub fn render_mesh(template: &HeadTemplate, vertices: &[[f64; 3]], texture: &Texture, camera: &Camera) -> Result<MeshRender> {
    if vertices.len() != template.num_vertices() {
        return Err(Error::Dimension {
            what: "mesh vertices",
            expected: template.num_vertices(),
            got: vertices.len(),
        });
    }
    let (w, h) = (camera.width, camera.height);
    let big = camera.resized(w * SUPERSAMPLE, h * SUPERSAMPLE);
    let (bw, bh) = (big.width, big.height);
    let cam_pts: Vec<Vector3<f64>> = vertices.iter().map(|p| big.to_camera(&Vector3::from(*p))).collect();
    let screen: Vec<[f64; 2]> = cam_pts.iter().map(|t| big.project_camera_point(t)).collect();
    let mut buf: Vec<Option<Sample>> = (0..bw * bh).map(|_| None).collect();
    for (fi, f) in template.faces.iter().enumerate() {
        if f.iter().any(|&i| cam_pts[i].z < NEAR) {
            continue;
        }
        let [a, b, c] = f.map(|i| screen[i]);
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-18 {
            continue;
        }
        let xs = [a[0], b[0], c[0]];
        let ys = [a[1], b[1], c[1]];
        let lo = |v: &[f64; 3]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = |v: &[f64; 3]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let x0 = (lo(&xs) - 0.5).ceil().max(0.0) as usize;
        let y0 = (lo(&ys) - 0.5).ceil().max(0.0) as usize;
        let x1 = ((hi(&xs) - 0.5).floor() as i64).min(bw as i64 - 1);
        let y1 = ((hi(&ys) - 0.5).floor() as i64).min(bh as i64 - 1);
        if x1 < x0 as i64 || y1 < y0 as i64 {
            continue;
        }
        let inv_z = f.map(|i| 1.0 / cam_pts[i].z);
        let uvs = f.map(|i| template.uv[i]);
        for py in y0..=y1 as usize {
            for px in x0..=x1 as usize {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let edge = |s: [f64; 2], t: [f64; 2]| (t[0] - s[0]) * (p[1] - s[1]) - (t[1] - s[1]) * (p[0] - s[0]);
                let l0 = edge(b, c) / area;
                let l1 = edge(c, a) / area;
                let l2 = edge(a, b) / area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let wz = [l0 * inv_z[0], l1 * inv_z[1], l2 * inv_z[2]];
                let s = wz[0] + wz[1] + wz[2];
                let depth = 1.0 / s;
                let slot = &mut buf[py * bw + px];
                if slot.as_ref().is_some_and(|o| o.depth <= depth) {
                    continue;
                }
                let uv = [
                    (wz[0] * uvs[0][0] + wz[1] * uvs[1][0] + wz[2] * uvs[2][0]) / s,
                    (wz[0] * uvs[0][1] + wz[1] * uvs[1][1] + wz[2] * uvs[2][1]) / s,
                ];
                *slot = Some(Sample { depth, face: fi, uv });
            }
        }
    }
    let n = SUPERSAMPLE * SUPERSAMPLE;
    let mut image = vec![0.0; 3 * w * h];
    let mut mask = vec![0.0; w * h];
    let mut mouth = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut rgb, mut hits, mut mouth_hits) = ([0.0; 3], 0, 0);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let i = (y * SUPERSAMPLE + sy) * bw + x * SUPERSAMPLE + sx;
                    if let Some(s) = &buf[i] {
                        let part = template.part_of_face(s.face);
                        let c = texture.sample(s.uv[0], s.uv[1], part);
                        for k in 0..3 {
                            rgb[k] += c[k];
                        }
                        hits += 1;
                        if matches!(part, Part::Lip | Part::Teeth) {
                            mouth_hits += 1;
                        }
                    }
                }
            }
            let i = y * w + x;
            for k in 0..3 {
                image[k * w * h + i] = rgb[k] / n as f64;
            }
            mask[i] = (2 * hits >= n) as u8 as f64;
            mouth[i] = (2 * mouth_hits >= n) as u8 as f64;
        }
    }
    Ok(MeshRender {
        image: Tensor::new(&[3, h, w], image),
        mask: Tensor::new(&[1, h, w], mask),
        mouth: Tensor::new(&[1, h, w], mouth),
    })
}
