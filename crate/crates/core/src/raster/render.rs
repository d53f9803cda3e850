use std::sync::Arc;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::Camera;
use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::splatcore::GlobalGaussianAttrs;

/// Points at or closer than this camera depth are culled.
pub const NEAR: f64 = 0.01;
/// Screen-space blur added to every projected covariance, in px².
pub const BLUR: f64 = 0.3;
/// Squared Mahalanobis radius of a primitive's footprint.
pub const CUTOFF: f64 = 9.0;
pub const DEFAULT_TILE: usize = 16;

/// Screen-space footprint of one primitive.
#[derive(Clone, Debug)]
pub struct Projection {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    conic: Matrix2<f64>,
    t: Vector3<f64>,
    j: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`, unclipped.
    bbox: [i64; 4],
}

impl Projection {
    /// Squared Mahalanobis distance of the pixel center and the offsets.
    #[inline]
    fn distance(&self, px: usize, py: usize) -> (f64, f64, f64) {
        let dx = px as f64 + 0.5 - self.mean2d[0];
        let dy = py as f64 + 0.5 - self.mean2d[1];
        let a = &self.conic;
        let m = dx * (a[(0, 0)] * dx + a[(0, 1)] * dy) + dy * (a[(1, 0)] * dx + a[(1, 1)] * dy);
        (m, dx, dy)
    }
}

/// EWA projection of a Gaussian with world mean `mu` and row-major world
/// covariance `cov`. Returns `None` when the primitive is culled.
pub fn project_gaussian(mu: [f64; 3], cov: &[f64; 9], camera: &Camera) -> Option<Projection> {
    let t = camera.to_camera(&Vector3::from(mu));
    if t.z <= NEAR || !t.iter().all(|v| v.is_finite()) {
        return None;
    }
    let (fx, fy) = (camera.k[0][0], camera.k[1][1]);
    let (z, z2) = (t.z, t.z * t.z);
    let j = Matrix2x3::new(fx / z, 0.0, -fx * t.x / z2, 0.0, fy / z, -fy * t.y / z2);
    let w = camera.rotation();
    let cov_cam = w * Matrix3::from_row_slice(cov) * w.transpose();
    let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * BLUR;
    let det = cov2d.determinant();
    if !(det > 0.0) || !(cov2d[(0, 0)] > 0.0) || !(cov2d[(1, 1)] > 0.0) {
        return None;
    }
    let conic = cov2d.try_inverse()?;
    let mean2d = camera.project_camera_point(&t);
    let (rx, ry) = ((CUTOFF * cov2d[(0, 0)]).sqrt(), (CUTOFF * cov2d[(1, 1)]).sqrt());
    // One pixel of slack so rounding never drops a covered pixel.
    let bbox = [
        (mean2d[0] - rx - 0.5).floor() as i64 - 1,
        (mean2d[0] + rx - 0.5).ceil() as i64 + 1,
        (mean2d[1] - ry - 0.5).floor() as i64 - 1,
        (mean2d[1] + ry - 0.5).ceil() as i64 + 1,
    ];
    if !mean2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Projection {
        mean2d,
        cov2d,
        depth: z,
        conic,
        t,
        j,
        cov_cam,
        bbox,
    })
}

/// Primitives ready for splatting. `colors` is row-major `n × channels`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatScene {
    pub mu: Vec<[f64; 3]>,
    pub cov: Vec<[f64; 9]>,
    pub colors: Vec<f64>,
    pub channels: usize,
    pub opacity: Vec<f64>,
}

impl SplatScene {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn from_globals(globals: &[GlobalGaussianAttrs], channels: usize) -> Result<SplatScene> {
        let mut s = SplatScene {
            channels,
            ..Default::default()
        };
        for g in globals {
            if g.h.len() != channels {
                return Err(Error::Dimension {
                    what: "gaussian appearance",
                    expected: channels,
                    got: g.h.len(),
                });
            }
            s.mu.push(g.mu);
            s.cov.push(g.covariance());
            s.colors.extend_from_slice(&g.h);
            s.opacity.push(g.opacity);
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.cov.len() != n || self.opacity.len() != n || self.colors.len() != n * self.channels {
            return Err(Error::InvalidArgument("splat scene arrays have inconsistent lengths".into()));
        }
        Ok(())
    }

    fn color(&self, i: usize) -> &[f64] {
        &self.colors[i * self.channels..(i + 1) * self.channels]
    }
}

/// Composited image with the color channels followed by accumulated alpha,
/// laid out `[channels + 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Tensor,
}

impl RenderOutput {
    pub fn channels(&self) -> usize {
        self.image.shape()[0] - 1
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    fn planes(&self, start: usize, end: usize) -> Tensor {
        let hw = self.height() * self.width();
        Tensor::new(
            &[end - start, self.height(), self.width()],
            self.image.data()[start * hw..end * hw].to_vec(),
        )
    }

    pub fn rgb(&self) -> Tensor {
        self.planes(0, 3.min(self.channels()))
    }

    pub fn feat(&self) -> Tensor {
        self.planes(3.min(self.channels()), self.channels())
    }

    pub fn alpha(&self) -> Tensor {
        self.planes(self.channels(), self.channels() + 1)
    }
}

struct Prepared {
    proj: Vec<Option<Projection>>,
    /// Visible primitives sorted by (depth, index).
    order: Vec<usize>,
    tiles: Vec<Vec<usize>>,
    tile: usize,
    tiles_x: usize,
}

fn prepare(scene: &SplatScene, camera: &Camera, tile: usize) -> Result<Prepared> {
    scene.validate()?;
    camera.validate()?;
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    let proj: Vec<Option<Projection>> = scene
        .mu
        .par_iter()
        .zip(&scene.cov)
        .map(|(mu, cov)| project_gaussian(*mu, cov, camera))
        .collect();
    let mut order: Vec<usize> = (0..scene.len()).filter(|&i| proj[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (proj[a].as_ref().unwrap().depth, proj[b].as_ref().unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let tiles_x = camera.width.div_ceil(tile);
    let tiles_y = camera.height.div_ceil(tile);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let b = proj[i].as_ref().unwrap().bbox;
        let x0 = b[0].max(0);
        let x1 = b[1].min(camera.width as i64 - 1);
        let y0 = b[2].max(0);
        let y1 = b[3].min(camera.height as i64 - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in (y0 as usize / tile)..=(y1 as usize / tile) {
            for tx in (x0 as usize / tile)..=(x1 as usize / tile) {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }
    Ok(Prepared {
        proj,
        order,
        tiles,
        tile,
        tiles_x,
    })
}

fn tile_pixels(p: &Prepared, camera: &Camera, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (tx, ty) = (t % p.tiles_x, t / p.tiles_x);
    let xs = tx * p.tile..((tx + 1) * p.tile).min(camera.width);
    let ys = ty * p.tile..((ty + 1) * p.tile).min(camera.height);
    (xs, ys)
}

/// Front-to-back compositing of `list` at one pixel into `out`
/// (`channels + 1` values).
#[inline]
fn composite_pixel(scene: &SplatScene, proj: &[Option<Projection>], list: &[usize], px: usize, py: usize, out: &mut [f64]) {
    let c = scene.channels;
    let mut trans = 1.0;
    for &i in list {
        let p = proj[i].as_ref().unwrap();
        let (m, _, _) = p.distance(px, py);
        if m > CUTOFF {
            continue;
        }
        let alpha = scene.opacity[i] * (-0.5 * m).exp();
        let w = trans * alpha;
        for (o, v) in out[..c].iter_mut().zip(scene.color(i)) {
            *o += w * v;
        }
        out[c] += w;
        trans *= 1.0 - alpha;
    }
}

fn render_prepared(scene: &SplatScene, camera: &Camera, p: &Prepared) -> RenderOutput {
    let (c, w, h) = (scene.channels + 1, camera.width, camera.height);
    let tiles: Vec<Vec<f64>> = (0..p.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (xs, ys) = tile_pixels(p, camera, t);
            let mut buf = vec![0.0; xs.len() * ys.len() * c];
            for (k, (py, px)) in ys.clone().flat_map(|y| xs.clone().map(move |x| (y, x))).enumerate() {
                composite_pixel(scene, &p.proj, &p.tiles[t], px, py, &mut buf[k * c..(k + 1) * c]);
            }
            buf
        })
        .collect();
    let mut img = vec![0.0; c * h * w];
    for (t, buf) in tiles.iter().enumerate() {
        let (xs, ys) = tile_pixels(p, camera, t);
        for (k, (py, px)) in ys.clone().flat_map(|y| xs.clone().map(move |x| (y, x))).enumerate() {
            for ch in 0..c {
                img[ch * h * w + py * w + px] = buf[k * c + ch];
            }
        }
    }
    RenderOutput {
        image: Tensor::new(&[c, h, w], img),
    }
}

/// Tiled forward pass.
pub fn rasterize(scene: &SplatScene, camera: &Camera, tile: usize) -> Result<RenderOutput> {
    let p = prepare(scene, camera, tile)?;
    Ok(render_prepared(scene, camera, &p))
}

/// Per-pixel reference renderer over every visible primitive.
pub fn rasterize_naive(scene: &SplatScene, camera: &Camera) -> Result<RenderOutput> {
    let p = prepare(scene, camera, 1)?;
    let (c, w, h) = (scene.channels + 1, camera.width, camera.height);
    let mut img = vec![0.0; c * h * w];
    let mut px_buf = vec![0.0; c];
    for py in 0..h {
        for px in 0..w {
            px_buf.fill(0.0);
            composite_pixel(scene, &p.proj, &p.order, px, py, &mut px_buf);
            for ch in 0..c {
                img[ch * h * w + py * w + px] = px_buf[ch];
            }
        }
    }
    Ok(RenderOutput {
        image: Tensor::new(&[c, h, w], img),
    })
}

/// Forward state needed by [`rasterize_backward`].
pub struct RasterState {
    scene: Arc<SplatScene>,
    camera: Camera,
    prepared: Prepared,
}

/// Gradients with respect to every primitive attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub mu: Vec<[f64; 3]>,
    pub cov: Vec<[f64; 9]>,
    pub colors: Vec<f64>,
    pub opacity: Vec<f64>,
}

pub fn rasterize_forward(scene: Arc<SplatScene>, camera: &Camera, tile: usize) -> Result<(RenderOutput, RasterState)> {
    let prepared = prepare(&scene, camera, tile)?;
    let out = render_prepared(&scene, camera, &prepared);
    Ok((
        out,
        RasterState {
            scene,
            camera: camera.clone(),
            prepared,
        },
    ))
}

// Per-entry layout of tile-local gradient accumulators.
const G_MEAN: usize = 0;
const G_CONIC: usize = 2;
const G_OPACITY: usize = 6;
const G_COLOR: usize = 7;

pub fn rasterize_backward(grad: &Tensor, state: Option<&RasterState>) -> Result<SplatGrads> {
    let state = state.ok_or(Error::MissingSavedState)?;
    let (scene, camera, p) = (&*state.scene, &state.camera, &state.prepared);
    let (c, w, h) = (scene.channels, camera.width, camera.height);
    let expected = [c + 1, h, w];
    if grad.shape() != expected {
        return Err(Error::shape("rasterize_backward", format!("{expected:?}"), format!("{:?}", grad.shape())));
    }
    let stride = G_COLOR + c;
    let g = grad.data();
    let tile_grads: Vec<Vec<f64>> = (0..p.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &p.tiles[t];
            let mut acc = vec![0.0; list.len() * stride];
            if list.is_empty() {
                return acc;
            }
            let (xs, ys) = tile_pixels(p, camera, t);
            let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            let mut up = vec![0.0; c + 1];
            let mut behind = vec![0.0; c + 1];
            for py in ys {
                for px in xs.clone() {
                    for (ch, u) in up.iter_mut().enumerate() {
                        *u = g[ch * h * w + py * w + px];
                    }
                    if up.iter().all(|&u| u == 0.0) {
                        continue;
                    }
                    hits.clear();
                    let mut trans = 1.0;
                    for (k, &i) in list.iter().enumerate() {
                        let pr = p.proj[i].as_ref().unwrap();
                        let (m, dx, dy) = pr.distance(px, py);
                        if m > CUTOFF {
                            continue;
                        }
                        let gauss = (-0.5 * m).exp();
                        let alpha = scene.opacity[i] * gauss;
                        hits.push((k, alpha, gauss, trans, dx, dy));
                        trans *= 1.0 - alpha;
                    }
                    behind.fill(0.0);
                    for &(k, alpha, gauss, trans, dx, dy) in hits.iter().rev() {
                        let i = list[k];
                        let col = scene.color(i);
                        let e = &mut acc[k * stride..(k + 1) * stride];
                        let wgt = trans * alpha;
                        let mut d_alpha = up[c] * (1.0 - behind[c]);
                        for ch in 0..c {
                            e[G_COLOR + ch] += wgt * up[ch];
                            d_alpha += up[ch] * (col[ch] - behind[ch]);
                        }
                        d_alpha *= trans;
                        for ch in 0..c {
                            behind[ch] = col[ch] * alpha + (1.0 - alpha) * behind[ch];
                        }
                        behind[c] = alpha + (1.0 - alpha) * behind[c];

                        let o = scene.opacity[i];
                        e[G_OPACITY] += d_alpha * gauss;
                        let dm = -0.5 * gauss * d_alpha * o;
                        e[G_CONIC] += dm * dx * dx;
                        e[G_CONIC + 1] += dm * dx * dy;
                        e[G_CONIC + 2] += dm * dy * dx;
                        e[G_CONIC + 3] += dm * dy * dy;
                        let a = &p.proj[i].as_ref().unwrap().conic;
                        let ddx = dm * (2.0 * a[(0, 0)] * dx + (a[(0, 1)] + a[(1, 0)]) * dy);
                        let ddy = dm * ((a[(0, 1)] + a[(1, 0)]) * dx + 2.0 * a[(1, 1)] * dy);
                        e[G_MEAN] -= ddx;
                        e[G_MEAN + 1] -= ddy;
                    }
                }
            }
            acc
        })
        .collect();

    let n = scene.len();
    let mut per = vec![0.0; n * stride];
    for (t, acc) in tile_grads.iter().enumerate() {
        for (k, &i) in p.tiles[t].iter().enumerate() {
            for (dst, src) in per[i * stride..(i + 1) * stride].iter_mut().zip(&acc[k * stride..(k + 1) * stride]) {
                *dst += src;
            }
        }
    }

    let mut out = SplatGrads {
        mu: vec![[0.0; 3]; n],
        cov: vec![[0.0; 9]; n],
        colors: vec![0.0; n * c],
        opacity: vec![0.0; n],
    };
    let wr = camera.rotation();
    let (fx, fy) = (camera.k[0][0], camera.k[1][1]);
    for i in 0..n {
        let Some(pr) = p.proj[i].as_ref() else {
            continue;
        };
        let e = &per[i * stride..(i + 1) * stride];
        out.opacity[i] = e[G_OPACITY];
        out.colors[i * c..(i + 1) * c].copy_from_slice(&e[G_COLOR..]);
        let d_conic = Matrix2::new(e[G_CONIC], e[G_CONIC + 1], e[G_CONIC + 2], e[G_CONIC + 3]);
        let at = pr.conic.transpose();
        let d_cov2d = -at * d_conic * at;
        let d_j = d_cov2d * pr.j * pr.cov_cam.transpose() + d_cov2d.transpose() * pr.j * pr.cov_cam;
        let d_cov_cam = pr.j.transpose() * d_cov2d * pr.j;
        let d_cov = wr.transpose() * d_cov_cam * wr;
        for k in 0..9 {
            out.cov[i][k] = d_cov[(k / 3, k % 3)];
        }
        let (x, y, z) = (pr.t.x, pr.t.y, pr.t.z);
        let (z2, z3) = (z * z, z * z * z);
        let dmean = Vector2::new(e[G_MEAN], e[G_MEAN + 1]);
        let dt = Vector3::new(
            d_j[(0, 2)] * (-fx / z2) + dmean.x * fx / z,
            d_j[(1, 2)] * (-fy / z2) + dmean.y * fy / z,
            d_j[(0, 0)] * (-fx / z2)
                + d_j[(0, 2)] * (2.0 * fx * x / z3)
                + d_j[(1, 1)] * (-fy / z2)
                + d_j[(1, 2)] * (2.0 * fy * y / z3)
                - dmean.x * fx * x / z2
                - dmean.y * fy * y / z2,
        );
        let dmu = wr.transpose() * dt;
        out.mu[i] = [dmu.x, dmu.y, dmu.z];
    }
    Ok(out)
}

/// Records splatting on the graph. Inputs are `mu [n,3]`, `cov [n,9]`,
/// `colors [n,C]` and `opacity [n,1]`; the output is `[C+1, H, W]`.
pub fn rasterize_op(g: &mut Graph, mu: Var, cov: Var, colors: Var, opacity: Var, camera: &Camera) -> Result<Var> {
    let n = g.shape(mu)[0];
    let check = |g: &Graph, v: Var, width: usize, name: &'static str| {
        let s = g.shape(v);
        if s.len() == 2 && s[0] == n && (width == 0 || s[1] == width) {
            Ok(s[1])
        } else {
            Err(Error::shape(name, format!("[{n}, {width}]"), format!("{s:?}")))
        }
    };
    check(g, mu, 3, "rasterize mu")?;
    check(g, cov, 9, "rasterize cov")?;
    let channels = check(g, colors, 0, "rasterize colors")?;
    check(g, opacity, 1, "rasterize opacity")?;
    let scene = SplatScene {
        mu: g.value(mu).data().chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect(),
        cov: g.value(cov).data().chunks_exact(9).map(|r| std::array::from_fn(|k| r[k])).collect(),
        colors: g.value(colors).data().to_vec(),
        channels,
        opacity: g.value(opacity).data().to_vec(),
    };
    let (out, state) = rasterize_forward(Arc::new(scene), camera, DEFAULT_TILE)?;
    Ok(g.custom(
        &[mu, cov, colors, opacity],
        out.image,
        Box::new(move |ctx| {
            let grads = rasterize_backward(ctx.grad, Some(&state)).expect("shape checked at record time");
            vec![
                ctx.needs[0].then(|| Tensor::new(&[n, 3], grads.mu.iter().flatten().copied().collect())),
                ctx.needs[1].then(|| Tensor::new(&[n, 9], grads.cov.iter().flatten().copied().collect())),
                ctx.needs[2].then(|| Tensor::new(&[n, channels], grads.colors.clone())),
                ctx.needs[3].then(|| Tensor::new(&[n, 1], grads.opacity.clone())),
            ]
        }),
    ))
}
