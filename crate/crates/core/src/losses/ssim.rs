use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

fn kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filtering of one `h × w` plane.
fn filter(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (t, &kt) in k.iter().enumerate() {
            let src = &tmp[(y + t) * ow..(y + t + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kt * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter`]: spreads an `oh × ow` map back onto `h × w`.
fn filter_adjoint(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for (t, &kt) in k.iter().enumerate() {
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                *d += kt * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (o, kt) in out[y * w + x..y * w + x + SSIM_WINDOW].iter_mut().zip(k) {
                *o += kt * v;
            }
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Moments {
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Moments {
        mx: filter(x, h, w, k),
        my: filter(y, h, w, k),
        exx: filter(&prod(x, x), h, w, k),
        eyy: filter(&prod(y, y), h, w, k),
        exy: filter(&prod(x, y), h, w, k),
    }
}

fn terms(m: &Moments, i: usize) -> (f64, f64, f64, f64) {
    let (mx, my) = (m.mx[i], m.my[i]);
    let a1 = 2.0 * mx * my + C1;
    let a2 = 2.0 * (m.exy[i] - mx * my) + C2;
    let b1 = mx * mx + my * my + C1;
    let b2 = m.exx[i] - mx * mx + m.eyy[i] - my * my + C2;
    (a1, a2, b1, b2)
}

fn dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    if s != b.shape() || s.len() != 3 {
        return Err(Error::shape("ssim", format!("{s:?}"), format!("{:?}", b.shape())));
    }
    if s[1] < SSIM_WINDOW || s[2] < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            s[1], s[2]
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Mean structural similarity over channels and valid window positions, for
/// `[C, H, W]` images with dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (c, h, w) = dims(a, b)?;
    let k = kernel();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        let m = moments(&a.data()[r.clone()], &b.data()[r], h, w, &k);
        for i in 0..m.mx.len() {
            let (a1, a2, b1, b2) = terms(&m, i);
            total += a1 * a2 / (b1 * b2);
        }
        count += m.mx.len();
    }
    Ok(total / count as f64)
}

/// Differentiable SSIM, a scalar.
pub fn ssim_op(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (c, h, w) = dims(g.value(a), g.value(b))?;
    let value = ssim(g.value(a), g.value(b))?;
    Ok(g.custom(
        &[a, b],
        Tensor::scalar(value),
        Box::new(move |ctx| {
            let k = kernel();
            let plane = h * w;
            let n = (c * (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW)) as f64;
            let scale = ctx.grad.data()[0] / n;
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut dx = vec![0.0; c * plane];
            let mut dy = vec![0.0; c * plane];
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                let (xs, ys) = (&x[r.clone()], &y[r.clone()]);
                let m = moments(xs, ys, h, w, &k);
                let no = m.mx.len();
                let (mut gmx, mut gmy) = (vec![0.0; no], vec![0.0; no]);
                let (mut gxx, mut gyy, mut gxy) = (vec![0.0; no], vec![0.0; no], vec![0.0; no]);
                for i in 0..no {
                    let (a1, a2, b1, b2) = terms(&m, i);
                    let s = a1 * a2 / (b1 * b2);
                    let d_a1 = a2 / (b1 * b2);
                    let d_a2 = a1 / (b1 * b2);
                    let d_b1 = -s / b1;
                    let d_b2 = -s / b2;
                    let (mx, my) = (m.mx[i], m.my[i]);
                    gmx[i] = scale * (2.0 * my * d_a1 - 2.0 * my * d_a2 + 2.0 * mx * d_b1 - 2.0 * mx * d_b2);
                    gmy[i] = scale * (2.0 * mx * d_a1 - 2.0 * mx * d_a2 + 2.0 * my * d_b1 - 2.0 * my * d_b2);
                    gxx[i] = scale * d_b2;
                    gyy[i] = scale * d_b2;
                    gxy[i] = scale * 2.0 * d_a2;
                }
                let (tmx, tmy) = (filter_adjoint(&gmx, h, w, &k), filter_adjoint(&gmy, h, w, &k));
                let (txx, tyy, txy) = (
                    filter_adjoint(&gxx, h, w, &k),
                    filter_adjoint(&gyy, h, w, &k),
                    filter_adjoint(&gxy, h, w, &k),
                );
                for p in 0..plane {
                    dx[ch * plane + p] = tmx[p] + 2.0 * xs[p] * txx[p] + ys[p] * txy[p];
                    dy[ch * plane + p] = tmy[p] + 2.0 * ys[p] * tyy[p] + xs[p] * txy[p];
                }
            }
            let shape = [c, h, w];
            vec![
                ctx.needs[0].then(|| Tensor::new(&shape, dx)),
                ctx.needs[1].then(|| Tensor::new(&shape, dy)),
            ]
        }),
    ))
}
