use nalgebra::{Matrix3, Vector3};

use super::quat::{self, Quat};
use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::headmodel::{TriangleFrame, FRAME_WIDTH};

/// Attributes of one primitive in its parent face's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGaussianAttrs {
    pub mu: [f64; 3],
    pub rot: Quat,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub h: Vec<f64>,
}

/// Attributes of one primitive in world space.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGaussianAttrs {
    pub mu: [f64; 3],
    pub rot: Quat,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub h: Vec<f64>,
}

impl GlobalGaussianAttrs {
    pub fn covariance(&self) -> [f64; 9] {
        quat::covariance(self.rot, self.scale)
    }
}

fn bind_point(frame: &TriangleFrame, mu: [f64; 3]) -> Vector3<f64> {
    frame.s * frame.r * Vector3::from(mu) + frame.t
}

pub fn local_to_global(attrs: &LocalGaussianAttrs, frame: &TriangleFrame) -> GlobalGaussianAttrs {
    let mu = bind_point(frame, attrs.mu);
    let rot = quat::normalize(quat::mul(quat::from_matrix(&frame.r), quat::normalize(attrs.rot)));
    GlobalGaussianAttrs {
        mu: [mu.x, mu.y, mu.z],
        rot,
        scale: attrs.scale.map(|v| frame.s * v),
        opacity: attrs.opacity,
        h: attrs.h.clone(),
    }
}

/// Displacement of a bound position between the neutral and posed frames.
pub fn dynamic_signal(mu_local: [f64; 3], posed: &TriangleFrame, neutral: &TriangleFrame) -> [f64; 3] {
    let e = bind_point(posed, mu_local) - bind_point(neutral, mu_local);
    [e.x, e.y, e.z]
}

fn check_rows(g: &Graph, op: &'static str, frames: Var, other: Var, width: usize) -> Result<usize> {
    let (fs, os) = (g.shape(frames), g.shape(other));
    if fs.len() != 2 || fs[1] != FRAME_WIDTH {
        return Err(Error::shape(op, format!("[n, {FRAME_WIDTH}] frames"), format!("{fs:?}")));
    }
    if os.len() != 2 || os[1] != width || os[0] != fs[0] {
        return Err(Error::shape(op, format!("[{}, {width}]", fs[0]), format!("{os:?}")));
    }
    Ok(fs[0])
}

fn frame_parts(row: &[f64]) -> (Matrix3<f64>, f64) {
    (Matrix3::from_row_slice(&row[..9]), row[9])
}

/// Positions `s R μ′ + T` for per-point frames `[n, 13]` and `μ′ [n, 3]`.
pub fn bind_positions(g: &mut Graph, frames: Var, mu_local: Var) -> Result<Var> {
    let n = check_rows(g, "bind_positions", frames, mu_local, 3)?;
    let (fv, mv) = (g.value(frames), g.value(mu_local));
    let mut out = vec![0.0; n * 3];
    for i in 0..n {
        let fr = TriangleFrame::from_row(fv.row(i));
        let p = bind_point(&fr, [mv.row(i)[0], mv.row(i)[1], mv.row(i)[2]]);
        out[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
    }
    Ok(g.custom(
        &[frames, mu_local],
        Tensor::new(&[n, 3], out),
        Box::new(move |ctx| {
            let (fv, mv, dy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut df = ctx.needs[0].then(|| Tensor::zeros(&[n, FRAME_WIDTH]));
            let mut dm = ctx.needs[1].then(|| Tensor::zeros(&[n, 3]));
            for i in 0..n {
                let (r, s) = frame_parts(fv.row(i));
                let m = Vector3::from_row_slice(mv.row(i));
                let d = Vector3::from_row_slice(dy.row(i));
                if let Some(df) = df.as_mut() {
                    let row = df.row_mut(i);
                    let dr = s * d * m.transpose();
                    for a in 0..3 {
                        for b in 0..3 {
                            row[3 * a + b] = dr[(a, b)];
                        }
                    }
                    row[9] = d.dot(&(r * m));
                    row[10..13].copy_from_slice(d.as_slice());
                }
                if let Some(dm) = dm.as_mut() {
                    let v = s * r.transpose() * d;
                    dm.row_mut(i).copy_from_slice(v.as_slice());
                }
            }
            vec![df, dm]
        }),
    ))
}

/// World covariances `M Mᵀ` with `M = R Q(q) diag(s S′)`, flattened to
/// `[n, 9]`. `q` is expected to be unit length.
pub fn bind_covariance(g: &mut Graph, frames: Var, rot: Var, scale: Var) -> Result<Var> {
    let n = check_rows(g, "bind_covariance", frames, rot, 4)?;
    check_rows(g, "bind_covariance", frames, scale, 3)?;
    let factor = |f: &[f64], q: &[f64], sc: &[f64]| {
        let (r, s) = frame_parts(f);
        let qm = quat::to_matrix([q[0], q[1], q[2], q[3]]);
        let d = Matrix3::from_diagonal(&Vector3::new(s * sc[0], s * sc[1], s * sc[2]));
        (r, s, qm, r * qm * d)
    };
    let (fv, qv, sv) = (g.value(frames), g.value(rot), g.value(scale));
    let mut out = vec![0.0; n * 9];
    for i in 0..n {
        let (_, _, _, m) = factor(fv.row(i), qv.row(i), sv.row(i));
        let c = m * m.transpose();
        for k in 0..9 {
            out[9 * i + k] = c[(k / 3, k % 3)];
        }
    }
    Ok(g.custom(
        &[frames, rot, scale],
        Tensor::new(&[n, 9], out),
        Box::new(move |ctx| {
            let (fv, qv, sv, dy) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad);
            let mut df = ctx.needs[0].then(|| Tensor::zeros(&[n, FRAME_WIDTH]));
            let mut dq = ctx.needs[1].then(|| Tensor::zeros(&[n, 4]));
            let mut ds = ctx.needs[2].then(|| Tensor::zeros(&[n, 3]));
            for i in 0..n {
                let (r, s, qm, m) = factor(fv.row(i), qv.row(i), sv.row(i));
                let dc = Matrix3::from_row_slice(dy.row(i));
                let dm = (dc + dc.transpose()) * m;
                let sc = sv.row(i);
                let diag = Matrix3::from_diagonal(&Vector3::new(s * sc[0], s * sc[1], s * sc[2]));
                let a = r * qm;
                let da = dm * diag;
                let atdm = a.transpose() * dm;
                if let Some(df) = df.as_mut() {
                    let dr = da * qm.transpose();
                    let row = df.row_mut(i);
                    for p in 0..3 {
                        for q in 0..3 {
                            row[3 * p + q] = dr[(p, q)];
                        }
                    }
                    row[9] = (0..3).map(|k| sc[k] * atdm[(k, k)]).sum();
                }
                if let Some(dq) = dq.as_mut() {
                    let dqm = r.transpose() * da;
                    let q = qv.row(i);
                    let jac = quat::to_matrix_jacobian([q[0], q[1], q[2], q[3]]);
                    let row = dq.row_mut(i);
                    for k in 0..4 {
                        row[k] = dqm.component_mul(&jac[k]).sum();
                    }
                }
                if let Some(ds) = ds.as_mut() {
                    let row = ds.row_mut(i);
                    for k in 0..3 {
                        row[k] = s * atdm[(k, k)];
                    }
                }
            }
            vec![df, dq, ds]
        }),
    ))
}
