use nalgebra::{Matrix3, Vector3};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-face local frame: columns of `r` are the first edge direction,
/// normal × edge, and the face normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleFrame {
    pub r: Matrix3<f64>,
    pub s: f64,
    pub t: Vector3<f64>,
}

/// Flattened frame layout used on the graph: row-major `R` (9), `s`, `T` (3).
pub const FRAME_WIDTH: usize = 13;

impl TriangleFrame {
    pub fn to_row(&self) -> [f64; FRAME_WIDTH] {
        let mut out = [0.0; FRAME_WIDTH];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = self.r[(i, j)];
            }
        }
        out[9] = self.s;
        out[10..].copy_from_slice(self.t.as_slice());
        out
    }

    pub fn from_row(row: &[f64]) -> Self {
        TriangleFrame {
            r: Matrix3::from_row_slice(&row[..9]),
            s: row[9],
            t: Vector3::new(row[10], row[11], row[12]),
        }
    }
}

struct FaceGeom {
    a: Vector3<f64>,
    an: f64,
    cn: f64,
    e1: Vector3<f64>,
    n: Vector3<f64>,
}

fn vertex(posed: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(posed[3 * i], posed[3 * i + 1], posed[3 * i + 2])
}

fn face_geom(posed: &[f64], f: &[usize; 3], face: usize) -> Result<(FaceGeom, TriangleFrame)> {
    let [p0, p1, p2] = f.map(|i| vertex(posed, i));
    let a = p1 - p0;
    let b = p2 - p0;
    let c = a.cross(&b);
    let (an, cn) = (a.norm(), c.norm());
    // Relative threshold so slivers at any scale are caught.
    if cn <= 1e-14 * (a.norm_squared() + b.norm_squared()) || an == 0.0 || !cn.is_finite() {
        return Err(Error::DegenerateFace { face });
    }
    let e1 = a / an;
    let n = c / cn;
    let e2 = n.cross(&e1);
    let frame = TriangleFrame {
        r: Matrix3::from_columns(&[e1, e2, n]),
        s: (0.5 * cn).sqrt(),
        t: (p0 + p1 + p2) / 3.0,
    };
    Ok((FaceGeom { a, an, cn, e1, n }, frame))
}

/// Frames for every face of a posed mesh given as `V × 3` positions.
pub fn triangle_frames(posed: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<Vec<TriangleFrame>> {
    let flat: Vec<f64> = posed.iter().flatten().copied().collect();
    frames_flat(&flat, faces)
}

fn frames_flat(posed: &[f64], faces: &[[usize; 3]]) -> Result<Vec<TriangleFrame>> {
    faces
        .iter()
        .enumerate()
        .map(|(i, f)| face_geom(posed, f, i).map(|(_, fr)| fr))
        .collect()
}

fn normalize_backward(x_norm: f64, unit: &Vector3<f64>, d_unit: &Vector3<f64>) -> Vector3<f64> {
    (d_unit - unit * unit.dot(d_unit)) / x_norm
}

/// Records frame extraction on the graph: `posed [V,3]` to `[T, 13]`.
pub fn triangle_frames_op(g: &mut Graph, posed: Var, faces: std::sync::Arc<Vec<[usize; 3]>>) -> Result<Var> {
    let pv = g.value(posed);
    if pv.shape().len() != 2 || pv.shape()[1] != 3 {
        return Err(Error::shape("triangle_frames", "[V, 3]", format!("{:?}", pv.shape())));
    }
    let nv = pv.shape()[0];
    if let Some(i) = faces.iter().position(|f| f.iter().any(|&v| v >= nv)) {
        return Err(Error::InvalidArgument(format!("face {i} indexes a missing vertex")));
    }
    let frames = frames_flat(pv.data(), &faces)?;
    let out: Vec<f64> = frames.iter().flat_map(|f| f.to_row()).collect();
    let out = Tensor::new(&[faces.len(), FRAME_WIDTH], out);
    Ok(g.custom(
        &[posed],
        out,
        Box::new(move |ctx| {
            let posed = ctx.inputs[0].data();
            let dy = ctx.grad.data();
            let mut dp = vec![0.0; posed.len()];
            for (fi, f) in faces.iter().enumerate() {
                let Ok((geo, _)) = face_geom(posed, f, fi) else {
                    continue;
                };
                let d = &dy[fi * FRAME_WIDTH..(fi + 1) * FRAME_WIDTH];
                let dr = Matrix3::from_row_slice(&d[..9]);
                let ds = d[9];
                let dt = Vector3::new(d[10], d[11], d[12]);
                let mut de1: Vector3<f64> = dr.column(0).into();
                let de2: Vector3<f64> = dr.column(1).into();
                let mut dn: Vector3<f64> = dr.column(2).into();
                // e2 = n × e1
                dn += geo.e1.cross(&de2);
                de1 += de2.cross(&geo.n);
                let s = (0.5 * geo.cn).sqrt();
                let mut dc = normalize_backward(geo.cn, &geo.n, &dn);
                dc += geo.n * (ds / (4.0 * s));
                let mut da = normalize_backward(geo.an, &geo.e1, &de1);
                let [p0, _, p2] = f.map(|i| vertex(posed, i));
                let bv = p2 - p0;
                da += bv.cross(&dc);
                let db = dc.cross(&geo.a);
                let grads = [-(da + db) + dt / 3.0, da + dt / 3.0, db + dt / 3.0];
                for (k, &vi) in f.iter().enumerate() {
                    for ax in 0..3 {
                        dp[3 * vi + ax] += grads[k][ax];
                    }
                }
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape(), dp))]
        }),
    ))
}
