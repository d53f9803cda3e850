use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use super::{HeadParams, HeadTemplate};
use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const SMALL_ANGLE: f64 = 1e-5;

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(v: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(v);
    let th = v.norm();
    let k = skew(&v);
    if th < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    Matrix3::identity() + (th.sin() / th) * k + ((1.0 - th.cos()) / (th * th)) * k * k
}

/// Partial derivatives of [`rodrigues`] with respect to each component.
pub fn rodrigues_jacobian(v: [f64; 3]) -> [Matrix3<f64>; 3] {
    let r = rodrigues(v);
    let v = Vector3::from(v);
    let th2 = v.norm_squared();
    let e = [Vector3::x(), Vector3::y(), Vector3::z()];
    let kv = skew(&v);
    std::array::from_fn(|i| {
        let ki = skew(&e[i]);
        if th2.sqrt() < SMALL_ANGLE {
            ki + 0.5 * (ki * kv + kv * ki)
        } else {
            let w = v.cross(&((Matrix3::identity() - r) * e[i]));
            (v[i] * kv + skew(&w)) * r / th2
        }
    })
}

struct Chain {
    local: Vec<Matrix3<f64>>,
    m: Vec<Matrix3<f64>>,
    b: Vec<Vector3<f64>>,
}

fn joint_chain(template: &HeadTemplate, theta: &[f64]) -> Chain {
    let nj = template.num_joints();
    let local: Vec<_> = (0..nj)
        .map(|k| rodrigues([theta[3 * k], theta[3 * k + 1], theta[3 * k + 2]]))
        .collect();
    let mut m = Vec::with_capacity(nj);
    let mut b = Vec::with_capacity(nj);
    for (k, joint) in template.joints.iter().enumerate() {
        let j = Vector3::from(joint.position);
        let (mp, bp) = match joint.parent {
            Some(p) => (m[p], b[p]),
            None => (Matrix3::identity(), Vector3::zeros()),
        };
        m.push(mp * local[k]);
        b.push(mp * (j - local[k] * j) + bp);
    }
    Chain { local, m, b }
}

fn skin(template: &HeadTemplate, chain: &Chain, rest: &[f64]) -> Vec<f64> {
    let nj = template.num_joints();
    let mut out = vec![0.0; rest.len()];
    for (v, (p, o)) in rest.chunks_exact(3).zip(out.chunks_exact_mut(3)).enumerate() {
        let p = Vector3::new(p[0], p[1], p[2]);
        // Written as a displacement so identity transforms are exact.
        let mut acc = p;
        for k in 0..nj {
            let w = template.skin_weights[v * nj + k];
            if w != 0.0 {
                acc += w * ((chain.m[k] - Matrix3::identity()) * p + chain.b[k]);
            }
        }
        o.copy_from_slice(acc.as_slice());
    }
    out
}

/// Unposed vertices: template plus shape, expression and static offsets.
pub fn shaped_vertices(template: &HeadTemplate, params: &HeadParams) -> Result<Vec<[f64; 3]>> {
    params.check(template)?;
    let (ns, ne) = (template.shape_dim, template.expr_dim);
    Ok(template
        .vertices
        .iter()
        .enumerate()
        .map(|(v, p)| {
            std::array::from_fn(|a| {
                let r = 3 * v + a;
                let s: f64 = (0..ns).map(|k| template.shape_basis[r * ns + k] * params.beta[k]).sum();
                let e: f64 = (0..ne).map(|k| template.expr_basis[r * ne + k] * params.phi[k]).sum();
                p[a] + s + e + params.delta[v][a]
            })
        })
        .collect())
}

/// Posed mesh vertices for the given parameters.
pub fn pose_mesh(template: &HeadTemplate, params: &HeadParams) -> Result<Vec<[f64; 3]>> {
    let rest: Vec<f64> = shaped_vertices(template, params)?.into_iter().flatten().collect();
    let theta: Vec<f64> = params.theta.iter().flatten().copied().collect();
    let chain = joint_chain(template, &theta);
    Ok(skin(template, &chain, &rest)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

/// Constant graph tensors for the template's bases, built once per template.
#[derive(Clone)]
pub struct TemplateTensors {
    pub template: Arc<HeadTemplate>,
    pub vertices: Arc<Tensor>,
    pub shape_basis: Arc<Tensor>,
    pub expr_basis: Arc<Tensor>,
}

impl TemplateTensors {
    pub fn new(template: Arc<HeadTemplate>) -> Self {
        let nv = template.num_vertices();
        let vertices = Tensor::new(&[nv, 3], template.vertices.iter().flatten().copied().collect());
        let shape_basis = Tensor::new(&[nv * 3, template.shape_dim], template.shape_basis.clone());
        let expr_basis = Tensor::new(&[nv * 3, template.expr_dim], template.expr_basis.clone());
        TemplateTensors {
            template,
            vertices: Arc::new(vertices),
            shape_basis: Arc::new(shape_basis),
            expr_basis: Arc::new(expr_basis),
        }
    }
}

/// Records mesh posing on the graph. `beta` has shape `[nβ]`, `theta`
/// `[J, 3]`, `phi` `[nφ]` and `delta` `[V, 3]`; the result is `[V, 3]`.
pub fn pose_mesh_op(g: &mut Graph, tt: &TemplateTensors, beta: Var, theta: Var, phi: Var, delta: Var) -> Result<Var> {
    let t = &tt.template;
    let nv = t.num_vertices();
    let expect = |what, v: Var, shape: &[usize], g: &Graph| {
        if g.shape(v) == shape {
            Ok(())
        } else {
            Err(Error::shape(what, format!("{shape:?}"), format!("{:?}", g.shape(v))))
        }
    };
    expect("pose_mesh beta", beta, &[t.shape_dim], g)?;
    expect("pose_mesh theta", theta, &[t.num_joints(), 3], g)?;
    expect("pose_mesh phi", phi, &[t.expr_dim], g)?;
    expect("pose_mesh delta", delta, &[nv, 3], g)?;

    let base = g.constant_shared(tt.vertices.clone());
    let sb = g.constant_shared(tt.shape_basis.clone());
    let eb = g.constant_shared(tt.expr_basis.clone());
    let beta_col = g.reshape(beta, &[t.shape_dim, 1]);
    let phi_col = g.reshape(phi, &[t.expr_dim, 1]);
    let ds = g.matmul(sb, beta_col);
    let de = g.matmul(eb, phi_col);
    let ds = g.reshape(ds, &[nv, 3]);
    let de = g.reshape(de, &[nv, 3]);
    let rest = g.add(base, ds);
    let rest = g.add(rest, de);
    let rest = g.add(rest, delta);
    Ok(lbs_op(g, t.clone(), rest, theta))
}

/// Linear blend skinning of `rest [V,3]` by joint rotations `theta [J,3]`.
pub fn lbs_op(g: &mut Graph, template: Arc<HeadTemplate>, rest: Var, theta: Var) -> Var {
    let rest_v = g.value(rest);
    let theta_v = g.value(theta);
    let chain = joint_chain(&template, theta_v.data());
    let out = skin(&template, &chain, rest_v.data());
    let out = Tensor::new(rest_v.shape(), out);
    g.custom(
        &[rest, theta],
        out,
        Box::new(move |ctx| {
            let nj = template.num_joints();
            let dy = ctx.grad.data();
            let rest = ctx.inputs[0].data();
            let theta = ctx.inputs[1].data();
            let chain = joint_chain(&template, theta);
            let mut d_rest = None;
            if ctx.needs[0] {
                let mut dr = vec![0.0; rest.len()];
                for (v, (dyv, drv)) in dy.chunks_exact(3).zip(dr.chunks_exact_mut(3)).enumerate() {
                    let d = Vector3::new(dyv[0], dyv[1], dyv[2]);
                    let mut acc = Vector3::zeros();
                    for k in 0..nj {
                        let w = template.skin_weights[v * nj + k];
                        if w != 0.0 {
                            acc += w * chain.m[k].transpose() * d;
                        }
                    }
                    drv.copy_from_slice(acc.as_slice());
                }
                d_rest = Some(Tensor::new(ctx.inputs[0].shape(), dr));
            }
            let mut d_theta = None;
            if ctx.needs[1] {
                let mut dm = vec![Matrix3::zeros(); nj];
                let mut db = vec![Vector3::zeros(); nj];
                for (v, (dyv, p)) in dy.chunks_exact(3).zip(rest.chunks_exact(3)).enumerate() {
                    let d = Vector3::new(dyv[0], dyv[1], dyv[2]);
                    let p = Vector3::new(p[0], p[1], p[2]);
                    for k in 0..nj {
                        let w = template.skin_weights[v * nj + k];
                        if w != 0.0 {
                            dm[k] += w * d * p.transpose();
                            db[k] += w * d;
                        }
                    }
                }
                let mut dt = vec![0.0; theta.len()];
                for k in (0..nj).rev() {
                    let j = Vector3::from(template.joints[k].position);
                    let rk = chain.local[k];
                    let dr = match template.joints[k].parent {
                        Some(p) => {
                            let mp = chain.m[p];
                            let (dmk, dbk) = (dm[k], db[k]);
                            dm[p] += dmk * rk.transpose() + dbk * (j - rk * j).transpose();
                            db[p] += dbk;
                            mp.transpose() * dmk - mp.transpose() * dbk * j.transpose()
                        }
                        None => dm[k] - db[k] * j.transpose(),
                    };
                    let jac = rodrigues_jacobian([theta[3 * k], theta[3 * k + 1], theta[3 * k + 2]]);
                    for i in 0..3 {
                        dt[3 * k + i] = dr.component_mul(&jac[i]).sum();
                    }
                }
                d_theta = Some(Tensor::new(ctx.inputs[1].shape(), dt));
            }
            vec![d_rest, d_theta]
        }),
    )
}
