use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Vertex one-rings derived from a face list, uniform edge weights.
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    pub neighbors: Vec<Vec<usize>>,
    directed_edges: usize,
}

impl Neighborhoods {
    pub fn new(num_vertices: usize, faces: &[[usize; 3]]) -> Self {
        let mut sets = vec![BTreeSet::new(); num_vertices];
        for f in faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if a != b {
                    sets[a].insert(b);
                    sets[b].insert(a);
                }
            }
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let directed_edges = neighbors.iter().map(Vec::len).sum();
        Neighborhoods {
            neighbors,
            directed_edges,
        }
    }
}

fn point(x: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
}

/// Rotation closest to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // Singular values are sorted descending; flip the weakest axis.
        let mut u2 = u;
        let col = -u2.column(2);
        u2.set_column(2, &col);
        r = u2 * vt;
    }
    r
}

fn best_rotations(nb: &Neighborhoods, posed: &[f64], reference: &[f64]) -> Vec<Matrix3<f64>> {
    nb.neighbors
        .iter()
        .enumerate()
        .map(|(i, ns)| {
            // Covariance of deformed edges against reference edges.
            let mut cov = Matrix3::zeros();
            let mut undeformed = true;
            let (pi, qi) = (point(posed, i), point(reference, i));
            for &j in ns {
                let (e, e0) = (pi - point(posed, j), qi - point(reference, j));
                undeformed &= e == e0;
                cov += e * e0.transpose();
            }
            if undeformed {
                return Matrix3::identity();
            }
            nearest_rotation(&cov)
        })
        .collect()
}

fn residual(posed: &[f64], reference: &[f64], r: &Matrix3<f64>, i: usize, j: usize) -> Vector3<f64> {
    (point(posed, i) - point(posed, j)) - r * (point(reference, i) - point(reference, j))
}

fn energy(nb: &Neighborhoods, posed: &[f64], reference: &[f64], rots: &[Matrix3<f64>]) -> f64 {
    if nb.directed_edges == 0 {
        return 0.0;
    }
    let mut e = 0.0;
    for (i, ns) in nb.neighbors.iter().enumerate() {
        for &j in ns {
            e += residual(posed, reference, &rots[i], i, j).norm_squared();
        }
    }
    e / nb.directed_edges as f64
}

fn check(posed: &[f64], reference: &[f64], nv: usize) -> Result<()> {
    if posed.len() != reference.len() || posed.len() != 3 * nv {
        return Err(Error::shape(
            "arap_energy",
            format!("{} coordinates", 3 * nv),
            format!("{} and {}", posed.len(), reference.len()),
        ));
    }
    Ok(())
}

/// As-rigid-as-possible energy of `posed` relative to `reference`, averaged
/// over directed one-ring edges.
pub fn arap_energy(posed: &[[f64; 3]], reference: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<f64> {
    let nb = Neighborhoods::new(reference.len(), faces);
    let p: Vec<f64> = posed.iter().flatten().copied().collect();
    let q: Vec<f64> = reference.iter().flatten().copied().collect();
    check(&p, &q, reference.len())?;
    let rots = best_rotations(&nb, &p, &q);
    Ok(energy(&nb, &p, &q, &rots))
}

/// Graph version differentiable with respect to `posed [V,3]`. The
/// per-vertex rotations are treated as fixed at their optimum, which gives
/// the exact gradient of the minimized energy.
pub fn arap_energy_op(g: &mut Graph, nb: Arc<Neighborhoods>, posed: Var, reference: Var) -> Result<Var> {
    let (p, q) = (g.value(posed), g.value(reference));
    check(p.data(), q.data(), nb.neighbors.len())?;
    let rots = best_rotations(&nb, p.data(), q.data());
    let e = energy(&nb, p.data(), q.data(), &rots);
    Ok(g.custom(
        &[posed, reference],
        Tensor::scalar(e),
        Box::new(move |ctx| {
            if !ctx.needs[0] {
                return vec![None, None];
            }
            if ctx.needs[1] {
                log::warn!("arap energy is not differentiated with respect to the reference");
            }
            let (p, q) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let rots = best_rotations(&nb, p, q);
            let scale = 2.0 * ctx.grad.item() / nb.directed_edges.max(1) as f64;
            let mut d = vec![0.0; p.len()];
            for (i, ns) in nb.neighbors.iter().enumerate() {
                for &j in ns {
                    let r = scale * residual(p, q, &rots[i], i, j);
                    for a in 0..3 {
                        d[3 * i + a] += r[a];
                        d[3 * j + a] -= r[a];
                    }
                }
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape(), d)), None]
        }),
    ))
}
