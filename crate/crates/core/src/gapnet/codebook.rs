use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Softmax of a slice, shifted by its maximum.
pub fn softmax(w: &[f64]) -> Vec<f64> {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Convex combination of identity codes for one part: `Σ_j softmax(w)_j z_j`.
/// `w` has `k` logits and `codes` is row-major `k × dim`.
pub fn combine_identity(w: &[f64], codes: &[f64], dim: usize) -> Result<Vec<f64>> {
    let k = w.len();
    if k == 0 {
        return Err(Error::InvalidArgument("identity codebook is empty".into()));
    }
    if codes.len() != k * dim {
        return Err(Error::shape("combine_identity", k * dim, codes.len()));
    }
    let p = softmax(w);
    let mut out = vec![0.0; dim];
    for (j, pj) in p.iter().enumerate() {
        for (o, z) in out.iter_mut().zip(&codes[j * dim..(j + 1) * dim]) {
            *o += pj * z;
        }
    }
    Ok(out)
}

/// Graph version: `w [k, 1]`, `codes [k, dim]` to `[1, dim]`.
pub fn combine_identity_op(g: &mut Graph, w: Var, codes: Var) -> Result<Var> {
    let (ws, cs) = (g.shape(w).to_vec(), g.shape(codes).to_vec());
    if ws.len() != 2 || ws[1] != 1 || cs.len() != 2 || cs[0] != ws[0] {
        return Err(Error::shape("combine_identity", "[k, 1] and [k, dim]", format!("{ws:?} and {cs:?}")));
    }
    let (k, dim) = (cs[0], cs[1]);
    let out = combine_identity(g.value(w).data(), g.value(codes).data(), dim)?;
    Ok(g.custom(
        &[w, codes],
        Tensor::new(&[1, dim], out),
        Box::new(move |ctx| {
            let (w, z, dy) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let p = softmax(w);
            let dw = ctx.needs[0].then(|| {
                let dp: Vec<f64> = (0..k)
                    .map(|j| z[j * dim..(j + 1) * dim].iter().zip(dy).map(|(a, b)| a * b).sum())
                    .collect();
                let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                Tensor::new(&[k, 1], (0..k).map(|j| p[j] * (dp[j] - mean)).collect())
            });
            let dz = ctx.needs[1].then(|| {
                let mut d = vec![0.0; k * dim];
                for j in 0..k {
                    for c in 0..dim {
                        d[j * dim + c] = p[j] * dy[c];
                    }
                }
                Tensor::new(&[k, dim], d)
            });
            vec![dw, dz]
        }),
    ))
}
