//! Primitive differentiable operations recorded on a [`Graph`].

use std::sync::Arc;

use rayon::prelude::*;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` over row-major slices, where
/// `op` optionally transposes. `a` is m×k after `op`, `b` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked against the declared dimensions.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.row_len())
}

impl Graph {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        self.custom(
            &[x],
            out,
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let ys = ctx.output.data();
                let g = ctx.grad.data();
                let data = xs
                    .iter()
                    .zip(ys)
                    .zip(g)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape(), data))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// |x| with derivative 0 at the kink.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Literal `max(x, floor)`; at `x == floor` the constant branch is taken.
    pub fn max_scalar(&mut self, x: Var, floor: f64) -> Var {
        self.unary(
            x,
            move |v| v.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, move |v| v + s, |_, _| 1.0)
    }

    fn binary_same(&mut self, a: Var, b: Var, op: &'static str) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "{op}: operand sizes differ");
        let data: Vec<f64> = match op {
            "add" => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            "sub" => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            _ => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
        };
        let out = Tensor::new(ta.shape(), data);
        self.custom(
            &[a, b],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad;
                match op {
                    "add" => vec![Some(g.clone()), Some(g.clone())],
                    "sub" => vec![Some(g.clone()), Some(g.map(|v| -v))],
                    _ => {
                        let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                        let ga = ctx.needs[0].then(|| {
                            let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                            Tensor::new(x.shape(), d)
                        });
                        let gb = ctx.needs[1].then(|| {
                            let d = g.data().iter().zip(x.data()).map(|(g, x)| g * x).collect();
                            Tensor::new(y.shape(), d)
                        });
                        vec![ga, gb]
                    }
                }
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul")
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (m, n) = dims2(self.value(x));
        assert_eq!(self.value(row).len(), n, "add_row: row length");
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let row_shape = self.value(row).shape().to_vec();
        self.custom(
            &[x, row],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gr = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for i in 0..m {
                        for (a, v) in acc.iter_mut().zip(g.row(i)) {
                            *a += v;
                        }
                    }
                    Tensor::new(&row_shape, acc)
                });
                vec![ctx.needs[0].then(|| g.clone()), gr]
            }),
        )
    }

    /// Scales each row `i` of an `m×n` matrix by `col[i]` (`col` is m×1).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (m, n) = dims2(self.value(x));
        assert_eq!(self.value(col).len(), m, "mul_col: column length");
        let c = self.value(col).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, ci) in c.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= ci;
            }
        }
        let col_shape = self.value(col).shape().to_vec();
        self.custom(
            &[x, col],
            out,
            Box::new(move |ctx| {
                let (xv, cv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let mut d = g.clone();
                    for i in 0..m {
                        let ci = cv.data()[i];
                        for o in d.row_mut(i) {
                            *o *= ci;
                        }
                    }
                    d
                });
                let gc = ctx.needs[1].then(|| {
                    let d = (0..m)
                        .map(|i| g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(&col_shape, d)
                });
                let _ = n;
                vec![gx, gc]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.custom(
            &[x],
            Tensor::scalar(s),
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).sum() / n;
        self.custom(
            &[x],
            Tensor::scalar(s),
            Box::new(move |ctx| {
                vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item() / n))]
            }),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let vars: Vec<Var> = terms.iter().map(|t| t.1).collect();
        let weights: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let s = terms.iter().map(|(w, v)| w * self.value(*v).item()).sum();
        self.custom(
            &vars,
            Tensor::scalar(s),
            Box::new(move |ctx| {
                weights
                    .iter()
                    .map(|w| Some(Tensor::scalar(w * ctx.grad.item())))
                    .collect()
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.custom(
            &[a, b],
            Tensor::new(&[m, n], out),
            Box::new(move |ctx| {
                let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
                let ga = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), true, &mut d, 0.0);
                    Tensor::new(av.shape(), d)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, &mut d, 0.0);
                    Tensor::new(bv.shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x·w + b` for `x: m×k`, `w: k×n`, `b: n`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(x));
        let (k2, n) = dims2(self.value(w));
        assert_eq!(k, k2, "affine: inner dimensions {k} vs {k2}");
        assert_eq!(self.value(b).len(), n, "affine: bias length");
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        self.custom(
            &[x, w, b],
            Tensor::new(&[m, n], out),
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, wv.data(), true, &mut d, 0.0);
                    Tensor::new(xv.shape(), d)
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, xv.data(), true, g, false, &mut d, 0.0);
                    Tensor::new(wv.shape(), d)
                });
                let gb = ctx.needs[2].then(|| {
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for (a, v) in d.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *a += v;
                        }
                    }
                    Tensor::new(ctx.inputs[2].shape(), d)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshaped(shape)
            .expect("reshape: element count must match");
        self.custom(
            &[x],
            out,
            Box::new(|ctx| {
                let g = ctx.grad.clone().reshaped(ctx.inputs[0].shape()).expect("reshape");
                vec![Some(g)]
            }),
        )
    }

    /// Rows `[start, end)` along axis 0 (channels for images).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.value(x);
        let w = t.row_len();
        assert!(start <= end && end <= t.rows(), "slice_rows out of range");
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(&shape, t.data()[start * w..end * w].to_vec());
        self.custom(
            &[x],
            out,
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                g.data_mut()[start * w..end * w].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let w = self.value(xs[0]).row_len();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            assert_eq!(t.row_len(), w, "concat_rows: row widths differ");
            rows += t.rows();
            sizes.push(t.len());
            data.extend_from_slice(t.data());
        }
        let mut shape = self.value(xs[0]).shape().to_vec();
        shape[0] = rows;
        self.custom(
            xs,
            Tensor::new(&shape, data),
            Box::new(move |ctx| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(&ctx.inputs)
                    .zip(ctx.needs)
                    .map(|((&s, inp), &need)| {
                        let g = need.then(|| {
                            Tensor::new(inp.shape(), ctx.grad.data()[off..off + s].to_vec())
                        });
                        off += s;
                        g
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (m, n) = dims2(self.value(x));
        assert!(start <= end && end <= n, "slice_cols out of range");
        let w = end - start;
        let t = self.value(x);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        self.custom(
            &[x],
            Tensor::new(&[m, w], data),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                for i in 0..m {
                    g.row_mut(i)[start..end].copy_from_slice(&ctx.grad.data()[i * w..(i + 1) * w]);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let m = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                let t = self.value(x);
                assert_eq!(t.rows(), m, "concat_cols: row counts differ");
                data.extend_from_slice(t.row(i));
            }
        }
        self.custom(
            xs,
            Tensor::new(&[m, total], data),
            Box::new(move |ctx| {
                let mut outs: Vec<Option<Tensor>> = Vec::with_capacity(widths.len());
                let mut off = 0;
                for (j, &w) in widths.iter().enumerate() {
                    if !ctx.needs[j] {
                        outs.push(None);
                        off += w;
                        continue;
                    }
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&ctx.grad.data()[i * total + off..i * total + off + w]);
                    }
                    outs.push(Some(Tensor::new(ctx.inputs[j].shape(), d)));
                    off += w;
                }
                outs
            }),
        )
    }

    /// Row gather; the adjoint scatter-adds in index order.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let t = self.value(x);
        let w = t.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        self.custom(
            &[x],
            Tensor::new(&shape, data),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                for (r, &i) in index.iter().enumerate() {
                    for (a, v) in g.row_mut(i).iter_mut().zip(&ctx.grad.data()[r * w..(r + 1) * w]) {
                        *a += v;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Per-row Euclidean norm, `m×n → m×1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.rows();
        let norms: Vec<f64> = (0..m).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        self.custom(
            &[x],
            Tensor::new(&[m, 1], norms),
            Box::new(move |ctx| {
                let (xv, y, g) = (ctx.inputs[0], ctx.output.data(), ctx.grad.data());
                let mut d = xv.clone();
                for i in 0..m {
                    let s = if y[i] > 0.0 { g[i] / y[i] } else { 0.0 };
                    for v in d.row_mut(i) {
                        *v *= s;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Rescales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.rows();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let n = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        self.custom(
            &[x],
            out,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let mut d = g.clone();
                for (i, &norm) in norms.iter().enumerate() {
                    let yi = y.row(i);
                    let dot: f64 = yi.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for (dv, yv) in d.row_mut(i).iter_mut().zip(yi) {
                        *dv = (*dv - yv * dot) / norm;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// `x: [c, h, w]`, `weight: [c_out, c*9]`, `bias: [c_out]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv3x3 expects [c, h, w]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kk) = dims2(self.value(weight));
        assert_eq!(kk, c * 9, "conv3x3: weight has {kk} taps for {c} channels");
        let hw = h * w;
        let cols = im2col(self.value(x).data(), c, h, w);
        let mut out = Vec::with_capacity(co * hw);
        for &b in self.value(bias).data() {
            out.extend(std::iter::repeat_n(b, hw));
        }
        gemm(co, c * 9, hw, self.value(weight).data(), false, &cols, false, &mut out, 1.0);
        drop(cols);
        self.custom(
            &[x, weight, bias],
            Tensor::new(&[co, h, w], out),
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
                let cols = (ctx.needs[1]).then(|| im2col(xv.data(), c, h, w));
                let gw = cols.map(|cols| {
                    let mut d = vec![0.0; co * c * 9];
                    gemm(co, hw, c * 9, g, false, &cols, true, &mut d, 0.0);
                    Tensor::new(wv.shape(), d)
                });
                let gx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0; c * 9 * hw];
                    gemm(c * 9, co, hw, wv.data(), true, g, false, &mut dcols, 0.0);
                    Tensor::new(xv.shape(), col2im(&dcols, c, h, w))
                });
                let gb = ctx.needs[2].then(|| {
                    let d = (0..co).map(|o| g[o * hw..(o + 1) * hw].iter().sum()).collect();
                    Tensor::new(ctx.inputs[2].shape(), d)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// 2×2 average pooling over `[c, h, w]`; odd trailing rows/cols are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w;
                    let v = xv[base + 2 * i * w + 2 * j]
                        + xv[base + 2 * i * w + 2 * j + 1]
                        + xv[base + (2 * i + 1) * w + 2 * j]
                        + xv[base + (2 * i + 1) * w + 2 * j + 1];
                    out[ch * ho * wo + i * wo + j] = 0.25 * v;
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(&[c, ho, wo], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = 0.25 * g[ch * ho * wo + i * wo + j];
                            let base = ch * h * w;
                            d[base + 2 * i * w + 2 * j] += v;
                            d[base + 2 * i * w + 2 * j + 1] += v;
                            d[base + (2 * i + 1) * w + 2 * j] += v;
                            d[base + (2 * i + 1) * w + 2 * j + 1] += v;
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], d))]
            }),
        )
    }

    /// Per-pixel unit normalization across channels:
    /// `y = x / sqrt(Σ_c x² + eps)` for `x: [c, h, w]`.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let xv = self.value(x).data();
        let mut inv = vec![0.0; hw];
        for (p, iv) in inv.iter_mut().enumerate() {
            let ss: f64 = (0..c).map(|ch| xv[ch * hw + p].powi(2)).sum();
            *iv = 1.0 / (ss + eps).sqrt();
        }
        let out: Vec<f64> = (0..c * hw).map(|i| xv[i] * inv[i % hw]).collect();
        self.custom(
            &[x],
            Tensor::new(&s, out),
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut d = vec![0.0; c * hw];
                for p in 0..hw {
                    let dot: f64 = (0..c).map(|ch| y[ch * hw + p] * g[ch * hw + p]).sum();
                    for ch in 0..c {
                        let i = ch * hw + p;
                        d[i] = inv[p] * (g[i] - y[i] * dot);
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), d))]
            }),
        )
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Columns `[c*9, h*w]` for a zero-padded 3×3 stencil.
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    cols.par_chunks_mut(9 * hw).enumerate().for_each(|(ch, block)| {
        let src = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut block[(ky * 3 + kx) * hw..(ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let si = si as usize;
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        row[i * w + j] = src[si * w + sj as usize];
                    }
                }
            }
        }
    });
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    x.par_chunks_mut(hw).enumerate().for_each(|(ch, dst)| {
        let block = &cols[ch * 9 * hw..(ch + 1) * 9 * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &block[(ky * 3 + kx) * hw..(ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let si = si as usize;
                    for j in 0..w {
                        let sj = j as isize + kx as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        dst[si * w + sj as usize] += row[i * w + j];
                    }
                }
            }
        }
    });
    x
}
