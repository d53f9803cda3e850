//! Central finite-difference checking of recorded adjoints.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error per input:
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, tiny)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Evaluates `f` on fresh graphs and compares the reverse-mode gradient of
/// the scalar it returns against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let mut d = Tensor::zeros(t.shape());
        for i in 0..t.len() {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work);
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work);
            work[k].data_mut()[i] = orig;
            d.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        numeric.push(d);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    GradCheck {
        rel_errors,
        analytic,
        numeric,
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}
