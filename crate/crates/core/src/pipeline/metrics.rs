use serde::Serialize;

use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::losses::ssim;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// Decibels; `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

impl Metrics {
    /// `psnr=… ssim=… l1=…`, with `inf` for identical images.
    pub fn summary(&self) -> String {
        format!("psnr={} ssim={:.9} l1={:.9}", fmt_psnr(self.psnr), self.ssim, self.l1)
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn check(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() || pred.is_empty() {
        return Err(Error::shape("metrics", format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for images with range 1.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    let mse = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn metrics(pred: &Tensor, gt: &Tensor) -> Result<Metrics> {
    check(pred, gt)?;
    let l1 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
    Ok(Metrics {
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        l1,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn constant_difference_gives_twenty_db() {
        let a = Tensor::full(&[3, 12, 12], 0.3);
        let b = Tensor::full(&[3, 12, 12], 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn identical_images_hit_the_sentinel() {
        let a = Tensor::full(&[3, 12, 12], 0.3);
        let m = metrics(&a, &a).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ssim - 1.0).abs() < 1e-9);
        assert_eq!(m.l1, 0.0);
        assert!(m.summary().starts_with("psnr=inf "));
    }

    #[test]
    fn psnr_matches_direct_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 3 * 13 * 13;
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut mse = 0.0;
        for i in 0..n {
            mse += (a[i] - b[i]).powi(2);
        }
        mse /= n as f64;
        let ta = Tensor::from_vec(&[3, 13, 13], a).unwrap();
        let tb = Tensor::from_vec(&[3, 13, 13], b).unwrap();
        assert!((psnr(&ta, &tb).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert!(psnr(&ta, &Tensor::zeros(&[3, 13, 12])).is_err());
    }
}
