//! Tile-based differentiable Gaussian splatting.

mod camera;
mod imageio;
mod render;

pub use camera::Camera;
pub use imageio::{
    load_planar_f32, load_png_gray, load_png_rgb, save_planar_f32, save_png_gray, save_png_rgb, PLANAR_MAGIC,
    PLANAR_VERSION,
};
pub use render::{
    project_gaussian, rasterize, rasterize_backward, rasterize_forward, rasterize_naive, rasterize_op, Projection,
    RasterState, RenderOutput, SplatGrads, SplatScene, BLUR, CUTOFF, DEFAULT_TILE, NEAR,
};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::{Matrix3, Matrix4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffengine::gradcheck::check_gradients;
    use crate::diffengine::Tensor;
    use crate::splatcore::quat;

    fn camera(size: usize, f: f64) -> Camera {
        let c = size as f64 / 2.0;
        Camera::new(Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0), Matrix4::identity(), size, size).unwrap()
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, channels: usize) -> SplatScene {
        let mut s = SplatScene {
            channels,
            ..Default::default()
        };
        for _ in 0..n {
            let z = rng.random_range(1.5..4.0);
            s.mu.push([rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z]);
            let q = quat::normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let sc = std::array::from_fn(|_| rng.random_range(0.03..0.25));
            s.cov.push(quat::covariance(q, sc));
            s.colors.extend((0..channels).map(|_| rng.random_range(0.0..1.0)));
            s.opacity.push(rng.random_range(0.05..1.0));
        }
        s
    }

    fn single(mu: [f64; 3], sigma: f64, opacity: f64, color: &[f64]) -> SplatScene {
        let v = sigma * sigma;
        SplatScene {
            mu: vec![mu],
            cov: vec![[v, 0.0, 0.0, 0.0, v, 0.0, 0.0, 0.0, v]],
            colors: color.to_vec(),
            channels: color.len(),
            opacity: vec![opacity],
        }
    }

    #[test]
    fn pinhole_projection() {
        let cam = Camera::new(
            Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0),
            Matrix4::identity(),
            64,
            64,
        )
        .unwrap();
        let p = project_gaussian([0.0, 0.0, 2.0], &[0.01, 0.0, 0.0, 0.0, 0.01, 0.0, 0.0, 0.0, 0.01], &cam).unwrap();
        assert_eq!(p.mean2d, [32.0, 32.0]);
        assert!(project_gaussian([0.0, 0.0, -1.0], &[0.01; 9], &cam).is_none());
        assert!(project_gaussian([0.0, 0.0, 0.0], &[0.01; 9], &cam).is_none());
    }

    #[test]
    fn isotropic_footprint_matches_closed_form() {
        let cam = camera(64, 100.0);
        let (sigma, d) = (0.05, 2.0);
        let v = sigma * sigma;
        let p = project_gaussian([0.0, 0.0, d], &[v, 0.0, 0.0, 0.0, v, 0.0, 0.0, 0.0, v], &cam).unwrap();
        let expect = (100.0 * sigma / d).powi(2);
        assert!((p.cov2d[(0, 0)] - BLUR - expect).abs() < 1e-12);
        assert!((p.cov2d[(1, 1)] - BLUR - expect).abs() < 1e-12);
        assert!(p.cov2d[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn single_opaque_gaussian_peaks_at_its_pixel() {
        let cam = camera(32, 60.0);
        // Pixel (20, 9) has its center at (20.5, 9.5).
        let z = 2.0;
        let mu = [(20.5 - 16.0) * z / 60.0, (9.5 - 16.0) * z / 60.0, z];
        let out = rasterize(&single(mu, 0.05, 1.0, &[1.0, 0.0, 0.0]), &cam, DEFAULT_TILE).unwrap();
        let alpha = out.alpha();
        let (argmax, _) = alpha
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        assert_eq!(argmax, 9 * 32 + 20);
        assert!((alpha.data()[argmax] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opaque_front_gaussian_occludes() {
        let cam = camera(32, 60.0);
        // Front primitive centered exactly on the center of pixel (16, 16).
        let z = 2.0;
        let mut s = single([0.5 * z / 60.0, 0.5 * z / 60.0, z], 0.1, 1.0, &[0.2, 0.4, 0.6]);
        let back = single([0.0, 0.0, 3.0], 0.15, 1.0, &[0.9, 0.1, 0.1]);
        s.mu.extend(&back.mu);
        s.cov.extend(&back.cov);
        s.colors.extend(&back.colors);
        s.opacity.extend(&back.opacity);
        let out = rasterize(&s, &cam, DEFAULT_TILE).unwrap();
        let pix = 16 * 32 + 16;
        for (c, v) in [0.2, 0.4, 0.6].iter().enumerate() {
            assert!((out.rgb().data()[c * 32 * 32 + pix] - v).abs() < 1e-12);
        }
        assert_eq!(out.alpha().data()[pix], 1.0);
    }

    #[test]
    fn empty_scene_renders_black() {
        let cam = camera(16, 20.0);
        let out = rasterize(&SplatScene { channels: 34, ..Default::default() }, &cam, DEFAULT_TILE).unwrap();
        assert_eq!(out.image.shape(), &[35, 16, 16]);
        assert!(out.image.data().iter().all(|&v| v == 0.0));
        let zero = rasterize_naive(&single([0.0, 0.0, 2.0], 0.1, 0.0, &[1.0, 1.0, 1.0]), &cam).unwrap();
        assert!(zero.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiled_matches_naive_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = camera(64, 70.0);
        for _ in 0..5 {
            let n = rng.random_range(1..=50);
            let s = random_scene(&mut rng, n, 5);
            let a = rasterize(&s, &cam, DEFAULT_TILE).unwrap();
            let b = rasterize_naive(&s, &cam).unwrap();
            assert!(a.image.max_abs_diff(&b.image) <= 1e-12);
        }
    }

    #[test]
    fn equal_depth_order_is_stable_and_array_order_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = camera(32, 40.0);
        let s = random_scene(&mut rng, 12, 3);
        let perm: Vec<usize> = (0..12).rev().collect();
        let mut p = SplatScene {
            channels: 3,
            ..Default::default()
        };
        for &i in &perm {
            p.mu.push(s.mu[i]);
            p.cov.push(s.cov[i]);
            p.colors.extend_from_slice(&s.colors[3 * i..3 * i + 3]);
            p.opacity.push(s.opacity[i]);
        }
        let a = rasterize(&s, &cam, 8).unwrap();
        let b = rasterize(&p, &cam, 8).unwrap();
        assert!(a.image.max_abs_diff(&b.image) < 1e-12);

        // Identical depths: the lower index is composited first.
        let mut tie = single([0.0, 0.0, 2.0], 0.1, 0.5, &[1.0, 0.0, 0.0]);
        tie.mu.push([0.0, 0.0, 2.0]);
        tie.cov.push(tie.cov[0]);
        tie.colors.extend([0.0, 1.0, 0.0]);
        tie.opacity.push(0.5);
        let r1 = rasterize(&tie, &cam, 8).unwrap();
        let r2 = rasterize(&tie, &cam, 16).unwrap();
        assert_eq!(r1, r2);
        let red = r1.rgb().data()[16 * 32 + 16];
        let green = r1.rgb().data()[32 * 32 + 16 * 32 + 16];
        assert!(red > green);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = camera(16, 20.0);
        let s = Arc::new(random_scene(&mut rng, 10, 4));
        let (out, state) = rasterize_forward(s, &cam, DEFAULT_TILE).unwrap();
        let g = rasterize_backward(&Tensor::zeros(out.image.shape()), Some(&state)).unwrap();
        assert!(g.mu.iter().flatten().chain(g.cov.iter().flatten()).all(|&v| v == 0.0));
        assert!(g.colors.iter().chain(&g.opacity).all(|&v| v == 0.0));
        assert!(matches!(
            rasterize_backward(&out.image, None),
            Err(crate::Error::MissingSavedState)
        ));
    }

    #[test]
    fn single_gaussian_color_gradient_is_pixel_weight() {
        let cam = camera(16, 30.0);
        let s = Arc::new(single([0.02, -0.01, 2.0], 0.08, 0.7, &[0.3, 0.5, 0.9]));
        let (out, state) = rasterize_forward(s, &cam, DEFAULT_TILE).unwrap();
        let mut up = Tensor::zeros(out.image.shape());
        let pix = 8 * 16 + 8;
        up.data_mut()[pix] = 1.0; // red channel of the center pixel
        let g = rasterize_backward(&up, Some(&state)).unwrap();
        // With one primitive the composited weight equals the accumulated alpha.
        let weight = out.alpha().data()[pix];
        assert!(weight > 0.0);
        assert!((g.colors[0] - weight).abs() < 1e-15);
        assert_eq!(g.colors[1], 0.0);
    }

    #[test]
    fn rasterizer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = camera(16, 22.0);
        for _ in 0..3 {
            let n = rng.random_range(2..=20);
            let s = random_scene(&mut rng, n, 4);
            let t = |v: Vec<f64>, w: usize| Tensor::from_vec(&[n, w], v).unwrap();
            let inputs = [
                t(s.mu.iter().flatten().copied().collect(), 3),
                t(s.cov.iter().flatten().copied().collect(), 9),
                t(s.colors.clone(), 4),
                t(s.opacity.clone(), 1),
            ];
            let weights =
                Tensor::from_vec(&[5, 16, 16], (0..5 * 256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let check = check_gradients(&inputs, 1e-6, |g, v| {
                let img = rasterize_op(g, v[0], v[1], v[2], v[3], &cam).unwrap();
                let w = g.constant(weights.clone());
                let m = g.mul(img, w);
                g.sum(m)
            });
            assert!(check.max_rel_error() < 1e-4, "{:?}", check.rel_errors);
        }
    }

    #[test]
    fn planar_dump_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::from_vec(&[3, 5, 7], (0..105).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let p = dir.path().join("x.f32");
        save_planar_f32(&p, &t).unwrap();
        let back = load_planar_f32(&p).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-7);
        let png = dir.path().join("x.png");
        save_png_rgb(&png, &t).unwrap();
        assert!(load_png_rgb(&png).unwrap().max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn adding_a_gaussian_never_lowers_alpha(seed in any::<u64>(), n in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = camera(24, 30.0);
            let s = random_scene(&mut rng, n + 1, 2);
            let mut fewer = s.clone();
            fewer.mu.pop();
            fewer.cov.pop();
            fewer.colors.truncate(2 * n);
            fewer.opacity.pop();
            let a = rasterize(&fewer, &cam, DEFAULT_TILE).unwrap().alpha();
            let b = rasterize(&s, &cam, DEFAULT_TILE).unwrap().alpha();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(*y >= *x - 1e-15);
                prop_assert!(*y <= 1.0 + 1e-12 && *y >= 0.0);
            }
        }
    }
}
