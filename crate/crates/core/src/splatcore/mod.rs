//! Gaussian primitives bound to the head mesh.

mod binding;
mod pointcloud;
pub mod quat;

pub use binding::{
    bind_covariance, bind_positions, dynamic_signal, local_to_global, GlobalGaussianAttrs, LocalGaussianAttrs,
};
pub use pointcloud::{FeaturePointCloud, ENCODING_DIM, ENCODING_INIT_STD};

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffengine::gradcheck::check_gradients;
    use crate::diffengine::Tensor;
    use crate::headmodel::{
        pose_mesh, rodrigues, triangle_frames, HeadParams, HeadTemplate, SyntheticTemplateConfig, TriangleFrame,
    };

    fn template() -> HeadTemplate {
        HeadTemplate::synthetic(&SyntheticTemplateConfig::default()).unwrap()
    }

    fn local(mu: [f64; 3], scale: [f64; 3]) -> LocalGaussianAttrs {
        LocalGaussianAttrs {
            mu,
            rot: quat::IDENTITY,
            scale,
            opacity: 0.7,
            h: vec![0.1, 0.2, 0.3],
        }
    }

    #[test]
    fn binding_substitution_example() {
        let frame = TriangleFrame {
            r: Matrix3::identity(),
            s: 2.0,
            t: Vector3::new(1.0, 0.0, 0.0),
        };
        let g = local_to_global(&local([0.5, 0.0, 0.0], [0.1; 3]), &frame);
        assert_eq!(g.mu, [2.0, 0.0, 0.0]);
        assert_eq!(g.scale, [0.2; 3]);
    }

    #[test]
    fn identity_frame_is_passthrough() {
        let frame = TriangleFrame {
            r: Matrix3::identity(),
            s: 1.0,
            t: Vector3::zeros(),
        };
        let mut l = local([0.3, -0.2, 0.1], [0.1, 0.2, 0.3]);
        l.rot = quat::normalize([0.9, 0.1, 0.2, -0.1]);
        let g = local_to_global(&l, &frame);
        assert_eq!(g.mu, l.mu);
        assert_eq!(g.scale, l.scale);
        for k in 0..4 {
            assert!((g.rot[k] - l.rot[k]).abs() < 1e-15);
        }
        assert_eq!(g.h, l.h);
        assert_eq!(g.opacity, l.opacity);
    }

    #[test]
    fn zero_resolution_is_rejected() {
        assert!(FeaturePointCloud::init_uv(&template(), 0, 0).is_err());
    }

    #[test]
    fn doubling_resolution_quadruples_points() {
        let t = template();
        let a = FeaturePointCloud::init_uv(&t, 64, 0).unwrap().len() as f64;
        let b = FeaturePointCloud::init_uv(&t, 128, 0).unwrap().len() as f64;
        assert!((b / a / 4.0 - 1.0).abs() < 0.1, "{a} -> {b}");
    }

    #[test]
    fn point_cloud_is_consistent_and_seeded() {
        let t = template();
        let pc = FeaturePointCloud::init_uv(&t, 64, 11).unwrap();
        pc.validate(&t).unwrap();
        assert!((3000..=5000).contains(&pc.len()), "{}", pc.len());
        let ranges = pc.part_ranges();
        assert_eq!(ranges.iter().map(|r| r.len()).sum::<usize>(), pc.len());
        assert!(ranges.iter().all(|r| !r.is_empty()));
        // Anchors lie in the face plane.
        assert!(pc.anchor_local.iter().all(|a| a[2].abs() < 1e-9));
        assert_eq!(pc, FeaturePointCloud::init_uv(&t, 64, 11).unwrap());
        assert_ne!(pc.encodings, FeaturePointCloud::init_uv(&t, 64, 12).unwrap().encodings);
        let mean = pc.encodings.iter().sum::<f64>() / pc.encodings.len() as f64;
        let var = pc.encodings.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pc.encodings.len() as f64;
        assert!((var.sqrt() - ENCODING_INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn dynamic_signal_examples() {
        let t = template();
        let neutral = triangle_frames(&t.vertices, &t.faces).unwrap();
        for f in neutral.iter().take(50) {
            assert_eq!(dynamic_signal([0.1, 0.2, 0.3], f, f), [0.0; 3]);
        }
        let id = TriangleFrame {
            r: Matrix3::identity(),
            s: 1.0,
            t: Vector3::zeros(),
        };
        let moved = TriangleFrame {
            t: Vector3::new(0.1, -0.2, 0.3),
            ..id
        };
        let e = dynamic_signal([0.4, 0.5, 0.6], &moved, &id);
        for (a, b) in e.iter().zip([0.1, -0.2, 0.3]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn jaw_pose_signal_follows_moved_faces() {
        let t = template();
        let neutral_params = HeadParams::neutral(&t);
        let mut p = neutral_params.clone();
        p.set_joint(&t, "jaw", [0.25, 0.0, 0.0]).unwrap();
        let posed = pose_mesh(&t, &p).unwrap();
        let fp = triangle_frames(&posed, &t.faces).unwrap();
        let fnt = triangle_frames(&t.vertices, &t.faces).unwrap();
        let pc = FeaturePointCloud::init_uv(&t, 64, 0).unwrap();
        let (mut moving, mut still) = (0, 0);
        for (i, &f) in pc.parent_face.iter().enumerate() {
            let e = dynamic_signal(pc.anchor_local[i], &fp[f], &fnt[f]);
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            let face_moved = t.faces[f].iter().any(|&v| posed[v] != t.vertices[v]);
            if face_moved {
                moving += 1;
            } else {
                assert_eq!(norm, 0.0);
                still += 1;
            }
        }
        assert!(moving > 0 && still > 0);
    }

    fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..n {
            let fr = TriangleFrame {
                r: rodrigues([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]),
                s: rng.random_range(0.5..2.0),
                t: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3),
            };
            data.extend(fr.to_row());
        }
        Tensor::from_vec(&[n, 13], data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn binding_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 5;
        let frames = random_frames(&mut rng, n);
        let mu = random(&mut rng, &[n, 3], -1.0, 1.0);
        let q = random(&mut rng, &[n, 4], -1.0, 1.0);
        let s = random(&mut rng, &[n, 3], 0.2, 1.0);
        let w1 = random(&mut rng, &[n, 3], -1.0, 1.0);
        let w2 = random(&mut rng, &[n, 9], -1.0, 1.0);
        let check = check_gradients(&[frames, mu, q, s], 1e-6, |g, v| {
            let p = bind_positions(g, v[0], v[1]).unwrap();
            let qn = g.normalize_rows(v[2]);
            let c = bind_covariance(g, v[0], qn, v[3]).unwrap();
            let (a, b) = (g.constant(w1.clone()), g.constant(w2.clone()));
            let pa = g.mul(p, a);
            let cb = g.mul(c, b);
            let (s1, s2) = (g.sum(pa), g.sum(cb));
            g.add(s1, s2)
        });
        assert!(check.max_rel_error() < 1e-4, "{:?}", check.rel_errors);
    }

    #[test]
    fn dynamic_signal_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 4;
        let fp = random_frames(&mut rng, n);
        let fnt = random_frames(&mut rng, n);
        let mu = random(&mut rng, &[n, 3], -1.0, 1.0);
        let w = random(&mut rng, &[n, 3], -1.0, 1.0);
        let check = check_gradients(&[fp, fnt, mu], 1e-6, |g, v| {
            let a = bind_positions(g, v[0], v[2]).unwrap();
            let b = bind_positions(g, v[1], v[2]).unwrap();
            let e = g.sub(a, b);
            let c = g.constant(w.clone());
            let m = g.mul(e, c);
            g.sum(m)
        });
        assert!(check.max_rel_error() < 1e-4, "{:?}", check.rel_errors);
    }

    fn arb3(s: f64) -> impl Strategy<Value = [f64; 3]> {
        [-s..s, -s..s, -s..s]
    }

    proptest! {
        #[test]
        fn composition_with_rigid_motion(
            aa in arb3(3.0), t in arb3(1.0), s in 0.2f64..3.0, mu in arb3(1.0),
            q in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
            aa2 in arb3(3.0), t2 in arb3(1.0),
        ) {
            let qn: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(qn > 1e-3);
            let frame = TriangleFrame { r: rodrigues(aa), s, t: Vector3::from(t) };
            let mut l = local(mu, [0.1, 0.2, 0.3]);
            l.rot = quat::normalize(q);
            let g1 = local_to_global(&l, &frame);
            let r2 = rodrigues(aa2);
            let composed = TriangleFrame { r: r2 * frame.r, s, t: r2 * frame.t + Vector3::from(t2) };
            let g2 = local_to_global(&l, &composed);
            let moved = r2 * Vector3::from(g1.mu) + Vector3::from(t2);
            prop_assert!((moved - Vector3::from(g2.mu)).norm() < 1e-9);
            let lhs = quat::to_matrix(g2.rot);
            let rhs = r2 * quat::to_matrix(g1.rot);
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
            let n2: f64 = g2.rot.iter().map(|v| v * v).sum();
            prop_assert!((n2 - 1.0).abs() < 1e-6);
            prop_assert_eq!(g1.opacity.to_bits(), l.opacity.to_bits());
            prop_assert_eq!(&g1.h, &l.h);
        }
    }
}
