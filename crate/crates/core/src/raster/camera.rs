use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera in the OpenCV convention: x right, y down, z forward.
/// Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Intrinsics, row-major.
    pub k: [[f64; 3]; 3],
    /// World-to-camera rigid transform, row-major.
    pub extrinsics: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(k: Matrix3<f64>, extrinsics: Matrix4<f64>, width: usize, height: usize) -> Result<Camera> {
        let cam = Camera {
            k: std::array::from_fn(|i| std::array::from_fn(|j| k[(i, j)])),
            extrinsics: std::array::from_fn(|i| std::array::from_fn(|j| extrinsics[(i, j)])),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Camera> {
        let eye = Vector3::from(eye);
        let z = (Vector3::from(target) - eye).normalize();
        let x = z.cross(&Vector3::from(up));
        if x.norm() < 1e-9 || !z.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("look_at direction is parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -r * eye;
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let k = Matrix3::new(focal, 0.0, width as f64 / 2.0, 0.0, focal, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Camera::new(k, e, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.intrinsics();
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidArgument("intrinsics must be upper triangular with positive focal lengths".into()));
        }
        if k[(0, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidArgument("intrinsics with skew are not supported".into()));
        }
        let r = self.rotation();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("extrinsics must be a rigid transform".into()));
        }
        let e = &self.extrinsics;
        if e[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument("extrinsics bottom row must be (0, 0, 0, 1)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera image size must be positive".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.k[i][j])
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.extrinsics[i][j])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> [f64; 2] {
        [
            self.k[0][0] * t.x / t.z + self.k[0][2],
            self.k[1][1] * t.y / t.z + self.k[1][2],
        ]
    }

    /// Same camera rendering at a different resolution, intrinsics scaled.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let mut c = self.clone();
        let (sx, sy) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        c.k[0][0] *= sx;
        c.k[0][2] *= sx;
        c.k[1][1] *= sy;
        c.k[1][2] *= sy;
        c.width = width;
        c.height = height;
        c
    }
}
