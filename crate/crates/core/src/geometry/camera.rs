use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera described by one combined 4×4 matrix `K` that takes a road
/// point `(x, y, z, 1)` to `(u·d, v·d, d, 1)`, where `(u, v)` is the pixel
/// (column, row) and `d` the depth along the optical axis.
///
/// Road frame: x right, y forward, z up. The last row of `K` is `(0,0,0,1)`
/// for every camera built by [`CameraModel::from_pose`]; arbitrary invertible
/// matrices are accepted by [`CameraModel::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct CameraModel {
    k: Matrix4<f64>,
    k_inv: Matrix4<f64>,
    image_size: (usize, usize),
    camera_height: f64,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    #[serde(rename = "K")]
    k: Vec<f64>,
    image_size: [usize; 2],
    camera_height: f64,
}

impl TryFrom<CameraJson> for CameraModel {
    type Error = Error;
    fn try_from(j: CameraJson) -> Result<Self> {
        if j.k.len() != 16 {
            return Err(Error::Parse {
                field: "K".into(),
                message: format!("expected 16 numbers, got {}", j.k.len()),
            });
        }
        CameraModel::new(
            Matrix4::from_row_slice(&j.k),
            (j.image_size[0], j.image_size[1]),
            j.camera_height,
        )
    }
}

impl From<CameraModel> for CameraJson {
    fn from(c: CameraModel) -> Self {
        let k = (0..4).flat_map(|r| (0..4).map(move |col| c.k[(r, col)])).collect();
        CameraJson { k, image_size: [c.image_size.0, c.image_size.1], camera_height: c.camera_height }
    }
}

impl CameraModel {
    pub fn new(k: Matrix4<f64>, image_size: (usize, usize), camera_height: f64) -> Result<Self> {
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::Geometry("image size must be positive".into()));
        }
        let det = k.determinant();
        let k_inv = k
            .try_inverse()
            .filter(|inv| det != 0.0 && det.is_finite() && inv.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Geometry("projection matrix is singular".into()))?;
        Ok(Self { k, k_inv, image_size, camera_height })
    }

    /// Camera at `(0, 0, height)` looking along +y, tilted down by `pitch`
    /// radians, with focal lengths and principal point in pixels.
    pub fn from_pose(
        height: f64,
        pitch: f64,
        focal: (f64, f64),
        principal: (f64, f64),
        image_size: (usize, usize),
    ) -> Result<Self> {
        let (s, c) = pitch.sin_cos();
        // rows: camera right, camera down, optical axis
        let extrinsic = Matrix4::new(
            1.0, 0.0, 0.0, 0.0, //
            0.0, -s, -c, c * height, //
            0.0, c, -s, s * height, //
            0.0, 0.0, 0.0, 1.0,
        );
        let intrinsic = Matrix4::new(
            focal.0, 0.0, principal.0, 0.0, //
            0.0, focal.1, principal.1, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        Self::new(intrinsic * extrinsic, image_size, height)
    }

    /// Forward-looking camera used by the synthetic harness: 2.5 m above the
    /// road, pitched 0.3 rad down, vertical half field of view 0.45 rad,
    /// square pixels, principal point at the image center.
    pub fn synthetic(image_size: (usize, usize)) -> Result<Self> {
        let (h, w) = image_size;
        let f = (h as f64 / 2.0) / 0.45f64.tan();
        Self::from_pose(
            2.5,
            0.3,
            (f, f),
            ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            image_size,
        )
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.k
    }

    pub fn inverse(&self) -> &Matrix4<f64> {
        &self.k_inv
    }

    /// `(H0, W0)` in pixels.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn camera_height(&self) -> f64 {
        self.camera_height
    }

    /// Pixel `(u, v)` and depth of a road point; `None` when the point is
    /// not in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let h = self.k * Vector4::new(p[0], p[1], p[2], 1.0);
        let w = h[3];
        let d = h[2] / w;
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        Some([h[0] / w / d, h[1] / w / d, d])
    }

    /// Road point seen at pixel `(u, v)` with depth `d`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        let p = self.k_inv * Vector4::new(u * d, v * d, d, 1.0);
        [p[0] / p[3], p[1] / p[3], p[2] / p[3]]
    }

    /// Intersection of the pixel ray with the z = 0 plane. `None` when the
    /// ray is parallel to the plane or meets it behind the camera.
    pub fn ground_point(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        // p(d) = d·K⁻¹(u, v, 1, 0) + K⁻¹(0, 0, 0, 1)
        let dir = self.k_inv * Vector4::new(u, v, 1.0, 0.0);
        let base = self.k_inv.column(3).into_owned();
        // homogeneous z / w = 0  →  d·dir_z + base_z = 0 (with w affine in d)
        if dir[2].abs() < 1e-12 {
            return None;
        }
        let d = -base[2] / dir[2];
        if !(d > 0.0) {
            return None;
        }
        let p = dir * d + base;
        if p[3].abs() < 1e-12 {
            return None;
        }
        Some([p[0] / p[3], p[1] / p[3], 0.0])
    }

    /// Same camera re-expressed for an image of a different resolution.
    pub fn rescaled(&self, image_size: (usize, usize)) -> Result<Self> {
        let sy = image_size.0 as f64 / self.image_size.0 as f64;
        let sx = image_size.1 as f64 / self.image_size.1 as f64;
        let scale = Matrix4::from_diagonal(&Vector4::new(sx, sy, 1.0, 1.0));
        Self::new(scale * self.k, image_size, self.camera_height)
    }
}
