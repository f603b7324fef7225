//! Pinhole camera, z-depth maps and back-projection.
//!
//! Conventions: camera frame is x right, y down, z forward. Continuous pixel coordinates
//! place the center of pixel `(i, j)` at `(i + 0.5, j + 0.5)`. Depth is z-depth along the
//! forward axis, not ray length. Poses are world-from-camera acting on column vectors.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// On-disk camera layout: rotation is 9 floats row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        Camera::new(
            [j.fx, j.fy, j.cx, j.cy],
            j.width,
            j.height,
            Matrix3::from_row_slice(&j.rotation),
            Vector3::from(j.translation),
        )
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl Camera {
    /// `intrinsics` is `[fx, fy, cx, cy]`.
    pub fn new(
        intrinsics: [f64; 4],
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image size must be at least 1x1".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("rotation must be orthonormal with determinant +1".into()));
        }
        if !translation.iter().chain(&[cx, cy]).all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite camera parameter".into()));
        }
        Ok(Self { fx, fy, cx, cy, width, height, rotation, translation })
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world's up direction.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_x_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-9 {
            return Err(Error::Config("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Camera::new(
            [fx, fx, 0.5 * width as f64, 0.5 * height as f64],
            width,
            height,
            rotation,
            eye,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> [f64; 3] {
        self.translation.into()
    }

    /// World point of the continuous pixel `(u, v)` at z-depth `depth`.
    pub fn back_project(&self, pixel: [f64; 2], depth: f64) -> Result<[f64; 3]> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("back-projection needs positive depth, got {depth}")));
        }
        let [u, v] = pixel;
        if !(0.0..=self.width as f64).contains(&u) || !(0.0..=self.height as f64).contains(&v) {
            return Err(Error::Domain(format!("pixel ({u}, {v}) outside the image")));
        }
        Ok(self.back_project_unchecked(pixel, depth))
    }

    #[inline]
    pub(crate) fn back_project_unchecked(&self, pixel: [f64; 2], depth: f64) -> [f64; 3] {
        let p_cam = Vector3::new(
            depth * (pixel[0] - self.cx) / self.fx,
            depth * (pixel[1] - self.cy) / self.fy,
            depth,
        );
        (self.rotation * p_cam + self.translation).into()
    }

    /// Pixel coordinates and z-depth of a world point.
    pub fn project(&self, point: [f64; 3]) -> Result<([f64; 2], f64)> {
        let p_cam = self.rotation.transpose() * (Vector3::from(point) - self.translation);
        if !(p_cam.z > 0.0) {
            return Err(Error::Domain(format!("point is behind the camera (z = {})", p_cam.z)));
        }
        let u = self.fx * p_cam.x / p_cam.z + self.cx;
        let v = self.fy * p_cam.y / p_cam.z + self.cy;
        Ok(([u, v], p_cam.z))
    }

    /// World-space unit direction of the ray through continuous pixel `(u, v)`, and the
    /// z-component of that direction in the camera frame (z-depth per unit ray length).
    pub fn ray(&self, pixel: [f64; 2]) -> ([f64; 3], f64) {
        let d_cam = Vector3::new((pixel[0] - self.cx) / self.fx, (pixel[1] - self.cy) / self.fy, 1.0);
        let n = d_cam.norm();
        let d_world = self.rotation * (d_cam / n);
        (d_world.into(), 1.0 / n)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        fs::write(path.as_ref(), s).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let s = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Per-pixel z-depth with a validity mask. Invalid pixels store `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height], valid: vec![false; width * height] }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        let mut d = Self::invalid(width, height);
        for i in 0..width * height {
            d.set(i % width, i / width, Some(depth));
        }
        d
    }

    /// Builds a depth map from raw values; non-finite or non-positive values are invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} depth map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let valid: Vec<bool> = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        let values = values.iter().zip(&valid).map(|(v, ok)| if *ok { *v } else { 0.0 }).collect();
        Ok(Self { width, height, values, valid })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn set(&mut self, x: usize, y: usize, depth: Option<f64>) {
        let i = y * self.width + x;
        match depth {
            Some(d) if d > 0.0 && d.is_finite() => {
                self.values[i] = d;
                self.valid[i] = true;
            }
            _ => {
                self.values[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Min and max over valid pixels.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .fold(None, |acc, (v, _)| match acc {
                None => Some((*v, *v)),
                Some((lo, hi)) => Some((lo.min(*v), hi.max(*v))),
            })
    }

    pub fn quantized_f32(&self) -> DepthMap {
        let values = self.values.iter().map(|&v| v as f32 as f64).collect();
        DepthMap::from_values(self.width, self.height, values).expect("same size")
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::image::write_pfm(path.as_ref(), self.width, self.height, 1, &self.values)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, ch, data) = crate::image::read_pfm(path.as_ref())?;
        if ch != 1 {
            return Err(Error::Format { path: path.as_ref().into(), msg: "expected a grayscale (Pf) map".into() });
        }
        DepthMap::from_values(w, h, data)
    }
}
