//! Pinhole cameras and rigid poses.
//!
//! Camera frame: x right, y down, z forward. Pixel `(u, v)` has its center at
//! continuous image coordinate `(u, v)`, so projection rounds to the nearest
//! integer pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Symmetric intrinsics for a `width × height` image with horizontal field of view `fov_deg`.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
        }
    }

    /// Camera-frame point at z-depth `depth` seen through image coordinate `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth]
    }

    /// Continuous image coordinate of a camera-frame point, if in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
        }
    }
}

/// Rigid camera-to-world transform: `world = R · cam + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let pose = Self { rotation, translation };
        if !pose.is_rigid(1e-6) {
            return Err(Error::Invalid("pose rotation is not orthonormal".into()));
        }
        Ok(pose)
    }

    /// Camera at `eye` looking at `target`, with world +z as up.
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<Self> {
        let f = normalize(sub(target, eye)).ok_or_else(|| Error::Invalid("look_at eye equals target".into()))?;
        let r = normalize(cross(f, [0.0, 0.0, 1.0])).ok_or_else(|| Error::Invalid("look_at direction is vertical".into()))?;
        let d = cross(f, r);
        let rotation = [[r[0], d[0], f[0]], [r[1], d[1], f[1]], [r[2], d[2], f[2]]];
        Pose::new(rotation, eye)
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() < tol
    }

    pub fn cam_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let q = sub(p, self.translation);
        std::array::from_fn(|i| r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2])
    }

    /// Rotates a camera-frame direction into the world frame.
    pub fn rotate(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        let rotation = std::array::from_fn(|i| [m[i][0], m[i][1], m[i][2]]);
        Pose::new(rotation, [m[0][3], m[1][3], m[2][3]])
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    (n > 1e-12).then(|| a.map(|x| x / n))
}
