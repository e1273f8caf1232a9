//! Pinhole cameras with world-to-camera extrinsics.
//!
//! Camera frame: x right, y down, z forward. Continuous pixel coordinates put
//! pixel `(u, v)` over `[u, u+1) × [v, v+1)`, so its center is `(u+0.5, v+0.5)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    NonPositiveFocal { fx: f64, fy: f64 },
    #[error("rotation is not orthonormal with det +1 (max deviation {deviation:.3e})")]
    NotRotation { deviation: f64 },
    #[error("camera eye coincides with look-at point or view direction is parallel to up")]
    Degenerate,
    #[error("camera parameters must be finite")]
    NonFinite,
}

/// Intrinsics plus a world-to-camera rigid transform: `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Mat3,
    translation: Vec3,
}

/// Wire shape of `camera.json`: rotation as 9 row-major numbers.
#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<CameraJson> for CameraModel {
    type Error = CameraError;
    fn try_from(j: CameraJson) -> Result<Self, Self::Error> {
        let r = j.rotation;
        CameraModel::new(
            j.fx,
            j.fy,
            j.cx,
            j.cy,
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            j.translation,
        )
    }
}

impl From<CameraModel> for CameraJson {
    fn from(c: CameraModel) -> Self {
        let r = c.rotation;
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: c.translation,
        }
    }
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self, CameraError> {
        let all = [fx, fy, cx, cy]
            .into_iter()
            .chain(rotation.iter().flatten().copied())
            .chain(translation);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(CameraError::NonFinite);
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CameraError::NonPositiveFocal { fx, fy });
        }
        let deviation = rotation_deviation(&rotation);
        if deviation > ROTATION_TOL {
            return Err(CameraError::NotRotation { deviation });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target` with world `up` projected to image "up".
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
    ) -> Result<Self, CameraError> {
        let forward = sub(target, eye);
        if norm(forward) < 1e-12 {
            return Err(CameraError::Degenerate);
        }
        let z = normalize(forward);
        let x = cross(z, up);
        if norm(x) < 1e-9 {
            return Err(CameraError::Degenerate);
        }
        let x = normalize(x);
        // y points down in the image
        let y = cross(z, x);
        let rotation = [x, y, z];
        let translation = scale(mat_vec(&rotation, eye), -1.0);
        Self::new(fx, fy, cx, cy, rotation, translation)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }
    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        scale(mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(p, self.translation))
    }

    /// Projects a world point to continuous pixel coordinates plus camera depth.
    /// `None` for points on or behind the image plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 1e-12 {
            return None;
        }
        Some((
            self.fx * c[0] / c[2] + self.cx,
            self.fy * c[1] / c[2] + self.cy,
            c[2],
        ))
    }

    /// Lifts continuous pixel `(u, v)` at camera depth `z` to world coordinates.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let c = [(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z];
        self.camera_to_world(c)
    }

    /// Unit world-space direction of the ray through continuous pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        normalize(mat_t_vec(&self.rotation, d))
    }
}

fn rotation_deviation(r: &Mat3) -> f64 {
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - target).abs());
        }
    }
    let det = dot(r[0], cross(r[1], r[2]));
    dev.max((det - 1.0).abs())
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}
