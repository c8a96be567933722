//! Pinhole cameras. Camera frame: x right, y down, z forward. Pixel centers
//! sit at half-integer coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

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
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn pinhole(width: usize, height: usize, focal: f64) -> Self {
        Intrinsics {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::invalid(format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Unnormalized camera-frame direction through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        (p[2] > 1e-9).then(|| [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    pub fn contains(&self, px: [f64; 2]) -> bool {
        px[0] >= 0.0 && px[1] >= 0.0 && px[0] < self.width as f64 && px[1] < self.height as f64
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Camera x, y, z axes expressed in world coordinates.
    pub axes: [Vec3; 3],
    pub position: Vec3,
}

impl Pose {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = sub(target, eye);
        if norm(forward) < 1e-12 {
            return Err(Error::invalid("look-at target coincides with eye"));
        }
        let z = normalize(forward);
        let x = cross(z, up);
        if norm(x) < 1e-12 {
            return Err(Error::invalid("look-at up vector parallel to view direction"));
        }
        let x = normalize(x);
        let y = cross(z, x);
        Ok(Pose {
            axes: [x, y, z],
            position: eye,
        })
    }

    pub fn to_world(&self, v: Vec3) -> Vec3 {
        let [x, y, z] = self.axes;
        [
            x[0] * v[0] + y[0] * v[1] + z[0] * v[2],
            x[1] * v[0] + y[1] * v[1] + z[1] * v[2],
            x[2] * v[0] + y[2] * v[1] + z[2] * v[2],
        ]
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let q = sub(p, self.position);
        [dot(self.axes[0], q), dot(self.axes[1], q), dot(self.axes[2], q)]
    }

    /// Unit world-space direction through pixel `(u, v)`.
    pub fn ray_direction(&self, k: &Intrinsics, u: f64, v: f64) -> Vec3 {
        normalize(self.to_world(k.unproject(u, v)))
    }

    pub fn project(&self, k: &Intrinsics, p: Vec3) -> Option<[f64; 2]> {
        k.project(self.to_camera(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        self.pose.ray_direction(&self.intrinsics, u, v)
    }

    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        self.pose.project(&self.intrinsics, p)
    }
}
