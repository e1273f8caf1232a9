//! Closed-form ray intersection and signed distance for the parametric primitives.
//! All primitives are centered at the origin with z as the vertical axis.

use serde::{Deserialize, Serialize};

use crate::camera::{add, dot, norm, normalize, scale, Vec3};

pub(crate) const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Capped cylinder along z spanning `[-height/2, height/2]`.
    Cylinder { radius: f64, height: f64 },
    Box { half_extents: [f64; 3] },
}

impl Shape {
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, height } => (radius * radius + height * height / 4.0).sqrt(),
            Shape::Box { half_extents } => norm(half_extents),
        }
    }

    pub fn is_valid(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            Shape::Sphere { radius } => pos(radius),
            Shape::Cylinder { radius, height } => pos(radius) && pos(height),
            Shape::Box { half_extents } => half_extents.iter().all(|&h| pos(h)),
        }
    }

    /// Smallest ray parameter `t > t_min` at which the ray enters or crosses
    /// the surface.
    pub fn intersect(&self, origin: Vec3, dir: Vec3, t_min: f64) -> Option<f64> {
        let best = |ts: &[f64]| {
            ts.iter()
                .copied()
                .filter(|&t| t.is_finite() && t > t_min)
                .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
        };
        match *self {
            Shape::Sphere { radius } => {
                let b = dot(origin, dir);
                let c = dot(origin, origin) - radius * radius;
                let a = dot(dir, dir);
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                best(&[(-b - s) / a, (-b + s) / a])
            }
            Shape::Cylinder { radius, height } => {
                let half = height / 2.0;
                let mut ts = Vec::with_capacity(4);
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a > 1e-15 {
                    let b = origin[0] * dir[0] + origin[1] * dir[1];
                    let c = origin[0] * origin[0] + origin[1] * origin[1] - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let z = origin[2] + t * dir[2];
                            if z.abs() <= half {
                                ts.push(t);
                            }
                        }
                    }
                }
                if dir[2].abs() > 1e-15 {
                    for zc in [-half, half] {
                        let t = (zc - origin[2]) / dir[2];
                        let x = origin[0] + t * dir[0];
                        let y = origin[1] + t * dir[1];
                        if x * x + y * y <= radius * radius {
                            ts.push(t);
                        }
                    }
                }
                best(&ts)
            }
            Shape::Box { half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k].abs() > half_extents[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half_extents[k] - origin[k]) / dir[k];
                    let t2 = (half_extents[k] - origin[k]) / dir[k];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                if t_near > t_far {
                    return None;
                }
                best(&[t_near, t_far])
            }
        }
    }

    /// Exact signed distance (negative inside).
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => norm(p) - radius,
            Shape::Cylinder { radius, height } => {
                let dx = (p[0] * p[0] + p[1] * p[1]).sqrt() - radius;
                let dz = p[2].abs() - height / 2.0;
                dx.max(dz).min(0.0) + (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
            }
            Shape::Box { half_extents } => {
                let q = [
                    p[0].abs() - half_extents[0],
                    p[1].abs() - half_extents[1],
                    p[2].abs() - half_extents[2],
                ];
                let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    /// Outward unit normal at a surface point.
    pub fn normal(&self, p: Vec3) -> Vec3 {
        match *self {
            Shape::Sphere { .. } => normalize(p),
            Shape::Cylinder { radius, height } => {
                let radial = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let cap_gap = (p[2].abs() - height / 2.0).abs();
                let side_gap = (radial - radius).abs();
                if cap_gap < side_gap {
                    [0.0, 0.0, p[2].signum()]
                } else {
                    normalize([p[0], p[1], 0.0])
                }
            }
            Shape::Box { half_extents } => {
                let mut axis = 0;
                let mut best = f64::NEG_INFINITY;
                for k in 0..3 {
                    let r = p[k].abs() / half_extents[k];
                    if r > best {
                        best = r;
                        axis = k;
                    }
                }
                let mut n = [0.0; 3];
                n[axis] = p[axis].signum();
                n
            }
        }
    }

    /// Outer surface point in the direction given by azimuth/elevation (degrees)
    /// as seen from the origin.
    pub fn surface_point(&self, azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
        let far = 2.0 * self.bounding_radius() + 1.0;
        let origin = scale(dir, far);
        let inward = scale(dir, -1.0);
        let t = self
            .intersect(origin, inward, 0.0)
            .expect("a ray toward the center always hits a solid primitive");
        add(origin, scale(inward, t))
    }
}
