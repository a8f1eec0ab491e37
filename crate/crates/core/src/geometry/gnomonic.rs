//! Gnomonic (tangent-plane) projection between the sphere and a square patch.
//!
//! Patch coordinates are continuous pixel units: `(0, 0)` is the top-left
//! corner of the patch, `(P, P)` the bottom-right corner, and pixel `(i, j)`
//! has its center at `(i + 0.5, j + 0.5)`. The patch spans `±tan(fov/2)` on
//! the tangent plane, so the tangent point lands on `(P/2, P/2)`.

use super::sphere::{dot, SphPoint, Vec3};

/// Orthonormal frame at a tangent point: (forward, east, north).
#[derive(Clone, Copy, Debug)]
pub struct TangentFrame {
    pub forward: Vec3,
    pub east: Vec3,
    pub north: Vec3,
}

impl TangentFrame {
    pub fn at(center: SphPoint) -> Self {
        let (sl, cl) = center.lat.sin_cos();
        let (so, co) = center.lon.sin_cos();
        Self {
            forward: [cl * co, cl * so, sl],
            east: [-so, co, 0.0],
            north: [-sl * co, -sl * so, cl],
        }
    }
}

/// Continuous patch coordinate of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneCoord {
    pub u: f64,
    pub v: f64,
}

impl PlaneCoord {
    /// Whether the coordinate falls inside the `patch x patch` square.
    pub fn in_patch(&self, patch: usize) -> bool {
        let p = patch as f64;
        (0.0..p).contains(&self.u) && (0.0..p).contains(&self.v)
    }
}

/// Projects `p` onto the plane tangent at `center`. Returns `None` when `p`
/// lies on or behind the plane's hemisphere boundary (angular distance ≥ π/2).
pub fn gnomonic_forward(center: SphPoint, p: SphPoint, fov: f64, patch: usize) -> Option<PlaneCoord> {
    forward_in_frame(&TangentFrame::at(center), p.to_vec3(), fov, patch)
}

pub(crate) fn forward_in_frame(frame: &TangentFrame, p: Vec3, fov: f64, patch: usize) -> Option<PlaneCoord> {
    let d = dot(frame.forward, p);
    if d <= 0.0 {
        return None;
    }
    let half = patch as f64 / 2.0;
    let t = (fov / 2.0).tan();
    let x = dot(frame.east, p) / d;
    let y = dot(frame.north, p) / d;
    Some(PlaneCoord {
        u: half * (1.0 + x / t),
        v: half * (1.0 - y / t),
    })
}

/// Sphere direction seen at patch coordinate `(u, v)`.
pub fn gnomonic_inverse(center: SphPoint, u: f64, v: f64, fov: f64, patch: usize) -> SphPoint {
    SphPoint::from_vec3(inverse_in_frame(&TangentFrame::at(center), u, v, fov, patch))
}

pub(crate) fn inverse_in_frame(frame: &TangentFrame, u: f64, v: f64, fov: f64, patch: usize) -> Vec3 {
    let half = patch as f64 / 2.0;
    let t = (fov / 2.0).tan();
    let x = (u / half - 1.0) * t;
    let y = (1.0 - v / half) * t;
    let r = [0, 1, 2].map(|i| frame.forward[i] + x * frame.east[i] + y * frame.north[i]);
    let n = dot(r, r).sqrt();
    r.map(|c| c / n)
}
