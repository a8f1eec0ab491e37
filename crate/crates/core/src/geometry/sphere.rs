use std::f64::consts::{FRAC_PI_2, PI};

use super::GeometryError;

pub type Vec3 = [f64; 3];

/// A direction on the unit sphere. `lat` in [−π/2, π/2], `lon` in [−π, π).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphPoint {
    pub lat: f64,
    pub lon: f64,
}

impl SphPoint {
    /// Validates latitude and wraps longitude into [−π, π).
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeometryError> {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > FRAC_PI_2 + 1e-12 {
            return Err(GeometryError::InvalidPoint { lat, lon });
        }
        Ok(Self {
            lat: lat.clamp(-FRAC_PI_2, FRAC_PI_2),
            lon: wrap_lon(lon),
        })
    }

    pub fn from_degrees(lat: f64, lon: f64) -> Result<Self, GeometryError> {
        Self::new(lat.to_radians(), lon.to_radians())
    }

    pub fn to_vec3(self) -> Vec3 {
        let (sl, cl) = self.lat.sin_cos();
        let (so, co) = self.lon.sin_cos();
        [cl * co, cl * so, sl]
    }

    /// Inverse of [`SphPoint::to_vec3`]; the input need not be normalized.
    pub fn from_vec3(v: Vec3) -> Self {
        let lat = v[2].atan2(v[0].hypot(v[1]));
        Self {
            lat,
            lon: wrap_lon(v[1].atan2(v[0])),
        }
    }

    pub fn antipode(self) -> Self {
        Self {
            lat: -self.lat,
            lon: wrap_lon(self.lon + PI),
        }
    }
}

pub fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Great-circle angular distance in radians.
pub fn haversine(a: SphPoint, b: SphPoint) -> f64 {
    let dlat = b.lat - a.lat;
    let dlon = b.lon - a.lon;
    let h = (dlat / 2.0).sin().powi(2) + a.lat.cos() * b.lat.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * h.clamp(0.0, 1.0).sqrt().asin()
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Spherical linear interpolation between two directions.
pub fn slerp(a: SphPoint, b: SphPoint, t: f64) -> SphPoint {
    let (va, vb) = (a.to_vec3(), b.to_vec3());
    let omega = haversine(a, b);
    if omega < 1e-12 {
        return a;
    }
    let s = omega.sin();
    if s < 1e-12 {
        // antipodal: direction is ambiguous, fall back to linear blend
        let v = [0, 1, 2].map(|i| va[i] * (1.0 - t) + vb[i] * t);
        return SphPoint::from_vec3(v);
    }
    let (wa, wb) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    SphPoint::from_vec3([0, 1, 2].map(|i| wa * va[i] + wb * vb[i]))
}
