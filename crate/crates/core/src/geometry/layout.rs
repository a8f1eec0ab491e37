use std::f64::consts::PI;

use super::sphere::{dot, SphPoint};
use super::GeometryError;

/// Latitude of the two polar rings of the ring layout.
pub const RING_LATITUDE_DEG: f64 = 54.0;
const COVERAGE_PROBES: usize = 20_000;

/// Placement of `T` tangent viewports on the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewportLayout {
    centers: Vec<SphPoint>,
    fov: f64,
    patch: usize,
}

impl ViewportLayout {
    /// Wraps explicit centers, checking that they are distinct and that
    /// their `fov/2` caps cover the sphere.
    pub fn from_centers(centers: Vec<SphPoint>, fov: f64, patch: usize) -> Result<Self, GeometryError> {
        validate(centers.len(), fov, patch)?;
        for (i, a) in centers.iter().enumerate() {
            for b in &centers[i + 1..] {
                if dot(a.to_vec3(), b.to_vec3()) > 1.0 - 1e-12 {
                    return Err(GeometryError::InvalidLayout(format!("duplicate center {a:?}")));
                }
            }
        }
        let layout = Self { centers, fov, patch };
        if layout.centers.len() > 1 {
            layout.check_coverage()?;
        }
        Ok(layout)
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[SphPoint] {
        &self.centers
    }

    pub fn fov(&self) -> f64 {
        self.fov
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Same centers and field of view at another patch resolution.
    pub fn with_patch(&self, patch: usize) -> Self {
        Self {
            patch,
            ..self.clone()
        }
    }

    /// Reorders the viewports: new viewport `i` is old viewport `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            centers: perm.iter().map(|&i| self.centers[i]).collect(),
            ..self.clone()
        }
    }

    /// Angular distance from `p` to the nearest center.
    pub fn nearest_center_distance(&self, p: SphPoint) -> f64 {
        let v = p.to_vec3();
        let best = self
            .centers
            .iter()
            .map(|c| dot(c.to_vec3(), v))
            .fold(-1.0f64, f64::max);
        best.clamp(-1.0, 1.0).acos()
    }

    fn check_coverage(&self) -> Result<(), GeometryError> {
        let half = self.fov / 2.0;
        let mut worst: Option<(SphPoint, f64)> = None;
        for p in probe_points(COVERAGE_PROBES) {
            let d = self.nearest_center_distance(p);
            if d > half && worst.is_none_or(|(_, w)| d > w) {
                worst = Some((p, d));
            }
        }
        match worst {
            None => Ok(()),
            Some((p, d)) => Err(GeometryError::Uncovered {
                lat_deg: p.lat.to_degrees(),
                lon_deg: p.lon.to_degrees(),
                distance_deg: d.to_degrees(),
                half_fov_deg: half.to_degrees(),
            }),
        }
    }
}

fn validate(count: usize, fov: f64, patch: usize) -> Result<(), GeometryError> {
    if count == 0 {
        return Err(GeometryError::InvalidLayout("viewport count must be positive".into()));
    }
    if !(fov > 0.0 && fov < PI) {
        return Err(GeometryError::InvalidLayout(format!("fov {fov} rad outside (0, π)")));
    }
    if patch == 0 {
        return Err(GeometryError::InvalidLayout("patch resolution must be positive".into()));
    }
    Ok(())
}

/// Deterministic viewport layout.
///
/// * `count == 1`: a single viewport at (0, 0). It only sees its own cap, so
///   coverage is not checked.
/// * `count` divisible by 3: an equatorial ring plus two rings at
///   ±[`RING_LATITUDE_DEG`], `count/3` viewports each, with the polar rings
///   rotated by half a step in longitude. 18 viewports give a covering
///   radius of about 35.8°.
/// * otherwise: a Fibonacci lattice.
pub fn build_layout(count: usize, fov: f64, patch: usize) -> Result<ViewportLayout, GeometryError> {
    validate(count, fov, patch)?;
    let centers = if count == 1 {
        vec![SphPoint { lat: 0.0, lon: 0.0 }]
    } else if count % 3 == 0 {
        let per_ring = count / 3;
        let step = 2.0 * PI / per_ring as f64;
        let ring_lat = RING_LATITUDE_DEG.to_radians();
        let mut c = Vec::with_capacity(count);
        for (lat, offset) in [(-ring_lat, 0.5), (0.0, 0.0), (ring_lat, 0.5)] {
            for k in 0..per_ring {
                c.push(SphPoint::new(lat, (k as f64 + offset) * step).expect("valid ring point"));
            }
        }
        c
    } else {
        probe_points(count)
    };
    ViewportLayout::from_centers(centers, fov, patch)
}

/// Fibonacci-lattice points, quasi-uniform on the sphere.
pub fn probe_points(n: usize) -> Vec<SphPoint> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut pts: Vec<SphPoint> = (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            SphPoint::new(z.asin(), i as f64 * golden).expect("lattice point")
        })
        .collect();
    if n > 100 {
        pts.push(SphPoint::new(PI / 2.0, 0.0).unwrap());
        pts.push(SphPoint::new(-PI / 2.0, 0.0).unwrap());
    }
    pts
}
