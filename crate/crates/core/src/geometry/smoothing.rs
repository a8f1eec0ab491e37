use rayon::prelude::*;

use super::erp::{ErpGrid, SaliencyMap};
use super::sphere::{dot, SphPoint};
use super::GeometryError;

/// Raw gaze hits of one frame: directions with nonnegative weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixationMap {
    points: Vec<(SphPoint, f32)>,
}

impl FixationMap {
    pub fn new(points: Vec<(SphPoint, f32)>) -> Result<Self, GeometryError> {
        if let Some(&(_, w)) = points.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(GeometryError::ShapeMismatch(format!("fixation weight {w} is not a nonnegative number")));
        }
        Ok(Self { points })
    }

    /// One point per nonzero cell of a dense ERP count grid, at the pixel center.
    pub fn from_dense(grid: ErpGrid, counts: &[f32]) -> Result<Self, GeometryError> {
        if counts.len() != grid.len() {
            return Err(GeometryError::ShapeMismatch(format!(
                "{} counts for a {}x{} grid",
                counts.len(),
                grid.height(),
                grid.width()
            )));
        }
        let points = counts
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(k, &w)| (grid.pixel_center(k / grid.width(), k % grid.width()), w))
            .collect();
        Self::new(points)
    }

    pub fn points(&self) -> &[(SphPoint, f32)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sum of great-circle Gaussians `exp(-d²/2σ²)` (d, σ in degrees) over the
/// fixations, max-normalized to [0, 1]. No fixations gives an all-zero map.
pub fn spherical_gaussian_smooth(fixations: &FixationMap, sigma_deg: f64, grid: ErpGrid) -> SaliencyMap {
    let pts: Vec<([f64; 3], f64)> = fixations
        .points()
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(p, w)| (p.to_vec3(), *w as f64))
        .collect();
    let mut out = SaliencyMap::zeros(grid.height(), grid.width());
    if pts.is_empty() {
        return out;
    }
    let inv = 1.0 / (2.0 * sigma_deg * sigma_deg);
    out.data_mut()
        .par_chunks_mut(grid.width())
        .enumerate()
        .for_each(|(r, row)| {
            for (c, v) in row.iter_mut().enumerate() {
                let q = grid.pixel_center(r, c).to_vec3();
                let s: f64 = pts
                    .iter()
                    .map(|&(p, w)| {
                        let d = angle_between(p, q).to_degrees();
                        w * (-d * d * inv).exp()
                    })
                    .sum();
                *v = s as f32;
            }
        });
    out.max_normalized()
}

/// Angle between unit vectors, accurate at small and large separations.
fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    dot(cross, cross).sqrt().atan2(dot(a, b))
}
