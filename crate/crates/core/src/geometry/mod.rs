//! Spherical geometry: viewport layouts, gnomonic projection, ERP sampling,
//! inverse blending, great-circle distances and fixation smoothing.

mod erp;
mod gnomonic;
mod layout;
mod smoothing;
mod sphere;

use thiserror::Error;

pub use erp::{
    blend_inverse, project_to_tangents, BlendPlan, ErpFrameSequence, ErpGrid, SaliencyMap, SaliencyMapSet,
    TangentSampler, TangentStack,
};
pub use gnomonic::{gnomonic_forward, gnomonic_inverse, PlaneCoord, TangentFrame};
pub use layout::{build_layout, probe_points, ViewportLayout, RING_LATITUDE_DEG};
pub use smoothing::{spherical_gaussian_smooth, FixationMap};
pub use sphere::{haversine, slerp, wrap_lon, SphPoint, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid sphere point lat={lat}, lon={lon}")]
    InvalidPoint { lat: f64, lon: f64 },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error(
        "layout leaves the cap around (lat {lat_deg:.2}°, lon {lon_deg:.2}°) uncovered: \
         nearest center {distance_deg:.2}° away, half fov {half_fov_deg:.2}°"
    )]
    Uncovered {
        lat_deg: f64,
        lon_deg: f64,
        distance_deg: f64,
        half_fov_deg: f64,
    },
    #[error("ERP grid must be H x 2H with H > 0, got {height}x{width}")]
    InvalidGrid { height: usize, width: usize },
    #[error("ERP pixel ({row}, {col}) is not covered by any viewport")]
    UncoveredPixel { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
