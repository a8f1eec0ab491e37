//! Dataset construction: fixation smoothing, per-frame salient-region
//! clustering, sub-volume formation, per-event map splitting, window-shift
//! augmentation, triplet storage and k-fold splitting.

mod events;
mod folds;
mod hdbscan;
mod store;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::imageio::ImageError;

pub use events::{
    cluster_frame, form_subvolumes, split_event_maps, window_shift_augment, window_count, Cluster, EventTriplet,
    SalientEvent,
};
pub use folds::{kfold_split, FoldSpec};
pub use hdbscan::{hdbscan, hdbscan_with, HdbscanParams};
pub use store::{build_dataset, read_store, Manifest, TripletRecord, VideoStats, MANIFEST_NAME};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("event spans {span} frames, fewer than the window length {frames}")]
    SpanTooShort { span: usize, frames: usize },
    #[error("event {0} has no member pixels")]
    EmptyMembers(usize),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.into(),
            msg: e.to_string(),
        }
    }
}

/// Parameters of the dataset builder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Fixation smoothing bandwidth in degrees.
    pub sigma_deg: f64,
    /// Fraction of the frame maximum above which a pixel is salient.
    pub salient_threshold: f32,
    /// Upper bound on salient pixels clustered per frame.
    pub max_points: usize,
    /// Centroid matching radius between frames, degrees.
    pub tau_deg: f64,
    /// Longest gap, in frames, bridged inside one event.
    pub gap_fill: usize,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    /// A frame with one salient region yields one cluster instead of noise.
    pub allow_single_cluster: bool,
    /// Window length F.
    pub frames: usize,
    /// Ground-truth map height; width is twice this.
    pub gt_height: usize,
    /// Radius around member pixels that an event map keeps, degrees.
    pub dilation_deg: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sigma_deg: 5.0,
            salient_threshold: 0.3,
            max_points: 2000,
            tau_deg: 15.0,
            gap_fill: 8,
            min_cluster_size: 25,
            min_samples: 10,
            allow_single_cluster: true,
            frames: 8,
            gt_height: 480,
            dilation_deg: 15.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if !(self.sigma_deg > 0.0) {
            return bad("sigma_deg must be positive");
        }
        if !(self.salient_threshold > 0.0 && self.salient_threshold <= 1.0) {
            return bad("salient_threshold must lie in (0, 1]");
        }
        if self.max_points == 0 || self.frames == 0 || self.gt_height == 0 {
            return bad("max_points, frames and gt_height must be positive");
        }
        if !(self.tau_deg > 0.0) || !(self.dilation_deg >= 0.0) {
            return bad("tau_deg must be positive and dilation_deg nonnegative");
        }
        self.hdbscan().validate()
    }

    pub fn hdbscan(&self) -> HdbscanParams {
        HdbscanParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples,
            allow_single_cluster: self.allow_single_cluster,
        }
    }
}
