//! Text-driven saliency detection for 360° video.
//!
//! The crate covers the whole computational path: spherical geometry and
//! tangent-image projection ([`geometry`]), a small autodiff kernel set
//! ([`tensor`]), feature providers ([`encoders`]), the text-conditioned
//! spatio-temporal attention network ([`model`]), the dataset construction
//! pipeline ([`datapipe`]) and the evaluation measures ([`metrics`]).

pub mod tensor;
pub mod datapipe;
pub mod encoders;
pub mod geometry;
pub mod imageio;
pub mod metrics;
pub mod model;
