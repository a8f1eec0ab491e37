//! Visual and textual feature providers.
//!
//! [`ToyEncoder`] is a deterministic stand-in for a pretrained
//! vision-language model; [`load_features`] reads features exported by an
//! external model in the `TSFT` file format.

mod file;
mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::TangentStack;
use crate::tensor::io::FormatError;
use crate::tensor::Tensor;

pub use file::{decode_features, encode_features, load_features, save_features, FEATURE_MAGIC, FEATURE_NAMES};
pub use toy::ToyEncoder;

/// Number of local visual scales.
pub const SCALES: usize = 3;
/// Downsampling factor of each local scale relative to the patch size.
pub const SCALE_STRIDES: [usize; SCALES] = [8, 16, 32];

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("text description is empty")]
    EmptyText,
    #[error("feature shape mismatch: {0}")]
    Shape(String),
    #[error("feature file: {0}")]
    Format(#[from] FormatError),
    #[error("feature file is missing tensor {0:?}")]
    MissingTensor(&'static str),
    #[error("feature file has unexpected tensor {0:?}")]
    UnexpectedTensor(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// C_G: global visual/textual feature width (also C_L).
    pub global_dim: usize,
    /// C_m for the three local scales.
    pub scale_channels: [usize; SCALES],
    /// L_t: text token length after padding/truncation.
    pub text_len: usize,
    /// P_in: tangent patch resolution.
    pub patch: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            global_dim: 1024,
            scale_channels: [512, 1024, 2048],
            text_len: 77,
            patch: 224,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch == 0 || self.patch % 32 != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "patch resolution {} is not a positive multiple of 32",
                self.patch
            )));
        }
        if self.global_dim == 0 || self.text_len == 0 || self.scale_channels.contains(&0) {
            return Err(EncoderError::InvalidConfig("feature widths must be positive".into()));
        }
        Ok(())
    }

    /// `(H_m, W_m)` of each local scale.
    pub fn scale_sizes(&self) -> [usize; SCALES] {
        SCALE_STRIDES.map(|s| self.patch / s)
    }
}

/// Encoder outputs for one (frame window, text) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// V_G: `(F, T, C_G)`.
    pub visual_global: Tensor<f32>,
    /// V_L^(m): `(F, T, C_m, H_m, W_m)`.
    pub visual_local: [Tensor<f32>; SCALES],
    /// T_G: `(1, C_G)`.
    pub text_global: Tensor<f32>,
    /// T_L: `(L_t, C_L)`.
    pub text_local: Tensor<f32>,
}

impl FeatureBundle {
    pub fn frames(&self) -> usize {
        self.visual_global.shape()[0]
    }

    pub fn viewports(&self) -> usize {
        self.visual_global.shape()[1]
    }

    /// Checks the shape contract shared by every encoder.
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Shape(m));
        let g = self.visual_global.shape();
        if g.len() != 3 {
            return err(format!("V_G has shape {g:?}, expected (F, T, C_G)"));
        }
        let (f, t, cg) = (g[0], g[1], g[2]);
        if self.text_global.shape() != [1, cg] {
            return err(format!("T_G has shape {:?}, expected (1, {cg})", self.text_global.shape()));
        }
        let tl = self.text_local.shape();
        if tl.len() != 2 || tl[1] != cg {
            return err(format!("T_L has shape {tl:?}, expected (L_t, {cg})"));
        }
        let base = self.visual_local[0].shape().get(3).copied().unwrap_or(0);
        for (m, v) in self.visual_local.iter().enumerate() {
            let s = v.shape();
            let side = base >> m;
            if s.len() != 5 || s[0] != f || s[1] != t || s[3] != side || s[4] != side || side == 0 {
                return err(format!(
                    "V_L{m} has shape {s:?}, expected ({f}, {t}, C, {side}, {side})"
                ));
            }
        }
        Ok(())
    }

    /// Checks shapes against a configuration, including `L_t`, widths and
    /// `P_in/8, P_in/16, P_in/32` spatial sizes.
    pub fn validate_for(&self, cfg: &EncoderConfig) -> Result<(), EncoderError> {
        self.validate()?;
        let sizes = cfg.scale_sizes();
        if self.visual_global.shape()[2] != cfg.global_dim || self.text_local.shape()[0] != cfg.text_len {
            return Err(EncoderError::Shape(format!(
                "expected C_G={} and L_t={}, got V_G {:?}, T_L {:?}",
                cfg.global_dim,
                cfg.text_len,
                self.visual_global.shape(),
                self.text_local.shape()
            )));
        }
        for m in 0..SCALES {
            let s = self.visual_local[m].shape();
            if s[2] != cfg.scale_channels[m] || s[3] != sizes[m] {
                return Err(EncoderError::Shape(format!(
                    "V_L{m} {s:?} does not match {} channels at {}x{}",
                    cfg.scale_channels[m], sizes[m], sizes[m]
                )));
            }
        }
        Ok(())
    }
}

/// A provider of visual and textual features.
pub trait Encoder: Send + Sync {
    fn config(&self) -> &EncoderConfig;

    /// `(V_G, [V_L^(m)])` for a tangent stack.
    fn encode_visual(&self, stack: &TangentStack) -> Result<(Tensor<f32>, [Tensor<f32>; SCALES]), EncoderError>;

    /// `(T_G, T_L)` for a description.
    fn encode_text(&self, text: &str) -> Result<(Tensor<f32>, Tensor<f32>), EncoderError>;

    fn encode(&self, stack: &TangentStack, text: &str) -> Result<FeatureBundle, EncoderError> {
        let (visual_global, visual_local) = self.encode_visual(stack)?;
        let (text_global, text_local) = self.encode_text(text)?;
        let b = FeatureBundle {
            visual_global,
            visual_local,
            text_global,
            text_local,
        };
        b.validate_for(self.config())?;
        Ok(b)
    }
}
