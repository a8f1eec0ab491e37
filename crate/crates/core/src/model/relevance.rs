//! Feature preparation ahead of the attention stages. These steps have no
//! learnable parameters and run outside the autodiff graph.

use super::ModelError;
use crate::encoders::{FeatureBundle, SCALES};
use crate::tensor::Tensor;

/// `S[f,t] = cos(V_G[f,t], T_G)`, shape `(F, T)`.
pub fn sim_est(vg: &Tensor<f32>, tg: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
    let s = vg.shape();
    let c = s[2];
    if tg.numel() != c {
        return Err(ModelError::Shape(format!("V_G {s:?} vs T_G {:?}", tg.shape())));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let nt = norm(tg.data());
    if nt == 0.0 {
        return Err(ModelError::ZeroNorm("T_G".into()));
    }
    let mut out = Vec::with_capacity(s[0] * s[1]);
    for (i, row) in vg.data().chunks(c).enumerate() {
        let nv = norm(row);
        if nv == 0.0 {
            return Err(ModelError::ZeroNorm(format!("V_G[{}, {}]", i / s[1], i % s[1])));
        }
        let dot: f64 = row.iter().zip(tg.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        out.push((dot / (nv * nt)).clamp(-1.0, 1.0) as f32);
    }
    Ok(Tensor::new(vec![s[0], s[1]], out)?)
}

/// Scales every `V_L^(m)[f, t]` block by `S[f, t]`.
pub fn apply_relevance(vl: &[Tensor<f32>; SCALES], s: &Tensor<f32>) -> Result<[Tensor<f32>; SCALES], ModelError> {
    let rows = s.numel();
    let mut out = vl.clone();
    for t in out.iter_mut() {
        let sh = t.shape();
        if sh[..2] != *s.shape() {
            return Err(ModelError::Shape(format!("V_L {sh:?} vs relevance {:?}", s.shape())));
        }
        let k = t.numel() / rows;
        for (block, &w) in t.data_mut().chunks_mut(k).zip(s.data()) {
            block.iter_mut().for_each(|v| *v *= w);
        }
    }
    Ok(out)
}

/// Spatial mean over `(H_m, W_m)`: `(F, T, C, H, W) -> (F, T, C)`.
pub fn downsample(v: &Tensor<f32>) -> Tensor<f32> {
    let s = v.shape();
    let hw = s[3] * s[4];
    let data = v
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&x| x as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(vec![s[0], s[1], s[2]], data).expect("pooled shape")
}

/// Last frame of `(F, T, C, H, W)` in channel-last layout `(T, H, W, C)`.
pub fn last_frame_nhwc(v: &Tensor<f32>) -> Tensor<f32> {
    let s = v.shape();
    let (f, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let base = (f - 1) * t * c * h * w;
    let src = v.data();
    Tensor::from_fn(&[t, h, w, c], |i| {
        let (ti, rest) = (i / (h * w * c), i % (h * w * c));
        let (p, ch) = (rest / c, rest % c);
        src[base + (ti * c + ch) * h * w + p]
    })
}

/// Graph inputs for one (frame window, text) pair.
#[derive(Clone, Debug)]
pub struct PreparedInputs {
    /// `S`, or `None` when relevance weighting is disabled.
    pub relevance: Option<Tensor<f32>>,
    /// `V_D^(m)`: `(F, T, C_m)`.
    pub pooled: [Tensor<f32>; SCALES],
    /// Unweighted `V_L^(m)` of the last frame, `(T, H_m, W_m, C_m)`.
    pub last_frame: [Tensor<f32>; SCALES],
    /// `T_L`: `(L_t, C_L)`.
    pub text_local: Tensor<f32>,
}

impl PreparedInputs {
    pub fn new(b: &FeatureBundle, use_sim_est: bool, clamp_relevance: bool) -> Result<Self, ModelError> {
        b.validate()?;
        let relevance = if use_sim_est {
            let mut s = sim_est(&b.visual_global, &b.text_global)?;
            if clamp_relevance {
                s.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Some(s)
        } else {
            None
        };
        let weighted = match &relevance {
            Some(s) => apply_relevance(&b.visual_local, s)?,
            None => b.visual_local.clone(),
        };
        Ok(Self {
            relevance,
            pooled: [0, 1, 2].map(|m| downsample(&weighted[m])),
            last_frame: [0, 1, 2].map(|m| last_frame_nhwc(&b.visual_local[m])),
            text_local: b.text_local.clone(),
        })
    }
}
