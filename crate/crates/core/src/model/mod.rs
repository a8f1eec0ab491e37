//! The text-conditioned saliency network: relevance weighting, viewport
//! spatio-temporal (cross-)attention, residual fusion with last-frame
//! retention, a hierarchical-skip decoder and inverse tangent blending.

pub mod layers;
mod relevance;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{Encoder, EncoderConfig, EncoderError, FeatureBundle, SCALES};
use crate::geometry::{build_layout, project_to_tangents, BlendPlan, ErpFrameSequence, ErpGrid, GeometryError, SaliencyMap, SaliencyMapSet, ViewportLayout};
use crate::tensor::init::Initializer;
use crate::tensor::io::{load_checkpoint, save_checkpoint, FormatError, NamedTensors};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub use layers::{bind_params, BoundInputs, Net};
pub use relevance::{apply_relevance, downsample, last_frame_nhwc, sim_est, PreparedInputs};
pub use train::{train, Sample, StepLog, TrainConfig, Trainer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("checkpoint: {0}")]
    Format(#[from] FormatError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("config file: {0}")]
    ConfigFile(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    /// Temporal, spatial and text cross-attention.
    Vstca,
    /// Temporal and spatial attention only.
    Vsta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Kld,
    /// `KLD + (1 - CC)`.
    KldCc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// F: frames per window.
    pub frames: usize,
    /// T: tangent viewports per frame.
    pub viewports: usize,
    pub heads: usize,
    pub fov_deg: f64,
    /// P_out: decoder output resolution per viewport, `P_in / 4`.
    pub patch_out: usize,
    pub head: Head,
    pub attention: Attention,
    pub sim_est: bool,
    pub skips: bool,
    pub mlp_ratio: usize,
    pub decoder_widths: [usize; 4],
    pub clamp_relevance: bool,
    pub loss: LossKind,
    /// H_out of the blended ERP map (W_out = 2 H_out).
    pub blend_height: usize,
    /// Height of predicted maps when no ground truth fixes the resolution.
    pub output_height: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            viewports: 18,
            heads: 8,
            fov_deg: 80.0,
            patch_out: 56,
            head: Head::Sigmoid,
            attention: Attention::Vstca,
            sim_est: true,
            skips: true,
            mlp_ratio: 4,
            decoder_widths: [256, 128, 64, 32],
            clamp_relevance: false,
            loss: LossKind::Kld,
            blend_height: 240,
            output_height: 480,
        }
    }
}

impl ModelConfig {
    /// Scales that feed the decoder.
    pub fn active_scales(&self) -> Vec<usize> {
        if self.skips {
            (0..SCALES).collect()
        } else {
            vec![SCALES - 1]
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<(), ModelError> {
        enc.validate()?;
        let bad = |m: String| Err(ModelError::Config(m));
        if self.frames == 0 || self.viewports == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("frames, viewports, heads and mlp_ratio must be positive".into());
        }
        if self.patch_out * 4 != enc.patch {
            return bad(format!("patch_out {} must equal P_in/4 = {}", self.patch_out, enc.patch / 4));
        }
        if let Some(c) = enc.scale_channels.iter().find(|&&c| c % self.heads != 0) {
            return bad(format!("scale width {c} is not divisible by {} heads", self.heads));
        }
        if self.decoder_widths.contains(&0) || self.blend_height == 0 || self.output_height == 0 {
            return bad("decoder widths and output sizes must be positive".into());
        }
        Ok(())
    }

    /// Name and shape of every learnable tensor.
    pub fn param_shapes(&self, enc: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
        let mut p = BTreeMap::new();
        let mut add = |k: String, s: Vec<usize>| {
            p.insert(k, s);
        };
        let cl = enc.global_dim;
        for m in self.active_scales() {
            let c = enc.scale_channels[m];
            add(format!("s{m}.temb"), vec![self.frames, c]);
            add(format!("s{m}.semb"), vec![self.viewports, c]);
            let mut attn = |name: &str, kv: usize| {
                for (w, cin) in [("wq", c), ("wk", kv), ("wv", kv), ("wo", c)] {
                    add(format!("s{m}.{name}.{w}"), vec![cin, c]);
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    add(format!("s{m}.{name}.{b}"), vec![c]);
                }
            };
            attn("tattn", c);
            attn("sattn", c);
            let mut lns = vec!["tln", "sln", "fln"];
            if self.attention == Attention::Vstca {
                attn("xattn", cl);
                lns.push("xln");
            }
            for ln in lns {
                add(format!("s{m}.{ln}.g"), vec![c]);
                add(format!("s{m}.{ln}.b"), vec![c]);
            }
            let hidden = self.mlp_ratio * c;
            add(format!("s{m}.ffn.w1"), vec![c, hidden]);
            add(format!("s{m}.ffn.b1"), vec![hidden]);
            add(format!("s{m}.ffn.w2"), vec![hidden, c]);
            add(format!("s{m}.ffn.b2"), vec![c]);
        }
        let mut cin = enc.scale_channels[SCALES - 1];
        for (stage, &w) in self.decoder_widths.iter().enumerate() {
            if self.skips && (stage == 1 || stage == 2) {
                cin += enc.scale_channels[SCALES - 1 - stage];
            }
            add(format!("dec{stage}.w"), vec![3, 3, cin, w]);
            add(format!("dec{stage}.b"), vec![w]);
            add(format!("dec{stage}.ln.g"), vec![w]);
            add(format!("dec{stage}.ln.b"), vec![w]);
            cin = w;
        }
        add("head.w".into(), vec![3, 3, cin, 1]);
        add("head.b".into(), vec![1]);
        p
    }
}

/// Model and encoder configuration stored next to a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
}

impl ModelSpec {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, ModelError> {
        toml::from_str(s).map_err(|e| ModelError::ConfigFile(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_toml()).map_err(|e| ModelError::ConfigFile(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let s = std::fs::read_to_string(path).map_err(|e| ModelError::ConfigFile(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }
}

fn init_value(name: &str, shape: &[usize], init: &mut Initializer) -> Tensor<f32> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf == "g" {
        Tensor::full(shape, 1.0)
    } else if leaf.starts_with('b') {
        Tensor::zeros(shape)
    } else {
        init.weight(shape)
    }
}

pub struct Model {
    spec: ModelSpec,
    params: NamedTensors,
    layout: ViewportLayout,
    blend: BlendPlan,
}

impl Model {
    /// A freshly initialized model: truncated-normal weights and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        let mut init = Initializer::new(seed);
        let params = spec
            .model
            .param_shapes(&spec.encoder)
            .into_iter()
            .map(|(k, s)| {
                let t = init_value(&k, &s, &mut init);
                (k, t)
            })
            .collect();
        Self::from_params(spec, params)
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(spec: ModelSpec, params: NamedTensors) -> Result<Self, ModelError> {
        spec.model.validate(&spec.encoder)?;
        let cfg = &spec.model;
        let layout = build_layout(cfg.viewports, cfg.fov_deg.to_radians(), spec.encoder.patch)?;
        Self::with_layout(spec, params, layout)
    }

    /// Like [`Model::from_params`] with explicit viewport centers.
    pub fn with_layout(spec: ModelSpec, params: NamedTensors, layout: ViewportLayout) -> Result<Self, ModelError> {
        spec.model.validate(&spec.encoder)?;
        let want = spec.model.param_shapes(&spec.encoder);
        for (k, s) in &want {
            match params.get(k) {
                None => return Err(ModelError::MissingParam(k.clone())),
                Some(t) if t.shape() != s.as_slice() => {
                    return Err(ModelError::Shape(format!("parameter {k}: {:?}, expected {s:?}", t.shape())));
                }
                _ => {}
            }
        }
        if let Some(k) = params.keys().find(|k| !want.contains_key(*k)) {
            return Err(ModelError::Shape(format!("unexpected parameter {k}")));
        }
        let cfg = &spec.model;
        if layout.count() != cfg.viewports || layout.patch() != spec.encoder.patch || (layout.fov() - cfg.fov_deg.to_radians()).abs() > 1e-12 {
            return Err(ModelError::Config("layout does not match viewport count, patch or fov".into()));
        }
        let blend = BlendPlan::new(&layout.with_patch(cfg.patch_out), ErpGrid::with_height(cfg.blend_height)?)?;
        Ok(Self {
            spec,
            params,
            layout,
            blend,
        })
    }

    pub fn load(spec: ModelSpec, checkpoint: &Path) -> Result<Self, ModelError> {
        Self::from_params(spec, load_checkpoint(checkpoint)?)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<(), ModelError> {
        Ok(save_checkpoint(checkpoint, &self.params)?)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.model
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensors {
        &mut self.params
    }

    pub fn layout(&self) -> &ViewportLayout {
        &self.layout
    }

    pub fn blend_plan(&self) -> &BlendPlan {
        &self.blend
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks a bundle against the configuration and precomputes the
    /// parameter-free stages.
    pub fn prepare(&self, b: &FeatureBundle) -> Result<PreparedInputs, ModelError> {
        b.validate_for(&self.spec.encoder)?;
        let cfg = &self.spec.model;
        if b.frames() != cfg.frames || b.viewports() != cfg.viewports {
            return Err(ModelError::Shape(format!(
                "features for {} frames x {} viewports, model expects {} x {}",
                b.frames(),
                b.viewports(),
                cfg.frames,
                cfg.viewports
            )));
        }
        PreparedInputs::new(b, cfg.sim_est, cfg.clamp_relevance)
    }

    /// Per-viewport maps `(T, P_out, P_out, 1)` in graph `g`.
    pub fn tangent_graph<S: Real>(&self, g: &mut Graph<S>, params: &BTreeMap<String, Var>, inputs: &PreparedInputs) -> Result<Var, ModelError> {
        let bound = BoundInputs::bind(g, inputs);
        Net::new(g, params, self.spec.model.heads).forward_tangent(&bound, &self.spec.model)
    }

    /// Blended ERP map `(1, H, W, 1)` in graph `g`, resized to `height x 2 height`.
    pub fn erp_graph<S: Real>(&self, g: &mut Graph<S>, params: &BTreeMap<String, Var>, inputs: &PreparedInputs, height: usize) -> Result<Var, ModelError> {
        let tangent = self.tangent_graph(g, params, inputs)?;
        let grid = self.blend.grid();
        let erp = g.sparse_linear(tangent, self.blend.matrix().clone(), &[1, grid.height(), grid.width(), 1])?;
        if height == grid.height() {
            Ok(erp)
        } else {
            Ok(g.upsample_bilinear(erp, height, 2 * height)?)
        }
    }

    /// Training loss against `gt` in graph `g`.
    pub fn loss_graph<S: Real>(&self, g: &mut Graph<S>, params: &BTreeMap<String, Var>, inputs: &PreparedInputs, gt: &SaliencyMap) -> Result<Var, ModelError> {
        if gt.width() != 2 * gt.height() {
            return Err(ModelError::Shape(format!("ground truth {}x{} is not 2:1", gt.height(), gt.width())));
        }
        let pred = self.erp_graph(g, params, inputs, gt.height())?;
        let kld = g.kld_loss(pred, gt.data())?;
        Ok(match self.spec.model.loss {
            LossKind::Kld => kld,
            LossKind::KldCc => {
                let cc = g.cc_loss(pred, gt.data())?;
                g.add(kld, cc)?
            }
        })
    }

    /// Loss and parameter gradients for one sample.
    pub fn loss_and_grads(&self, inputs: &PreparedInputs, gt: &SaliencyMap) -> Result<(f64, BTreeMap<String, Vec<f32>>), ModelError> {
        let mut g = Graph::<f32>::new();
        let vars = bind_params(&mut g, &self.params, true);
        let loss = self.loss_graph(&mut g, &vars, inputs, gt)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|d| (k.clone(), d.to_vec())))
            .collect();
        Ok((g.value(loss).data()[0] as f64, grads))
    }

    /// Loss without gradients.
    pub fn loss(&self, inputs: &PreparedInputs, gt: &SaliencyMap) -> Result<f64, ModelError> {
        let mut g = Graph::<f32>::new();
        let vars = bind_params(&mut g, &self.params, false);
        let loss = self.loss_graph(&mut g, &vars, inputs, gt)?;
        Ok(g.value(loss).data()[0] as f64)
    }

    /// Per-viewport decoder outputs, `Y_projected`.
    pub fn predict_tangent(&self, inputs: &PreparedInputs) -> Result<SaliencyMapSet, ModelError> {
        let mut g = Graph::<f32>::new();
        let vars = bind_params(&mut g, &self.params, false);
        let y = self.tangent_graph(&mut g, &vars, inputs)?;
        let p = self.spec.model.patch_out;
        let maps = g
            .value(y)
            .data()
            .chunks(p * p)
            .map(|c| SaliencyMap::new(p, p, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SaliencyMapSet::new(maps)?)
    }

    /// Max-normalized ERP saliency map of the last frame at `height x 2 height`.
    pub fn predict_prepared(&self, inputs: &PreparedInputs, height: usize) -> Result<SaliencyMap, ModelError> {
        let mut g = Graph::<f32>::new();
        let vars = bind_params(&mut g, &self.params, false);
        let y = self.erp_graph(&mut g, &vars, inputs, height)?;
        let data = g.value(y).data().to_vec();
        Ok(SaliencyMap::new(height, 2 * height, data)?.max_normalized())
    }

    pub fn predict_features(&self, b: &FeatureBundle) -> Result<SaliencyMap, ModelError> {
        self.predict_prepared(&self.prepare(b)?, self.spec.model.output_height)
    }

    /// End-to-end prediction from ERP frames and a description.
    pub fn predict(&self, encoder: &dyn Encoder, frames: &ErpFrameSequence, text: &str) -> Result<SaliencyMap, ModelError> {
        self.predict_features(&self.encode(encoder, frames, text)?)
    }

    /// Projects a frame window onto the model's viewports and encodes it.
    pub fn encode(&self, encoder: &dyn Encoder, frames: &ErpFrameSequence, text: &str) -> Result<FeatureBundle, ModelError> {
        if frames.len() != self.spec.model.frames {
            return Err(ModelError::Shape(format!(
                "{} frames given, model expects {}",
                frames.len(),
                self.spec.model.frames
            )));
        }
        if encoder.config() != &self.spec.encoder {
            return Err(ModelError::Config("encoder configuration differs from the model's".into()));
        }
        let stack = project_to_tangents(frames, &self.layout)?;
        Ok(encoder.encode(&stack, text)?)
    }
}
