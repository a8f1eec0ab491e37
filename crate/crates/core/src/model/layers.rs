//! Graph construction for the attention stages and the decoder.
//!
//! Everything is generic over [`Real`] so the whole network can be rebuilt
//! in `f64` for finite-difference checks.

use std::collections::BTreeMap;

use super::{Attention, Head, ModelConfig, ModelError};
use crate::encoders::SCALES;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Adds every tensor of `params` to `g`, tracked or constant.
pub fn bind_params<S: Real>(g: &mut Graph<S>, params: &BTreeMap<String, Tensor<S>>, trainable: bool) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(k, t)| {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            (k.clone(), v)
        })
        .collect()
}

/// A graph under construction together with its bound parameters.
pub struct Net<'g, S: Real> {
    pub graph: &'g mut Graph<S>,
    params: &'g BTreeMap<String, Var>,
    heads: usize,
}

impl<'g, S: Real> Net<'g, S> {
    pub fn new(graph: &'g mut Graph<S>, params: &'g BTreeMap<String, Var>, heads: usize) -> Self {
        Self { graph, params, heads }
    }

    pub fn param(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.graph.shape(v).to_vec()
    }

    /// `x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var, ModelError> {
        let s = self.shape(x);
        let cin = *s.last().unwrap();
        let rows = s.iter().product::<usize>() / cin;
        let (wv, bv) = (self.param(&format!("{prefix}.{w}"))?, self.param(&format!("{prefix}.{b}"))?);
        let x2 = self.graph.reshape(x, &[rows, cin])?;
        let y = self.graph.matmul(x2, wv)?;
        let y = self.graph.add_bias(y, bv)?;
        let cout = self.graph.shape(y)[1];
        let mut out = s;
        *out.last_mut().unwrap() = cout;
        Ok(self.graph.reshape(y, &out)?)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(self.graph.layer_norm(x, g, b)?)
    }

    /// `(B, L, C) -> (B * heads, L, C / heads)`.
    fn split_heads(&mut self, x: Var) -> Result<Var, ModelError> {
        let s = self.shape(x);
        let (b, l, c, h) = (s[0], s[1], s[2], self.heads);
        let x = self.graph.reshape(x, &[b, l, h, c / h])?;
        let x = self.graph.permute(x, &[0, 2, 1, 3])?;
        Ok(self.graph.reshape(x, &[b * h, l, c / h])?)
    }

    /// Multi-head attention with queries from `xq: (B, Lq, C)` and keys and
    /// values from `xkv: (B, Lk, Ckv)`, output `(B, Lq, C)`.
    pub fn attention(&mut self, prefix: &str, xq: Var, xkv: Var) -> Result<Var, ModelError> {
        let (sq, skv) = (self.shape(xq), self.shape(xkv));
        let (b, lq, c) = (sq[0], sq[1], sq[2]);
        let h = self.heads;
        if c % h != 0 {
            return Err(ModelError::Config(format!("width {c} is not divisible by {h} heads")));
        }
        if skv.len() != 3 || skv[0] != b {
            return Err(ModelError::Shape(format!("{prefix}: queries {sq:?} vs keys {skv:?}")));
        }
        let dk = c / h;
        let q = self.linear(xq, prefix, "wq", "bq")?;
        let k = self.linear(xkv, prefix, "wk", "bk")?;
        let v = self.linear(xkv, prefix, "wv", "bv")?;
        if self.graph.shape(k)[2] != c {
            return Err(ModelError::Shape(format!("{prefix}: key width {} vs query width {c}", self.graph.shape(k)[2])));
        }
        let q = self.split_heads(q)?;
        let k = self.split_heads(k)?;
        let v = self.split_heads(v)?;
        let kt = self.graph.permute(k, &[0, 2, 1])?;
        let logits = self.graph.bmm(q, kt)?;
        let logits = self.graph.scale(logits, S::from_f64_lossy(1.0 / (dk as f64).sqrt()));
        let weights = self.graph.softmax(logits);
        let ctx = self.graph.bmm(weights, v)?;
        let ctx = self.graph.reshape(ctx, &[b, h, lq, dk])?;
        let ctx = self.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.graph.reshape(ctx, &[b, lq, c])?;
        self.linear(ctx, prefix, "wo", "bo")
    }

    /// `x + MHSA(LN(x))` over the frame axis of `x: (F, T, C)`, separately
    /// for every viewport.
    pub fn temporal_attention(&mut self, m: usize, x: Var) -> Result<Var, ModelError> {
        let h = self.layer_norm(x, &format!("s{m}.tln"))?;
        let h = self.graph.permute(h, &[1, 0, 2])?;
        let a = self.attention(&format!("s{m}.tattn"), h, h)?;
        let a = self.graph.permute(a, &[1, 0, 2])?;
        Ok(self.graph.add(x, a)?)
    }

    /// `x + MHSA(LN(x))` over the viewport axis, separately for every frame.
    pub fn spatial_attention(&mut self, m: usize, x: Var) -> Result<Var, ModelError> {
        let h = self.layer_norm(x, &format!("s{m}.sln"))?;
        let a = self.attention(&format!("s{m}.sattn"), h, h)?;
        Ok(self.graph.add(x, a)?)
    }

    /// `x + CrossAttn(LN(x), T_L)` with the `N = F * T` visual tokens as
    /// queries and text tokens as keys and values.
    pub fn cross_attention(&mut self, m: usize, x: Var, text: Var) -> Result<Var, ModelError> {
        let s = self.shape(x);
        let st = self.shape(text);
        let n: usize = s[..s.len() - 1].iter().product();
        let h = self.layer_norm(x, &format!("s{m}.xln"))?;
        let q = self.graph.reshape(h, &[1, n, s[s.len() - 1]])?;
        let kv = self.graph.reshape(text, &[1, st[0], st[1]])?;
        let a = self.attention(&format!("s{m}.xattn"), q, kv)?;
        let a = self.graph.reshape(a, &s)?;
        Ok(self.graph.add(x, a)?)
    }

    /// `x + W2 relu(W1 LN(x) + b1) + b2`.
    pub fn feed_forward(&mut self, m: usize, x: Var) -> Result<Var, ModelError> {
        let h = self.layer_norm(x, &format!("s{m}.fln"))?;
        let h = self.linear(h, &format!("s{m}.ffn"), "w1", "b1")?;
        let h = self.graph.relu(h);
        let h = self.linear(h, &format!("s{m}.ffn"), "w2", "b2")?;
        Ok(self.graph.add(x, h)?)
    }

    /// Adds `table[id]` to every `(F, T)` token, `ids` selecting by frame or
    /// by viewport.
    fn add_embedding(&mut self, x: Var, table: &str, by_frame: bool) -> Result<Var, ModelError> {
        let s = self.shape(x);
        let (f, t) = (s[0], s[1]);
        let ids: Vec<usize> = (0..f * t).map(|i| if by_frame { i / t } else { i % t }).collect();
        let tab = self.param(table)?;
        let e = self.graph.embed(tab, &ids)?;
        let e = self.graph.reshape(e, &s)?;
        Ok(self.graph.add(x, e)?)
    }

    /// Temporal attention, spatial attention, optional cross-attention and
    /// the feed-forward sublayer on `V_D^(m): (F, T, C_m)`.
    pub fn vstca_block(&mut self, m: usize, vd: Var, text: Option<Var>) -> Result<Var, ModelError> {
        let x = self.add_embedding(vd, &format!("s{m}.temb"), true)?;
        let z = self.temporal_attention(m, x)?;
        let z = self.add_embedding(z, &format!("s{m}.semb"), false)?;
        let mut z = self.spatial_attention(m, z)?;
        if let Some(tl) = text {
            z = self.cross_attention(m, z, tl)?;
        }
        self.feed_forward(m, z)
    }

    /// `Z_F = V_L[F-1] + Z_o[F-1]` broadcast over space: `(T, H, W, C)`.
    pub fn fuse_and_retain(&mut self, zo: Var, last_frame: Var) -> Result<Var, ModelError> {
        let (so, sl) = (self.shape(zo), self.shape(last_frame));
        let (f, t, c) = (so[0], so[1], so[2]);
        if sl.len() != 4 || sl[0] != t || sl[3] != c {
            return Err(ModelError::Shape(format!("Z_o {so:?} vs last-frame features {sl:?}")));
        }
        let hw = sl[1] * sl[2];
        let table = self.graph.reshape(zo, &[f * t, c])?;
        let ids: Vec<usize> = (0..t * hw).map(|i| (f - 1) * t + i / hw).collect();
        let b = self.graph.embed(table, &ids)?;
        let b = self.graph.reshape(b, &sl)?;
        Ok(self.graph.add(last_frame, b)?)
    }

    /// Decoder from `Z_F^(m)` (coarsest last) to per-viewport maps
    /// `(T, P_out, P_out, 1)`. Finer scales are only read when skips are on.
    pub fn decode(&mut self, zf: &[Option<Var>; SCALES], cfg: &ModelConfig) -> Result<Var, ModelError> {
        let mut x = zf[SCALES - 1].ok_or_else(|| ModelError::Shape("coarsest scale missing".into()))?;
        for stage in 0..4 {
            if cfg.skips && (stage == 1 || stage == 2) {
                let skip = zf[SCALES - 1 - stage].ok_or_else(|| ModelError::Shape(format!("scale {} missing", SCALES - 1 - stage)))?;
                x = self.graph.concat(&[x, skip])?;
            }
            let w = self.param(&format!("dec{stage}.w"))?;
            let b = self.param(&format!("dec{stage}.b"))?;
            x = self.graph.conv2d(x, w, b)?;
            x = self.layer_norm(x, &format!("dec{stage}.ln"))?;
            x = self.graph.relu(x);
            if stage < 3 {
                let s = self.shape(x);
                x = self.graph.upsample_bilinear(x, 2 * s[1], 2 * s[2])?;
            }
        }
        let w = self.param("head.w")?;
        let b = self.param("head.b")?;
        x = self.graph.conv2d(x, w, b)?;
        Ok(match cfg.head {
            Head::Sigmoid => self.graph.sigmoid(x),
            Head::Relu => self.graph.relu(x),
        })
    }

    /// The whole network up to per-viewport maps `(T, P_out, P_out, 1)`.
    pub fn forward_tangent(&mut self, inputs: &BoundInputs, cfg: &ModelConfig) -> Result<Var, ModelError> {
        let mut zf = [None; SCALES];
        for m in cfg.active_scales() {
            let text = match cfg.attention {
                Attention::Vstca => Some(inputs.text_local),
                Attention::Vsta => None,
            };
            let zo = self.vstca_block(m, inputs.pooled[m], text)?;
            zf[m] = Some(self.fuse_and_retain(zo, inputs.last_frame[m])?);
        }
        self.decode(&zf, cfg)
    }
}

/// [`super::PreparedInputs`] added to a graph as constants.
#[derive(Clone, Copy, Debug)]
pub struct BoundInputs {
    pub pooled: [Var; SCALES],
    pub last_frame: [Var; SCALES],
    pub text_local: Var,
}

impl BoundInputs {
    pub fn bind<S: Real>(g: &mut Graph<S>, p: &super::PreparedInputs) -> Self {
        Self {
            pooled: [0, 1, 2].map(|m| g.constant(p.pooled[m].cast())),
            last_frame: [0, 1, 2].map(|m| g.constant(p.last_frame[m].cast())),
            text_local: g.constant(p.text_local.cast()),
        }
    }
}
