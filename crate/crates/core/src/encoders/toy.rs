//! Deterministic stand-in encoder built from pooled image statistics and
//! hashed token embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{Encoder, EncoderConfig, EncoderError, SCALES, SCALE_STRIDES};
use crate::geometry::TangentStack;
use crate::tensor::Tensor;

const ORIENT_BINS: usize = 8;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn config_hash(cfg: &EncoderConfig) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &cfg.seed.to_le_bytes());
    for v in [cfg.global_dim, cfg.text_len, cfg.patch]
        .into_iter()
        .chain(cfg.scale_channels)
    {
        h = fnv1a(h, &(v as u64).to_le_bytes());
    }
    h
}

/// Row-major `(k, out)` Gaussian matrix scaled by `1/sqrt(k)`.
fn projection(seed: u64, k: usize, out: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (k as f64).sqrt();
    (0..k * out)
        .map(|_| (Distribution::<f64>::sample(&StandardNormal, &mut rng) * s) as f32)
        .collect()
}

/// Per-cell sums from which mean, std and the orientation histogram follow.
#[derive(Clone, Default)]
struct CellSums {
    sum: Vec<f64>,
    sq: Vec<f64>,
    hist: [f64; ORIENT_BINS],
    n: f64,
}

impl CellSums {
    fn new(c: usize) -> Self {
        Self {
            sum: vec![0.0; c],
            sq: vec![0.0; c],
            ..Default::default()
        }
    }

    fn merge(&mut self, o: &CellSums) {
        for (a, b) in self.sum.iter_mut().zip(&o.sum) {
            *a += b;
        }
        for (a, b) in self.sq.iter_mut().zip(&o.sq) {
            *a += b;
        }
        for (a, b) in self.hist.iter_mut().zip(&o.hist) {
            *a += b;
        }
        self.n += o.n;
    }

    /// `[mean_c.., std_c.., hist.., 1]`.
    fn stats(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(2 * self.sum.len() + ORIENT_BINS + 1);
        s.extend(self.sum.iter().map(|v| v / self.n));
        s.extend(
            self.sum
                .iter()
                .zip(&self.sq)
                .map(|(m, q)| (q / self.n - (m / self.n).powi(2)).max(0.0).sqrt()),
        );
        s.extend(self.hist.iter().map(|h| h / self.n));
        s.push(1.0);
        s
    }
}

/// Cell sums of one tangent image at the finest scale, `(P/8)^2` cells.
fn fine_cells(stack: &TangentStack, f: usize, t: usize) -> Vec<CellSums> {
    let shape = stack.shape();
    let (c, p) = (shape[2], shape[3]);
    let side = p / SCALE_STRIDES[0];
    let planes: Vec<&[f32]> = (0..c).map(|ch| stack.image(f, t, ch)).collect();
    let lum: Vec<f64> = (0..p * p)
        .map(|i| planes.iter().map(|pl| pl[i] as f64).sum::<f64>() / c as f64)
        .collect();
    let mut cells = vec![CellSums::new(c); side * side];
    for y in 0..p {
        for x in 0..p {
            let i = y * p + x;
            let cell = &mut cells[(y / SCALE_STRIDES[0]) * side + x / SCALE_STRIDES[0]];
            for (ch, pl) in planes.iter().enumerate() {
                let v = pl[i] as f64;
                cell.sum[ch] += v;
                cell.sq[ch] += v * v;
            }
            let gx = if x + 1 < p { lum[i + 1] - lum[i] } else { 0.0 };
            let gy = if y + 1 < p { lum[i + p] - lum[i] } else { 0.0 };
            let mag = gx.hypot(gy);
            if mag > 0.0 {
                let a = gy.atan2(gx) + std::f64::consts::PI;
                let b = ((a / std::f64::consts::TAU * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
                cell.hist[b] += mag;
            }
            cell.n += 1.0;
        }
    }
    cells
}

/// Merges `2x2` blocks of a square cell grid.
fn coarsen(cells: &[CellSums], side: usize) -> Vec<CellSums> {
    let half = side / 2;
    let mut out = Vec::with_capacity(half * half);
    for y in 0..half {
        for x in 0..half {
            let mut acc = cells[2 * y * side + 2 * x].clone();
            acc.merge(&cells[2 * y * side + 2 * x + 1]);
            acc.merge(&cells[(2 * y + 1) * side + 2 * x]);
            acc.merge(&cells[(2 * y + 1) * side + 2 * x + 1]);
            out.push(acc);
        }
    }
    out
}

fn project(stats: &[f64], w: &[f32], out: usize, dst: &mut [f32], stride: usize) {
    for o in 0..out {
        let v: f64 = stats.iter().enumerate().map(|(k, s)| s * w[k * out + o] as f64).sum();
        dst[o * stride] = v as f32;
    }
}

/// Deterministic toy encoder.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    config: EncoderConfig,
    hash: u64,
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let hash = config_hash(&config);
        Ok(Self { config, hash })
    }

    fn token_embedding(&self, token: &str) -> Vec<f32> {
        projection(fnv1a(self.hash ^ 0x7465_7874, token.as_bytes()), self.config.global_dim, 1)
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Encoder for ToyEncoder {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn encode_visual(&self, stack: &TangentStack) -> Result<(Tensor<f32>, [Tensor<f32>; SCALES]), EncoderError> {
        let shape = stack.shape().to_vec();
        let (f, t, c, p) = (shape[0], shape[1], shape[2], shape[3]);
        if p != self.config.patch {
            return Err(EncoderError::Shape(format!(
                "tangent stack patch {p} does not match encoder patch {}",
                self.config.patch
            )));
        }
        let k = 2 * c + ORIENT_BINS + 1;
        let seed = fnv1a(self.hash, &(c as u64).to_le_bytes());
        let wg = projection(seed, k, self.config.global_dim);
        let wl: Vec<Vec<f32>> = (0..SCALES)
            .map(|m| projection(seed.wrapping_add(m as u64 + 1), k, self.config.scale_channels[m]))
            .collect();
        let sizes = self.config.scale_sizes();

        let per_image: Vec<[Vec<CellSums>; SCALES]> = (0..f * t)
            .into_par_iter()
            .map(|i| {
                let s0 = fine_cells(stack, i / t, i % t);
                let s1 = coarsen(&s0, sizes[0]);
                let s2 = coarsen(&s1, sizes[1]);
                [s0, s1, s2]
            })
            .collect();

        let cg = self.config.global_dim;
        let mut vg = vec![0f32; f * t * cg];
        vg.par_chunks_mut(cg).zip(&per_image).for_each(|(dst, cells)| {
            let mut all = CellSums::new(c);
            for cell in &cells[SCALES - 1] {
                all.merge(cell);
            }
            project(&all.stats(), &wg, cg, dst, 1);
        });

        let mut locals = Vec::with_capacity(SCALES);
        for m in 0..SCALES {
            let (cm, hw) = (self.config.scale_channels[m], sizes[m] * sizes[m]);
            let mut data = vec![0f32; f * t * cm * hw];
            data.par_chunks_mut(cm * hw).zip(&per_image).for_each(|(dst, cells)| {
                for (pos, cell) in cells[m].iter().enumerate() {
                    project(&cell.stats(), &wl[m], cm, &mut dst[pos..], hw);
                }
            });
            locals.push(Tensor::new(vec![f, t, cm, sizes[m], sizes[m]], data).expect("local shape"));
        }
        let vg = Tensor::new(vec![f, t, cg], vg).expect("global shape");
        let locals: [Tensor<f32>; SCALES] = locals.try_into().expect("three scales");
        Ok((vg, locals))
    }

    fn encode_text(&self, text: &str) -> Result<(Tensor<f32>, Tensor<f32>), EncoderError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let (lt, cg) = (self.config.text_len, self.config.global_dim);
        let mut local = vec![0f32; lt * cg];
        let mut mean = vec![0f64; cg];
        let kept = tokens.len().min(lt);
        for (row, tok) in tokens.iter().take(lt).enumerate() {
            let e = self.token_embedding(tok);
            for (j, v) in e.iter().enumerate() {
                mean[j] += *v as f64 / kept as f64;
            }
            local[row * cg..(row + 1) * cg].copy_from_slice(&e);
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let global = mean.iter().map(|v| (v / norm) as f32).collect();
        Ok((
            Tensor::new(vec![1, cg], global).expect("global text shape"),
            Tensor::new(vec![lt, cg], local).expect("local text shape"),
        ))
    }
}
