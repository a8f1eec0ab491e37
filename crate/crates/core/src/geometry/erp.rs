use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use rayon::prelude::*;

use super::gnomonic::{forward_in_frame, inverse_in_frame, TangentFrame};
use super::layout::ViewportLayout;
use super::sphere::{dot, SphPoint};
use super::GeometryError;
use crate::tensor::{SparseMatrix, Tensor};

/// Equirectangular pixel grid, `width = 2 * height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ErpGrid {
    height: usize,
    width: usize,
}

impl ErpGrid {
    pub fn new(height: usize, width: usize) -> Result<Self, GeometryError> {
        if height == 0 || width != 2 * height {
            return Err(GeometryError::InvalidGrid { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn with_height(height: usize) -> Result<Self, GeometryError> {
        Self::new(height, 2 * height)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> SphPoint {
        SphPoint {
            lat: FRAC_PI_2 - (row as f64 + 0.5) * PI / self.height as f64,
            lon: -PI + (col as f64 + 0.5) * 2.0 * PI / self.width as f64,
        }
    }

    /// Pixel containing `p`.
    pub fn pixel_of(&self, p: SphPoint) -> (usize, usize) {
        let (x, y) = self.continuous(p);
        let row = (y + 0.5).floor().clamp(0.0, (self.height - 1) as f64) as usize;
        let col = ((x + 0.5).floor() as isize).rem_euclid(self.width as isize) as usize;
        (row, col)
    }

    /// Continuous coordinate where pixel `(r, c)` sits at `(c, r)`.
    fn continuous(&self, p: SphPoint) -> (f64, f64) {
        let x = (p.lon + PI) / (2.0 * PI) * self.width as f64 - 0.5;
        let y = (FRAC_PI_2 - p.lat) / PI * self.height as f64 - 0.5;
        (x, y)
    }

    /// Bilinear taps with longitude wraparound and latitude clamping.
    pub fn bilinear_taps(&self, p: SphPoint) -> [(usize, f64); 4] {
        let (x, y) = self.continuous(p);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let fy = y - y0 as f64;
        let xf = x.floor();
        let fx = x - xf;
        let w = self.width as isize;
        let x0 = (xf as isize).rem_euclid(w) as usize;
        let x1 = (xf as isize + 1).rem_euclid(w) as usize;
        [
            (y0 * self.width + x0, (1.0 - fy) * (1.0 - fx)),
            (y0 * self.width + x1, (1.0 - fy) * fx),
            (y1 * self.width + x0, fy * (1.0 - fx)),
            (y1 * self.width + x1, fy * fx),
        ]
    }
}

/// Per-pixel salience on a `height x width` grid (ERP or tangent patch).
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, GeometryError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(GeometryError::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Divides by the maximum when it is positive.
    pub fn max_normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            self.data.iter_mut().for_each(|v| *v /= m);
        }
        self
    }

    /// Half-pixel-centered bilinear resize.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let ys = crate::tensor::graph_resample_taps(self.height, height);
        let xs = crate::tensor::graph_resample_taps(self.width, width);
        let mut data = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v = (1.0 - fy) * ((1.0 - fx) * self.get(y0, x0) as f64 + fx * self.get(y0, x1) as f64)
                    + fy * ((1.0 - fx) * self.get(y1, x0) as f64 + fx * self.get(y1, x1) as f64);
                data.push(v as f32);
            }
        }
        Self { height, width, data }
    }
}

/// Per-viewport output maps, `Y_projected`: logical shape `(1, P, P, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMapSet {
    patch: usize,
    maps: Vec<SaliencyMap>,
}

impl SaliencyMapSet {
    pub fn new(maps: Vec<SaliencyMap>) -> Result<Self, GeometryError> {
        let patch = maps.first().map(|m| m.height()).unwrap_or(0);
        if patch == 0 || maps.iter().any(|m| m.height() != patch || m.width() != patch) {
            return Err(GeometryError::ShapeMismatch("tangent maps must be non-empty P x P squares".into()));
        }
        Ok(Self { patch, maps })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn count(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[SaliencyMap] {
        &self.maps
    }

    pub fn shape(&self) -> [usize; 4] {
        [1, self.patch, self.patch, self.maps.len()]
    }

    /// Viewport-major flattening, matching [`BlendPlan`] columns.
    pub fn flatten(&self) -> Vec<f32> {
        self.maps.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

/// A window of `F` equirectangular frames, planar `(C, H, W)` per frame,
/// values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ErpFrameSequence {
    grid: ErpGrid,
    channels: usize,
    frames: Vec<Vec<f32>>,
}

impl ErpFrameSequence {
    pub fn new(grid: ErpGrid, channels: usize, frames: Vec<Vec<f32>>) -> Result<Self, GeometryError> {
        if channels == 0 || frames.is_empty() || frames.iter().any(|f| f.len() != channels * grid.len()) {
            return Err(GeometryError::ShapeMismatch(format!(
                "frames must be non-empty with {channels} x {} x {} values each",
                grid.height(),
                grid.width()
            )));
        }
        Ok(Self { grid, channels, frames })
    }

    pub fn grid(&self) -> ErpGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        &self.frames[f]
    }
}

/// `X_projected`: tangent images of shape `(F, T, C, P, P)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentStack {
    layout: ViewportLayout,
    data: Tensor<f32>,
}

impl TangentStack {
    pub fn new(layout: ViewportLayout, data: Tensor<f32>) -> Result<Self, GeometryError> {
        let s = data.shape();
        let p = layout.patch();
        if s.len() != 5 || s[1] != layout.count() || s[3] != p || s[4] != p {
            return Err(GeometryError::ShapeMismatch(format!(
                "tangent stack {s:?} does not match layout of {} viewports at {p}px",
                layout.count()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &ViewportLayout {
        &self.layout
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Pixels of tangent image `(f, t)` for channel `c`.
    pub fn image(&self, f: usize, t: usize, c: usize) -> &[f32] {
        let s = self.data.shape();
        let pp = s[3] * s[4];
        let off = ((f * s[1] + t) * s[2] + c) * pp;
        &self.data.data()[off..off + pp]
    }
}

/// Precomputed ERP sampling taps for every tangent pixel of a layout.
#[derive(Clone, Debug)]
pub struct TangentSampler {
    grid: ErpGrid,
    layout: ViewportLayout,
    taps: Vec<[(usize, f64); 4]>,
}

impl TangentSampler {
    pub fn new(layout: &ViewportLayout, grid: ErpGrid) -> Self {
        let p = layout.patch();
        let fov = layout.fov();
        let taps = layout
            .centers()
            .par_iter()
            .flat_map_iter(|&c| {
                let frame = TangentFrame::at(c);
                (0..p * p).map(move |k| {
                    let (j, i) = (k / p, k % p);
                    let dir = inverse_in_frame(&frame, i as f64 + 0.5, j as f64 + 0.5, fov, p);
                    grid.bilinear_taps(SphPoint::from_vec3(dir))
                })
            })
            .collect();
        Self {
            grid,
            layout: layout.clone(),
            taps,
        }
    }

    pub fn project(&self, frames: &ErpFrameSequence) -> Result<TangentStack, GeometryError> {
        if frames.grid() != self.grid {
            return Err(GeometryError::ShapeMismatch(format!(
                "frames on {:?}, sampler built for {:?}",
                frames.grid(),
                self.grid
            )));
        }
        let (nf, nt, nc, p) = (frames.len(), self.layout.count(), frames.channels(), self.layout.patch());
        let pp = p * p;
        let hw = self.grid.len();
        let mut out = vec![0.0f32; nf * nt * nc * pp];
        out.par_chunks_mut(nc * pp).enumerate().for_each(|(ft, dst)| {
            let (f, t) = (ft / nt, ft % nt);
            let src = frames.frame(f);
            let taps = &self.taps[t * pp..(t + 1) * pp];
            for c in 0..nc {
                let plane = &src[c * hw..(c + 1) * hw];
                for (o, tap) in dst[c * pp..(c + 1) * pp].iter_mut().zip(taps) {
                    *o = tap.iter().map(|&(idx, w)| w * plane[idx] as f64).sum::<f64>() as f32;
                }
            }
        });
        let data = Tensor::new(vec![nf, nt, nc, p, p], out).expect("shape computed above");
        TangentStack::new(self.layout.clone(), data)
    }
}

/// Samples every frame of `frames` into the tangent images of `layout`.
pub fn project_to_tangents(frames: &ErpFrameSequence, layout: &ViewportLayout) -> Result<TangentStack, GeometryError> {
    TangentSampler::new(layout, frames.grid()).project(frames)
}

/// Linear map from viewport-major tangent pixels onto an ERP grid.
///
/// Each ERP pixel is a weighted average over the viewports whose square patch
/// contains it, with weight `cos(angular distance to the viewport center)`;
/// within a patch the value is sampled bilinearly.
#[derive(Clone, Debug)]
pub struct BlendPlan {
    grid: ErpGrid,
    patch: usize,
    count: usize,
    matrix: Arc<SparseMatrix>,
}

impl BlendPlan {
    /// `layout.patch()` is the resolution of the maps being blended.
    pub fn new(layout: &ViewportLayout, grid: ErpGrid) -> Result<Self, GeometryError> {
        let p = layout.patch();
        let fov = layout.fov();
        let frames: Vec<TangentFrame> = layout.centers().iter().map(|&c| TangentFrame::at(c)).collect();
        let rows: Vec<Result<Vec<(usize, f64)>, GeometryError>> = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let (r, c) = (k / grid.width(), k % grid.width());
                let dir = grid.pixel_center(r, c).to_vec3();
                let mut entries = Vec::new();
                let mut total = 0.0;
                for (t, frame) in frames.iter().enumerate() {
                    let Some(pc) = forward_in_frame(frame, dir, fov, p) else {
                        continue;
                    };
                    if !pc.in_patch(p) {
                        continue;
                    }
                    let w = dot(frame.forward, dir);
                    total += w;
                    for (idx, tw) in patch_taps(pc.u - 0.5, pc.v - 0.5, p) {
                        entries.push((t * p * p + idx, w * tw));
                    }
                }
                if entries.is_empty() {
                    return Err(GeometryError::UncoveredPixel { row: r, col: c });
                }
                entries.iter_mut().for_each(|e| e.1 /= total);
                Ok(entries)
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            grid,
            patch: p,
            count: layout.count(),
            matrix: Arc::new(SparseMatrix::from_rows(layout.count() * p * p, rows)),
        })
    }

    pub fn grid(&self) -> ErpGrid {
        self.grid
    }

    pub fn matrix(&self) -> &Arc<SparseMatrix> {
        &self.matrix
    }

    /// Blends one viewport-major plane without normalization.
    pub fn apply(&self, flat: &[f32]) -> Result<Vec<f64>, GeometryError> {
        if flat.len() != self.count * self.patch * self.patch {
            return Err(GeometryError::ShapeMismatch(format!(
                "{} tangent values, plan expects {} x {}²",
                flat.len(),
                self.count,
                self.patch
            )));
        }
        let x: Vec<f64> = flat.iter().map(|&v| v as f64).collect();
        Ok(self.matrix.apply_f64(&x))
    }

    /// Blends a map set and max-normalizes the result.
    pub fn blend(&self, maps: &SaliencyMapSet) -> Result<SaliencyMap, GeometryError> {
        if maps.patch() != self.patch || maps.count() != self.count {
            return Err(GeometryError::ShapeMismatch(format!(
                "map set {:?} vs plan of {} viewports at {}px",
                maps.shape(),
                self.count,
                self.patch
            )));
        }
        let v = self.apply(&maps.flatten())?;
        let data = v.into_iter().map(|x| x as f32).collect();
        Ok(SaliencyMap::new(self.grid.height(), self.grid.width(), data)?.max_normalized())
    }
}

/// Bilinear taps into a `p x p` patch at pixel-center coordinates, clamped.
fn patch_taps(x: f64, y: f64, p: usize) -> [(usize, f64); 4] {
    let max = (p - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(p - 1), (y0 + 1).min(p - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    [
        (y0 * p + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * p + x1, (1.0 - fy) * fx),
        (y1 * p + x0, fy * (1.0 - fx)),
        (y1 * p + x1, fy * fx),
    ]
}

/// Reverse tangent projection of per-viewport maps onto `out`.
pub fn blend_inverse(maps: &SaliencyMapSet, layout: &ViewportLayout, out: ErpGrid) -> Result<SaliencyMap, GeometryError> {
    BlendPlan::new(&layout.with_patch(maps.patch()), out)?.blend(maps)
}
