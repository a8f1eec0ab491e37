//! PNG reading and writing for ERP frames, tangent images and saliency maps.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use thiserror::Error;

use crate::geometry::{ErpFrameSequence, ErpGrid, GeometryError, SaliencyMap};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{path}: {w}x{h} is not a 2:1 equirectangular image")]
    NotEquirectangular { path: PathBuf, w: u32, h: u32 },
    #[error("{path}: size {got:?} differs from earlier frames {want:?}")]
    SizeMismatch {
        path: PathBuf,
        got: (u32, u32),
        want: (u32, u32),
    },
    #[error("no frames given")]
    NoFrames,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ImageError {
    ImageError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// An RGB image as planar `(3, H, W)` values in [0, 1].
pub fn read_rgb_planar(path: &Path) -> Result<(u32, u32, Vec<f32>), ImageError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let n = (w * h) as usize;
    let mut out = vec![0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok((h, w, out))
}

/// Loads a window of 2:1 frames of identical size.
pub fn load_frame_sequence(paths: &[PathBuf]) -> Result<ErpFrameSequence, ImageError> {
    let first = paths.first().ok_or(ImageError::NoFrames)?;
    let mut frames = Vec::with_capacity(paths.len());
    let mut size = None;
    for p in paths {
        let (h, w, data) = read_rgb_planar(p)?;
        match size {
            None => {
                if w != 2 * h {
                    return Err(ImageError::NotEquirectangular { path: first.clone(), w, h });
                }
                size = Some((w, h));
            }
            Some(s) if s != (w, h) => {
                return Err(ImageError::SizeMismatch {
                    path: p.clone(),
                    got: (w, h),
                    want: s,
                })
            }
            _ => {}
        }
        frames.push(data);
    }
    let (w, h) = size.unwrap();
    let grid = ErpGrid::new(h as usize, w as usize)?;
    Ok(ErpFrameSequence::new(grid, 3, frames)?)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a planar `(C, H, W)` image with 1 or 3 channels in [0, 1].
pub fn write_planar_png(path: &Path, channels: usize, h: usize, w: usize, data: &[f32]) -> Result<(), ImageError> {
    let n = h * w;
    let res = if channels == 1 {
        GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(data[y as usize * w + x as usize])])).save(path)
    } else {
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([to_u8(data[i]), to_u8(data[n + i]), to_u8(data[2 * n + i])])
        })
        .save(path)
    };
    res.map_err(|e| io_err(path, e))
}

/// 8-bit grayscale PNG of a map with values in [0, 1].
pub fn write_map_png(path: &Path, map: &SaliencyMap) -> Result<(), ImageError> {
    write_planar_png(path, 1, map.height(), map.width(), map.data())
}

/// Reads a grayscale (or RGB, converted to luma) PNG as a map in [0, 1].
pub fn read_map_png(path: &Path) -> Result<SaliencyMap, ImageError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    Ok(SaliencyMap::new(h as usize, w as usize, data)?)
}
