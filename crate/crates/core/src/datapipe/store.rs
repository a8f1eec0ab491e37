//! On-disk dataset construction.
//!
//! Input, one directory per video under a root:
//!
//! ```text
//! <video>/frames/*.png      ERP frames, ordered by file name
//! <video>/fixations.csv     header `frame,lat_deg,lon_deg[,weight]`, frames 0-based
//! <video>/captions.tsv      `event_id<TAB>description` per line
//! ```
//!
//! Output store:
//!
//! ```text
//! manifest.toml
//! <video>/<event_id>/<window_start>.frames.lst   one frame path per line
//! <video>/<event_id>/<window_start>.text.txt
//! <video>/<event_id>/<window_start>.gt.png       event map of the window's last frame
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::events::{cluster_frame, form_subvolumes, split_event_maps, window_shift_augment, SalientEvent};
use super::{DataError, DatasetConfig};
use crate::geometry::{spherical_gaussian_smooth, ErpGrid, FixationMap, SaliencyMap, SphPoint};
use crate::imageio::write_map_png;

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Per-video counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoStats {
    pub id: String,
    pub frames: usize,
    /// No caption file; nothing else was processed.
    pub skipped: bool,
    pub events_found: usize,
    pub events_kept: usize,
    pub discarded_uncaptioned: usize,
    pub discarded_short: usize,
    pub triplets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub skipped_videos: usize,
    pub total_triplets: usize,
    pub config: DatasetConfig,
    pub videos: Vec<VideoStats>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        toml::from_str(&s).map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let s = toml::to_string(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        fs::write(path, s).map_err(|e| DataError::io(path, e))
    }

    /// Ids of videos that produced at least one triplet.
    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().filter(|v| v.triplets > 0).map(|v| v.id.clone()).collect()
    }
}

/// One stored triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletRecord {
    pub video: String,
    pub event: usize,
    pub start: usize,
    pub frames: Vec<PathBuf>,
    pub text: String,
    pub gt: PathBuf,
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| DataError::io(dir, e)))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_captions(path: &Path) -> Result<BTreeMap<usize, String>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let parse = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (id, desc) = line
            .split_once('\t')
            .ok_or_else(|| parse("expected `event_id<TAB>description`".into()))?;
        let id: usize = id.trim().parse().map_err(|e| parse(format!("event id {id:?}: {e}")))?;
        let desc = desc.trim();
        if desc.is_empty() {
            return Err(parse("empty description".into()));
        }
        if out.insert(id, desc.to_string()).is_some() {
            return Err(parse(format!("duplicate event id {id}")));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct FixationRow {
    frame: usize,
    lat_deg: f64,
    lon_deg: f64,
    #[serde(default)]
    weight: Option<f32>,
}

fn read_fixations(path: &Path, frames: usize) -> Result<Vec<FixationMap>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::io(path, e))?;
    let headers = reader.headers().map_err(|e| DataError::io(path, e))?.clone();
    let mut per_frame = vec![Vec::new(); frames];
    for rec in reader.records() {
        let parse = |line: usize, msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: FixationRow = rec.deserialize(Some(&headers)).map_err(|e| parse(line, e.to_string()))?;
        if row.frame >= frames {
            return Err(parse(line, format!("frame {} but the video has {frames} frames", row.frame)));
        }
        let p = SphPoint::from_degrees(row.lat_deg, row.lon_deg).map_err(|e| parse(line, e.to_string()))?;
        per_frame[row.frame].push((p, row.weight.unwrap_or(1.0)));
    }
    per_frame
        .into_iter()
        .map(|pts| FixationMap::new(pts).map_err(DataError::from))
        .collect()
}

/// Builds the triplet store for every video directory under `videos_root`.
/// Each video goes through smoothing, per-frame clustering, sub-volume
/// formation, caption attachment, map splitting and window-shift
/// augmentation. A video without `captions.tsv` is skipped with a warning.
pub fn build_dataset(videos_root: &Path, out_dir: &Path, cfg: &DatasetConfig) -> Result<Manifest, DataError> {
    cfg.validate()?;
    let grid = ErpGrid::with_height(cfg.gt_height)?;
    let root = fs::canonicalize(videos_root).map_err(|e| DataError::io(videos_root, e))?;
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let mut videos = Vec::new();
    for dir in sorted_dir(&root)?.into_iter().filter(|p| p.is_dir()) {
        let stats = build_video(&dir, out_dir, cfg, grid)?;
        info!(
            "{}: {} events, {} kept, {} triplets",
            stats.id, stats.events_found, stats.events_kept, stats.triplets
        );
        videos.push(stats);
    }
    let manifest = Manifest {
        skipped_videos: videos.iter().filter(|v| v.skipped).count(),
        total_triplets: videos.iter().map(|v| v.triplets).sum(),
        config: cfg.clone(),
        videos,
    };
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

fn build_video(dir: &Path, out_dir: &Path, cfg: &DatasetConfig, grid: ErpGrid) -> Result<VideoStats, DataError> {
    let id = file_name(dir);
    let frame_dir = dir.join("frames");
    let frames: Vec<PathBuf> = sorted_dir(&frame_dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    let mut stats = VideoStats {
        id: id.clone(),
        frames: frames.len(),
        ..Default::default()
    };
    let caption_path = dir.join("captions.tsv");
    if !caption_path.is_file() {
        warn!("{id}: no captions.tsv, video skipped");
        stats.skipped = true;
        return Ok(stats);
    }
    let mut captions = read_captions(&caption_path)?;
    let fixations = read_fixations(&dir.join("fixations.csv"), frames.len())?;

    let clusters = fixations
        .par_iter()
        .enumerate()
        .map(|(f, fix)| {
            let map = spherical_gaussian_smooth(fix, cfg.sigma_deg, grid);
            let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(f as u64);
            cluster_frame(&map, cfg, seed).map(|c| (map, c))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (maps, clusters): (Vec<SaliencyMap>, Vec<_>) = clusters.into_iter().unzip();
    let mut events = form_subvolumes(&clusters, cfg.tau_deg.to_radians(), cfg.gap_fill);
    stats.events_found = events.len();

    let mut windows = Vec::new();
    for ev in &mut events {
        ev.description = captions.remove(&ev.id);
        if ev.description.is_none() {
            stats.discarded_uncaptioned += 1;
        } else if ev.span() < cfg.frames {
            stats.discarded_short += 1;
        } else {
            stats.events_kept += 1;
            windows.extend(window_shift_augment(ev, cfg.frames)?);
        }
    }
    for unused in captions.keys() {
        warn!("{id}: caption for event {unused}, which was not found");
    }

    let needed: BTreeSet<usize> = windows.iter().map(|w| w.last_frame()).collect();
    let splits: BTreeMap<usize, BTreeMap<usize, SaliencyMap>> = needed
        .into_par_iter()
        .map(|f| split_frame(&maps[f], &events, f, cfg.dilation_deg.to_radians()).map(|s| (f, s)))
        .collect::<Result<_, _>>()?;

    for w in &windows {
        let ev_dir = out_dir.join(&id).join(w.event.to_string());
        fs::create_dir_all(&ev_dir).map_err(|e| DataError::io(&ev_dir, e))?;
        let stem = ev_dir.join(w.start.to_string());
        let lst: String = w
            .frame_indices()
            .map(|f| format!("{}\n", frames[f].display()))
            .collect();
        write_file(&with_suffix(&stem, "frames.lst"), lst.as_bytes())?;
        write_file(&with_suffix(&stem, "text.txt"), w.description.as_bytes())?;
        write_map_png(&with_suffix(&stem, "gt.png"), &splits[&w.last_frame()][&w.event])?;
        stats.triplets += 1;
    }
    Ok(stats)
}

/// Event maps for every event present at frame `f`, keyed by event id.
fn split_frame(
    gt: &SaliencyMap,
    events: &[SalientEvent],
    f: usize,
    dilation: f64,
) -> Result<BTreeMap<usize, SaliencyMap>, DataError> {
    let present: Vec<&SalientEvent> = events.iter().filter(|e| e.contains(f)).collect();
    let members: Vec<&[usize]> = present.iter().map(|e| e.members_at(f).unwrap()).collect();
    let maps = split_event_maps(gt, &members, dilation)?;
    Ok(present.iter().map(|e| e.id).zip(maps).collect())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// All triplets of a store, ordered by video, event and window start.
/// Relative frame paths are resolved against the list file's directory.
pub fn read_store(dir: &Path) -> Result<Vec<TripletRecord>, DataError> {
    let mut out = Vec::new();
    for vdir in sorted_dir(dir)?.into_iter().filter(|p| p.is_dir()) {
        let video = file_name(&vdir);
        for edir in sorted_dir(&vdir)?.into_iter().filter(|p| p.is_dir()) {
            let Ok(event) = file_name(&edir).parse::<usize>() else {
                continue;
            };
            for lst in sorted_dir(&edir)? {
                let name = file_name(&lst);
                let Some(start) = name.strip_suffix(".frames.lst") else {
                    continue;
                };
                let start: usize = start.parse().map_err(|e| DataError::Parse {
                    path: lst.clone(),
                    line: 0,
                    msg: format!("window start {start:?}: {e}"),
                })?;
                let stem = edir.join(start.to_string());
                let body = fs::read_to_string(&lst).map_err(|e| DataError::io(&lst, e))?;
                let frames = body
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        let p = PathBuf::from(l.trim());
                        if p.is_absolute() {
                            p
                        } else {
                            edir.join(p)
                        }
                    })
                    .collect();
                let text_path = with_suffix(&stem, "text.txt");
                let text = fs::read_to_string(&text_path).map_err(|e| DataError::io(&text_path, e))?;
                out.push(TripletRecord {
                    video: video.clone(),
                    event,
                    start,
                    frames,
                    text,
                    gt: with_suffix(&stem, "gt.png"),
                });
            }
        }
    }
    out.sort_by(|a, b| (&a.video, a.event, a.start).cmp(&(&b.video, b.event, b.start)));
    Ok(out)
}
