use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hdbscan::hdbscan;
use super::{DataError, DatasetConfig};
use crate::geometry::{haversine, slerp, ErpGrid, SaliencyMap, SphPoint};

/// A salient region of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    /// Salience-weighted mean direction.
    pub centroid: SphPoint,
    /// Row-major ERP pixel indices, ascending.
    pub members: Vec<usize>,
}

/// A salient region tracked over consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SalientEvent {
    pub id: usize,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    /// One entry per frame of `start..=end`.
    pub centroids: Vec<SphPoint>,
    pub members: Vec<Vec<usize>>,
    /// Frames filled by interpolation rather than observed.
    pub bridged: Vec<bool>,
    pub description: Option<String>,
}

impl SalientEvent {
    pub fn span(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }

    pub fn members_at(&self, frame: usize) -> Option<&[usize]> {
        self.contains(frame).then(|| self.members[frame - self.start].as_slice())
    }
}

/// One stride-1 window of an event: frames `start..start + frames`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventTriplet {
    pub event: usize,
    pub start: usize,
    pub frames: usize,
    pub description: String,
}

impl EventTriplet {
    pub fn last_frame(&self) -> usize {
        self.start + self.frames - 1
    }

    pub fn frame_indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.frames
    }
}

/// Salient regions of a smoothed frame map: pixels at or above
/// `salient_threshold` of the maximum, subsampled by salience to at most
/// `max_points`, clustered with HDBSCAN under the great-circle distance.
pub fn cluster_frame(map: &SaliencyMap, cfg: &DatasetConfig, seed: u64) -> Result<Vec<Cluster>, DataError> {
    let grid = ErpGrid::new(map.height(), map.width())?;
    let max = map.max();
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let cut = cfg.salient_threshold * max;
    let mut salient: Vec<usize> = (0..map.data().len()).filter(|&k| map.data()[k] >= cut).collect();
    if salient.len() > cfg.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = salient.iter().map(|&k| map.data()[k] as f64).collect();
        let picked = rand::seq::index::sample_weighted(&mut rng, salient.len(), |i| weights[i], cfg.max_points)
            .map_err(|e| DataError::Invalid(format!("salience sampling: {e}")))?;
        let mut keep: Vec<usize> = picked.into_iter().map(|i| salient[i]).collect();
        keep.sort_unstable();
        salient = keep;
    }
    let points: Vec<SphPoint> = salient
        .iter()
        .map(|&k| grid.pixel_center(k / grid.width(), k % grid.width()))
        .collect();
    let labels = hdbscan(&points, cfg.hdbscan())?;
    let count = labels.iter().map(|&l| l + 1).max().unwrap_or(0) as usize;
    let mut clusters = Vec::with_capacity(count);
    for c in 0..count as i32 {
        let mut sum = [0.0f64; 3];
        let mut members = Vec::new();
        for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == c) {
            let w = map.data()[salient[i]] as f64;
            let v = points[i].to_vec3();
            (0..3).for_each(|d| sum[d] += w * v[d]);
            members.push(salient[i]);
        }
        clusters.push(Cluster {
            centroid: SphPoint::from_vec3(sum),
            members,
        });
    }
    Ok(clusters)
}

struct Track {
    event: SalientEvent,
    last_seen: usize,
}

/// Links per-frame clusters into events. Each frame, candidate pairs of an
/// open event and a cluster within `tau` of the event's last observed
/// centroid are taken greedily by increasing distance, so every cluster
/// joins at most one event. An event stays open while it has missed at most
/// `gap_fill` consecutive frames; missed frames are bridged by interpolating
/// the centroid and repeating the last members. Unmatched clusters start new
/// events. Ids follow creation order.
pub fn form_subvolumes(frames: &[Vec<Cluster>], tau: f64, gap_fill: usize) -> Vec<SalientEvent> {
    let mut tracks: Vec<Track> = Vec::new();
    for (f, clusters) in frames.iter().enumerate() {
        let mut pairs = Vec::new();
        for (e, t) in tracks.iter().enumerate() {
            if f - t.last_seen - 1 > gap_fill {
                continue;
            }
            let last = *t.event.centroids.last().unwrap();
            for (c, cl) in clusters.iter().enumerate() {
                let d = haversine(last, cl.centroid);
                if d <= tau {
                    pairs.push((d, e, c));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut event_taken = vec![false; tracks.len()];
        let mut cluster_taken = vec![false; clusters.len()];
        for (_, e, c) in pairs {
            if event_taken[e] || cluster_taken[c] {
                continue;
            }
            event_taken[e] = true;
            cluster_taken[c] = true;
            let t = &mut tracks[e];
            let gap = f - t.last_seen - 1;
            let from = *t.event.centroids.last().unwrap();
            let to = clusters[c].centroid;
            let held = t.event.members.last().unwrap().clone();
            for g in 1..=gap {
                t.event.centroids.push(slerp(from, to, g as f64 / (gap + 1) as f64));
                t.event.members.push(held.clone());
                t.event.bridged.push(true);
            }
            t.event.centroids.push(to);
            t.event.members.push(clusters[c].members.clone());
            t.event.bridged.push(false);
            t.event.end = f;
            t.last_seen = f;
        }
        for (c, cl) in clusters.iter().enumerate() {
            if cluster_taken[c] {
                continue;
            }
            tracks.push(Track {
                event: SalientEvent {
                    id: tracks.len(),
                    start: f,
                    end: f,
                    centroids: vec![cl.centroid],
                    members: vec![cl.members.clone()],
                    bridged: vec![false],
                    description: None,
                },
                last_seen: f,
            });
        }
    }
    tracks.into_iter().map(|t| t.event).collect()
}

/// Splits a ground-truth map among the events present in one frame. A pixel
/// within `dilation` of some member pixel goes to the event owning the
/// nearest such member (lowest index on ties); each output keeps `gt` on its
/// own pixels, zero elsewhere, and is max-normalized.
pub fn split_event_maps(gt: &SaliencyMap, members: &[&[usize]], dilation: f64) -> Result<Vec<SaliencyMap>, DataError> {
    let grid = ErpGrid::new(gt.height(), gt.width())?;
    let (h, w) = (grid.height(), grid.width());
    if let Some(e) = members.iter().position(|m| m.is_empty()) {
        return Err(DataError::EmptyMembers(e));
    }
    if let Some(&k) = members.iter().flat_map(|m| m.iter()).find(|&&k| k >= grid.len()) {
        return Err(DataError::Invalid(format!("member pixel {k} outside a {h}x{w} map")));
    }
    let cos_d = dilation.min(PI).cos();
    let row_step = PI / h as f64;
    let lats: Vec<(f64, f64)> = (0..h).map(|r| grid.pixel_center(r, 0).lat.sin_cos()).collect();
    let lons: Vec<[f64; 2]> = (0..w).map(|c| {
        let (s, co) = grid.pixel_center(0, c).lon.sin_cos();
        [co, s]
    }).collect();
    let mut best = vec![f64::NEG_INFINITY; grid.len()];
    let mut owner = vec![usize::MAX; grid.len()];
    for (e, ms) in members.iter().enumerate() {
        for &k in *ms {
            let (r0, c0) = (k / w, k % w);
            let p = grid.pixel_center(r0, c0);
            let v = p.to_vec3();
            let reach = (dilation / row_step).ceil() as usize + 1;
            let rows = r0.saturating_sub(reach)..(r0 + reach + 1).min(h);
            for r in rows {
                let (sl, cl) = lats[r];
                // longitudes where cos(dist) can reach cos_d on this row
                let denom = cl * p.lat.cos();
                let ratio = if denom > 1e-12 { (cos_d - sl * p.lat.sin()) / denom } else { -2.0 };
                let cols: Box<dyn Iterator<Item = usize>> = if ratio <= -1.0 || dilation >= PI {
                    Box::new(0..w)
                } else if ratio > 1.0 {
                    continue;
                } else {
                    let half = (ratio.acos() / (2.0 * PI) * w as f64).ceil() as isize + 1;
                    if 2 * half + 1 >= w as isize {
                        Box::new(0..w)
                    } else {
                        Box::new((-half..=half).map(move |d| (c0 as isize + d).rem_euclid(w as isize) as usize))
                    }
                };
                for c in cols {
                    let q = [cl * lons[c][0], cl * lons[c][1], sl];
                    let d = v[0] * q[0] + v[1] * q[1] + v[2] * q[2];
                    if d < cos_d && !(r == r0 && c == c0) {
                        continue;
                    }
                    let i = r * w + c;
                    if d > best[i] || (d == best[i] && e < owner[i]) {
                        best[i] = d;
                        owner[i] = e;
                    }
                }
            }
        }
    }
    let out = (0..members.len())
        .map(|e| {
            let data = gt
                .data()
                .iter()
                .zip(&owner)
                .map(|(&v, &o)| if o == e { v } else { 0.0 })
                .collect();
            SaliencyMap::new(h, w, data).map(SaliencyMap::max_normalized)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

/// Number of stride-1 windows of length `frames` inside a span, if any.
pub fn window_count(span: usize, frames: usize) -> Option<usize> {
    (frames > 0 && span >= frames).then(|| span - frames + 1)
}

/// Every stride-1 window of `frames` consecutive frames that lies inside the
/// event span.
pub fn window_shift_augment(event: &SalientEvent, frames: usize) -> Result<Vec<EventTriplet>, DataError> {
    let span = event.span();
    let n = window_count(span, frames).ok_or(DataError::SpanTooShort { span, frames })?;
    let description = event.description.clone().unwrap_or_default();
    Ok((0..n)
        .map(|i| EventTriplet {
            event: event.id,
            start: event.start + i,
            frames,
            description: description.clone(),
        })
        .collect())
}
