//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tsal_core::geometry::{haversine, SphPoint};

// Metric loops in f64.

pub fn oracle_cc(p: &[f32], q: &[f32]) -> f64 {
    let n = p.len() as f64;
    let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        v.iter().map(|x| (x - m) / s).collect::<Vec<f64>>()
    };
    let (a, b) = (std(&p), std(&q));
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc / n
}

fn norm(v: &[f32]) -> Vec<f64> {
    let mut s = 0.0;
    for &x in v {
        s += x as f64;
    }
    v.iter().map(|&x| x as f64 / s).collect()
}

pub fn oracle_sim(p: &[f32], q: &[f32]) -> f64 {
    let (a, b) = (norm(p), norm(q));
    let mut s = 0.0;
    for i in 0..a.len() {
        s += if a[i] < b[i] { a[i] } else { b[i] };
    }
    s
}

pub fn oracle_kld(p: &[f32], q: &[f32]) -> f64 {
    let (a, b) = (norm(p), norm(q));
    let mut s = 0.0;
    for i in 0..a.len() {
        s += b[i] * (b[i] / (a[i] + 1e-7) + 1e-7).ln();
    }
    s
}

pub fn pt(lat_deg: f64, lon_deg: f64) -> SphPoint {
    SphPoint::from_degrees(lat_deg, lon_deg).unwrap()
}

// HDBSCAN reference: threshold-graph connectivity on the full mutual
// reachability matrix and recursive excess-of-mass selection.

struct Node {
    birth: f64,
    points: Vec<(usize, f64)>,
    children: Vec<Node>,
}

fn components(set: &[usize], below: f64, m: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    for s in 0..set.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![set[s]];
        let mut queue = vec![s];
        while let Some(a) = queue.pop() {
            for b in 0..set.len() {
                if !seen[b] && m[set[a]][set[b]] < below {
                    seen[b] = true;
                    comp.push(set[b]);
                    queue.push(b);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

fn grow(set: Vec<usize>, birth: f64, m: &[Vec<f64>], min_size: usize) -> Node {
    let mut node = Node {
        birth,
        points: Vec::new(),
        children: Vec::new(),
    };
    let mut current = set;
    let mut levels: Vec<f64> = Vec::new();
    for (i, &a) in current.iter().enumerate() {
        for &b in &current[i + 1..] {
            levels.push(m[a][b]);
        }
    }
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    for d in levels {
        if current.len() < 2 || !current.iter().any(|&a| current.iter().any(|&b| m[a][b] == d)) {
            continue;
        }
        let comps = components(&current, d, m);
        if comps.len() == 1 {
            continue;
        }
        let lambda = 1.0 / d;
        let big: Vec<&Vec<usize>> = comps.iter().filter(|c| c.len() >= min_size).collect();
        for c in &comps {
            if c.len() < min_size || big.len() >= 2 {
                node.points.extend(c.iter().map(|&p| (p, lambda)));
            }
        }
        match big.len() {
            0 => return node,
            1 => current = big[0].clone(),
            _ => {
                node.children = big.into_iter().map(|c| grow(c.clone(), lambda, m, min_size)).collect();
                return node;
            }
        }
    }
    node.points.extend(current.iter().map(|&p| (p, birth)));
    node
}

fn stability(n: &Node) -> f64 {
    n.points.iter().map(|&(_, l)| l - n.birth).sum()
}

fn select(n: &Node) -> (f64, Vec<Vec<usize>>) {
    let own = stability(n);
    let mut kids_score = 0.0;
    let mut kids = Vec::new();
    for c in &n.children {
        let (s, sel) = select(c);
        kids_score += s;
        kids.extend(sel);
    }
    if n.children.is_empty() || own >= kids_score {
        let mut m: Vec<usize> = n.points.iter().map(|&(p, _)| p).collect();
        m.sort();
        (own, vec![m])
    } else {
        (kids_score, kids)
    }
}

pub fn reference_hdbscan(points: &[SphPoint], mcs: usize, ms: usize, single: bool) -> Vec<i32> {
    let n = points.len();
    if n < ms || n < mcs {
        return vec![-1; n];
    }
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { haversine(points[i], points[j]) }).collect())
        .collect();
    let core: Vec<f64> = d
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r[ms - 1]
        })
        .collect();
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| d[i][j].max(core[i]).max(core[j]).max(1e-12)).collect())
        .collect();
    let root = grow((0..n).collect(), 0.0, &m, mcs);
    let mut clusters: Vec<Vec<usize>> = if single {
        let last = root.points.iter().map(|&(_, l)| l).fold(0.0, f64::max);
        select(&root)
            .1
            .into_iter()
            .map(|c| if c.len() == n { c.into_iter().filter(|&p| root.points.iter().any(|&(q, l)| q == p && l >= last)).collect() } else { c })
            .collect()
    } else {
        root.children.iter().flat_map(|c| select(c).1).collect()
    };
    clusters.sort_by_key(|c| c[0]);
    let mut labels = vec![-1; n];
    for (k, c) in clusters.iter().enumerate() {
        for &p in c {
            labels[p] = k as i32;
        }
    }
    labels
}

pub fn clumpy_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<SphPoint> {
    let centers: Vec<(f64, f64)> = (0..rng.random_range(1..=4))
        .map(|_| (rng.random_range(-60.0..60.0), rng.random_range(-180.0..180.0)))
        .collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                pt(rng.random_range(-89.0..89.0), rng.random_range(-180.0..180.0))
            } else {
                let (la, lo) = centers[rng.random_range(0..centers.len())];
                let spread = rng.random_range(1.0..8.0);
                pt(
                    (la + rng.random_range(-spread..spread)).clamp(-89.0, 89.0),
                    lo + rng.random_range(-spread..spread),
                )
            }
        })
        .collect()
}

pub fn partition(labels: &[i32]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

pub fn cap(rng: &mut ChaCha8Rng, center: SphPoint, radius_deg: f64, n: usize) -> Vec<SphPoint> {
    let mut out = Vec::new();
    while out.len() < n {
        let p = pt(rng.random_range(-90.0..90.0), rng.random_range(-180.0..180.0));
        if haversine(p, center).to_degrees() < radius_deg {
            out.push(p);
        }
    }
    out
}

