//! HDBSCAN over an arbitrary metric.
//!
//! Mutual-reachability distances from core distances, a minimum spanning
//! tree, and a top-down walk of the single-linkage hierarchy that builds the
//! condensed tree directly. Edges of equal weight are removed together, so
//! ties split a cluster into several children at once and the result does
//! not depend on input order. Clusters are selected by excess of mass with
//! the root excluded.

use super::DataError;
use crate::geometry::{haversine, SphPoint};

/// Distances below this are clamped so `λ = 1/d` stays finite.
const MIN_DISTANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    /// Lets the root be selected, so a single dense group forms one cluster.
    /// Root members are the points that stay until its last split or
    /// dissolution.
    pub allow_single_cluster: bool,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 25,
            min_samples: 10,
            allow_single_cluster: false,
        }
    }
}

impl HdbscanParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.min_cluster_size < 2 || self.min_samples < 1 {
            return Err(DataError::Invalid(format!(
                "min_cluster_size must be >= 2 and min_samples >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Cluster labels `0..k` per point, `-1` for noise. Clusters are numbered by
/// their smallest member index.
pub fn hdbscan(points: &[SphPoint], params: HdbscanParams) -> Result<Vec<i32>, DataError> {
    hdbscan_with(points.len(), |i, j| haversine(points[i], points[j]), params)
}

/// [`hdbscan`] over `n` items with a caller-supplied symmetric distance.
pub fn hdbscan_with(n: usize, dist: impl Fn(usize, usize) -> f64 + Sync, params: HdbscanParams) -> Result<Vec<i32>, DataError> {
    params.validate()?;
    if n < params.min_samples || n < params.min_cluster_size {
        return Ok(vec![-1; n]);
    }
    let core = core_distances(n, &dist, params.min_samples);
    let mreach = |i: usize, j: usize| dist(i, j).max(core[i]).max(core[j]).max(MIN_DISTANCE);
    let mst = prim(n, mreach);
    let tree = condense(n, mst, params.min_cluster_size);
    Ok(label(n, &tree, params.allow_single_cluster))
}

/// Distance to the `k`-th nearest item, counting the item itself.
fn core_distances(n: usize, dist: &(impl Fn(usize, usize) -> f64 + Sync), k: usize) -> Vec<f64> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).map(|j| if i == j { 0.0 } else { dist(i, j) }).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Dense Prim's algorithm; returns `(weight, a, b)` edges.
fn prim(n: usize, w: impl Fn(usize, usize) -> f64) -> Vec<(f64, usize, usize)> {
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = w(cur, j);
            if d < best[j] {
                best[j] = d;
                from[j] = cur;
            }
            if next == usize::MAX || best[j] < best[next] {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((best[next], from[next], next));
        cur = next;
    }
    edges
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// A node of the condensed tree.
#[derive(Debug)]
struct CondensedCluster {
    birth: f64,
    /// Points with the λ at which they left this cluster (falling out or
    /// passing to a child).
    points: Vec<(usize, f64)>,
    children: Vec<usize>,
}

impl CondensedCluster {
    fn stability(&self) -> f64 {
        self.points.iter().map(|&(_, l)| l - self.birth).sum()
    }
}

fn components(members: &[usize], edges: &[(f64, usize, usize)], dsu: &mut Dsu) -> Vec<(Vec<usize>, Vec<(f64, usize, usize)>)> {
    for &m in members {
        dsu.parent[m] = m;
    }
    for &(_, a, b) in edges {
        dsu.union(a, b);
    }
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<(f64, usize, usize)>)> = Default::default();
    for &m in members {
        let r = dsu.find(m);
        groups.entry(r).or_default().0.push(m);
    }
    for &e in edges {
        let r = dsu.find(e.1);
        groups.get_mut(&r).unwrap().1.push(e);
    }
    groups.into_values().collect()
}

fn condense(n: usize, mst: Vec<(f64, usize, usize)>, min_size: usize) -> Vec<CondensedCluster> {
    let mut tree = vec![CondensedCluster {
        birth: 0.0,
        points: Vec::new(),
        children: Vec::new(),
    }];
    let mut dsu = Dsu::new(n);
    // (cluster id, current members, spanning edges of those members)
    let mut stack = vec![(0usize, (0..n).collect::<Vec<_>>(), mst)];
    while let Some((id, mut members, mut edges)) = stack.pop() {
        loop {
            let w = edges.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
            if edges.is_empty() {
                let lambda = tree[id].birth;
                tree[id].points.extend(members.iter().map(|&p| (p, lambda)));
                break;
            }
            let lambda = 1.0 / w;
            edges.retain(|e| e.0 < w);
            let parts = components(&members, &edges, &mut dsu);
            let big: Vec<usize> = (0..parts.len()).filter(|&i| parts[i].0.len() >= min_size).collect();
            for (i, (pts, _)) in parts.iter().enumerate() {
                if big.len() == 1 && big[0] == i {
                    continue;
                }
                if big.len() < 2 || !big.contains(&i) {
                    tree[id].points.extend(pts.iter().map(|&p| (p, lambda)));
                }
            }
            match big.len() {
                0 => break,
                1 => {
                    let (m, e) = parts.into_iter().nth(big[0]).unwrap();
                    members = m;
                    edges = e;
                }
                _ => {
                    for (i, (m, e)) in parts.into_iter().enumerate() {
                        if !big.contains(&i) {
                            continue;
                        }
                        tree[id].points.extend(m.iter().map(|&p| (p, lambda)));
                        let child = tree.len();
                        tree.push(CondensedCluster {
                            birth: lambda,
                            points: Vec::new(),
                            children: Vec::new(),
                        });
                        tree[id].children.push(child);
                        stack.push((child, m, e));
                    }
                    break;
                }
            }
        }
    }
    tree
}

/// Excess-of-mass selection, then labelling.
fn label(n: usize, tree: &[CondensedCluster], allow_root: bool) -> Vec<i32> {
    // children always have larger ids than their parents
    let mut best = vec![0.0; tree.len()];
    let mut selected = vec![false; tree.len()];
    let first = if allow_root { 0 } else { 1 };
    for id in (first..tree.len()).rev() {
        let own = tree[id].stability();
        let kids: f64 = tree[id].children.iter().map(|&c| best[c]).sum();
        if tree[id].children.is_empty() || own >= kids {
            best[id] = own;
            selected[id] = true;
        } else {
            best[id] = kids;
        }
    }
    // keep only the topmost selected clusters
    let mut chosen = Vec::new();
    let mut stack: Vec<usize> = if allow_root { vec![0] } else { tree[0].children.clone() };
    while let Some(c) = stack.pop() {
        if selected[c] {
            chosen.push(c);
        } else {
            stack.extend(&tree[c].children);
        }
    }
    // every point that ever belonged to a cluster left it exactly once
    let mut members: Vec<Vec<usize>> = chosen
        .iter()
        .map(|&c| {
            let last = if c == 0 {
                tree[0].points.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max)
            } else {
                f64::NEG_INFINITY
            };
            let mut m: Vec<usize> = tree[c].points.iter().filter(|&&(_, l)| l >= last).map(|&(p, _)| p).collect();
            m.sort_unstable();
            m
        })
        .collect();
    members.sort_by_key(|m| m[0]);
    let mut labels = vec![-1; n];
    for (k, m) in members.iter().enumerate() {
        for &p in m {
            labels[p] = k as i32;
        }
    }
    labels
}
