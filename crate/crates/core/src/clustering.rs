//! Online context discretisation with a clustering-feature (CF) tree.
//!
//! Insertion follows the usual two steps: points are absorbed into leaf
//! entries of a height-balanced CF tree (closest-centroid descent, node
//! splits at the branching factor), and a global agglomerative pass over the
//! leaf entries periodically republishes at most `max_clusters` centers.
//! Between global passes the published centers are updated incrementally, so
//! every insertion returns an up-to-date assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(N, LS, SS)` summary of a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringFeature {
    count: u64,
    linear_sum: Vec<f64>,
    squared_sum: f64,
}

impl ClusteringFeature {
    pub fn empty(dim: usize) -> Self {
        ClusteringFeature {
            count: 0,
            linear_sum: vec![0.0; dim],
            squared_sum: 0.0,
        }
    }

    pub fn from_point(x: &[f64]) -> Self {
        ClusteringFeature {
            count: 1,
            linear_sum: x.to_vec(),
            squared_sum: x.iter().map(|v| v * v).sum(),
        }
    }

    pub fn from_points<'a>(dim: usize, points: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut cf = Self::empty(dim);
        for p in points {
            cf.absorb(p);
        }
        cf
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn linear_sum(&self) -> &[f64] {
        &self.linear_sum
    }

    pub fn squared_sum(&self) -> f64 {
        self.squared_sum
    }

    pub fn dim(&self) -> usize {
        self.linear_sum.len()
    }

    pub fn absorb(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "point dimension mismatch");
        self.count += 1;
        for (s, v) in self.linear_sum.iter_mut().zip(x) {
            *s += v;
        }
        self.squared_sum += x.iter().map(|v| v * v).sum::<f64>();
    }

    /// Componentwise sum of two features.
    pub fn merge(&self, other: &ClusteringFeature) -> Result<ClusteringFeature> {
        if self.dim() != other.dim() {
            return Err(Error::contract(format!(
                "cannot merge features of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(ClusteringFeature {
            count: self.count + other.count,
            linear_sum: self
                .linear_sum
                .iter()
                .zip(&other.linear_sum)
                .map(|(a, b)| a + b)
                .collect(),
            squared_sum: self.squared_sum + other.squared_sum,
        })
    }

    pub fn centroid(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.linear_sum.iter().map(|s| s / n).collect()
    }

    /// `sqrt(SS/N - |LS/N|^2)`, zero for empty features.
    pub fn radius(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let n = self.count as f64;
        let centroid_sq: f64 = self.linear_sum.iter().map(|s| (s / n) * (s / n)).sum();
        (self.squared_sum / n - centroid_sq).max(0.0).sqrt()
    }

    /// Radius the union with `x` would have.
    fn radius_with(&self, x: &[f64]) -> f64 {
        let n = (self.count + 1) as f64;
        let ss = self.squared_sum + x.iter().map(|v| v * v).sum::<f64>();
        let centroid_sq: f64 = self
            .linear_sum
            .iter()
            .zip(x)
            .map(|(s, v)| {
                let c = (s + v) / n;
                c * c
            })
            .sum();
        (ss / n - centroid_sq).max(0.0).sqrt()
    }
}

pub fn cf_merge(a: &ClusteringFeature, b: &ClusteringFeature) -> Result<ClusteringFeature> {
    a.merge(b)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid_sq_dist(a: &ClusteringFeature, b: &ClusteringFeature) -> f64 {
    let (na, nb) = (a.count.max(1) as f64, b.count.max(1) as f64);
    a.linear_sum
        .iter()
        .zip(&b.linear_sum)
        .map(|(x, y)| {
            let d = x / na - y / nb;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfTreeConfig {
    pub branching_factor: usize,
    pub merge_threshold: f64,
    pub max_clusters: usize,
    /// Total leaf entries kept before the two closest are merged.
    pub max_leaf_entries: usize,
    /// Insertions between global agglomerative passes.
    pub rebuild_every: usize,
}

impl Default for CfTreeConfig {
    fn default() -> Self {
        CfTreeConfig {
            branching_factor: 8,
            merge_threshold: 0.5,
            max_clusters: 4,
            max_leaf_entries: 64,
            rebuild_every: 50,
        }
    }
}

impl CfTreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching_factor < 2 {
            return Err(Error::Config("branching_factor must be at least 2".into()));
        }
        if !(self.merge_threshold >= 0.0 && self.merge_threshold.is_finite()) {
            return Err(Error::Config("merge_threshold must be finite and non-negative".into()));
        }
        if self.max_clusters == 0 || self.max_leaf_entries < self.max_clusters {
            return Err(Error::Config(
                "need max_clusters >= 1 and max_leaf_entries >= max_clusters".into(),
            ));
        }
        if self.rebuild_every == 0 {
            return Err(Error::Config("rebuild_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub cluster_id: usize,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedCluster {
    pub id: usize,
    pub feature: ClusteringFeature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Node {
    /// For internal nodes, `entries[i]` summarises `children[i]`.
    entries: Vec<ClusteringFeature>,
    children: Vec<usize>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// The CF tree plus its published global clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfTree {
    config: CfTreeConfig,
    dim: usize,
    nodes: Vec<Option<Node>>,
    root: usize,
    clusters: Vec<PublishedCluster>,
    inserts_since_rebuild: usize,
    leaf_entries: usize,
}

enum Absorbed {
    Existing,
    NewEntry,
}

impl CfTree {
    pub fn new(dim: usize, config: CfTreeConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::contract("context dimension must be positive"));
        }
        Ok(CfTree {
            config,
            dim,
            nodes: vec![Some(Node {
                entries: Vec::new(),
                children: Vec::new(),
            })],
            root: 0,
            clusters: Vec::new(),
            inserts_since_rebuild: 0,
            leaf_entries: 0,
        })
    }

    pub fn config(&self) -> &CfTreeConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_entry_count(&self) -> usize {
        self.leaf_entries
    }

    /// Published clusters sorted by id.
    pub fn clusters(&self) -> &[PublishedCluster] {
        &self.clusters
    }

    pub fn centers(&self) -> Vec<(usize, Vec<f64>)> {
        self.clusters.iter().map(|c| (c.id, c.feature.centroid())).collect()
    }

    /// Leaf entries in depth-first order.
    pub fn leaves(&self) -> Vec<ClusteringFeature> {
        let mut out = Vec::with_capacity(self.leaf_entries);
        self.collect_leaves(self.root, &mut out);
        out
    }

    fn collect_leaves(&self, node: usize, out: &mut Vec<ClusteringFeature>) {
        let n = self.node(node);
        if n.is_leaf() {
            out.extend(n.entries.iter().cloned());
        } else {
            for &c in &n.children {
                self.collect_leaves(c, out);
            }
        }
    }

    fn node(&self, id: usize) -> &Node {
        self.nodes[id].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: usize) -> &mut Node {
        self.nodes[id].as_mut().expect("live node")
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(slot) = self.nodes.iter().position(|n| n.is_none()) {
            self.nodes[slot] = Some(node);
            slot
        } else {
            self.nodes.push(Some(node));
            self.nodes.len() - 1
        }
    }

    /// Inserts a context and returns its assignment after insertion.
    pub fn insert(&mut self, x: &[f64]) -> Result<ClusterAssignment> {
        if x.len() != self.dim {
            return Err(Error::contract(format!(
                "context has dimension {}, tree expects {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("context has non-finite coordinates"));
        }
        let absorbed = self.insert_feature(ClusteringFeature::from_point(x), true);
        while self.leaf_entries > self.config.max_leaf_entries {
            self.merge_closest_leaf_entries();
        }

        self.inserts_since_rebuild += 1;
        if self.clusters.is_empty() || self.inserts_since_rebuild >= self.config.rebuild_every {
            self.rebuild_global();
            return self.assign(x);
        }

        let open_slot = self.clusters.len() < self.config.max_clusters;
        if matches!(absorbed, Absorbed::NewEntry) && open_slot {
            let id = self.fresh_id();
            self.clusters.push(PublishedCluster {
                id,
                feature: ClusteringFeature::from_point(x),
            });
            self.clusters.sort_by_key(|c| c.id);
        } else {
            let id = self.assign(x)?.cluster_id;
            let cluster = self.clusters.iter_mut().find(|c| c.id == id).expect("assigned id");
            cluster.feature.absorb(x);
        }
        self.assign(x)
    }

    fn fresh_id(&self) -> usize {
        (0..).find(|id| self.clusters.iter().all(|c| c.id != *id)).unwrap()
    }

    /// Nearest published center; ties go to the lower id. Does not mutate.
    pub fn assign(&self, x: &[f64]) -> Result<ClusterAssignment> {
        if x.len() != self.dim {
            return Err(Error::contract("context dimension mismatch"));
        }
        let mut best: Option<(f64, &PublishedCluster)> = None;
        for c in &self.clusters {
            let d = sq_dist(x, &c.feature.centroid());
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        best.map(|(_, c)| ClusterAssignment {
            cluster_id: c.id,
            center: c.feature.centroid(),
        })
        .ok_or(Error::NoCenters)
    }

    fn insert_feature(&mut self, cf: ClusteringFeature, allow_absorb: bool) -> Absorbed {
        let root = self.root;
        let (absorbed, split) = self.insert_into(root, cf, allow_absorb);
        if let Some((left, right)) = split {
            let new_root = Node {
                entries: vec![self.summarise(left), self.summarise(right)],
                children: vec![left, right],
            };
            self.root = self.alloc(new_root);
        }
        absorbed
    }

    fn summarise(&self, node: usize) -> ClusteringFeature {
        let n = self.node(node);
        n.entries.iter().fold(ClusteringFeature::empty(self.dim), |acc, e| {
            acc.merge(e).expect("uniform dimension")
        })
    }

    fn closest(entries: &[ClusteringFeature], cf: &ClusteringFeature) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, e) in entries.iter().enumerate() {
            let d = centroid_sq_dist(e, cf);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Returns the split halves when `node` overflowed.
    fn insert_into(
        &mut self,
        node: usize,
        cf: ClusteringFeature,
        allow_absorb: bool,
    ) -> (Absorbed, Option<(usize, usize)>) {
        let threshold = self.config.merge_threshold;
        let branching = self.config.branching_factor;
        if self.node(node).is_leaf() {
            let n = self.node_mut(node);
            if let Some(i) = Self::closest(&n.entries, &cf) {
                let fits = allow_absorb
                    && cf.count == 1
                    && n.entries[i].radius_with(&cf.linear_sum) <= threshold;
                if fits {
                    n.entries[i] = n.entries[i].merge(&cf).expect("uniform dimension");
                    return (Absorbed::Existing, None);
                }
            }
            n.entries.push(cf);
            self.leaf_entries += 1;
            let split = if self.node(node).entries.len() > branching {
                Some(self.split(node))
            } else {
                None
            };
            return (Absorbed::NewEntry, split);
        }

        let i = Self::closest(&self.node(node).entries, &cf).expect("internal nodes are non-empty");
        let child = self.node(node).children[i];
        let (absorbed, child_split) = self.insert_into(child, cf, allow_absorb);
        match child_split {
            None => {
                let summary = self.summarise(child);
                self.node_mut(node).entries[i] = summary;
                (absorbed, None)
            }
            Some((left, right)) => {
                let (sl, sr) = (self.summarise(left), self.summarise(right));
                let n = self.node_mut(node);
                n.entries[i] = sl;
                n.children[i] = left;
                n.entries.insert(i + 1, sr);
                n.children.insert(i + 1, right);
                let split = if n.entries.len() > branching {
                    Some(self.split(node))
                } else {
                    None
                };
                (absorbed, split)
            }
        }
    }

    /// Splits an overflowing node around its farthest pair of entries.
    fn split(&mut self, node: usize) -> (usize, usize) {
        let n = self.nodes[node].take().expect("live node");
        let m = n.entries.len();
        let (mut sa, mut sb, mut far) = (0, 1, -1.0);
        for i in 0..m {
            for j in (i + 1)..m {
                let d = centroid_sq_dist(&n.entries[i], &n.entries[j]);
                if d > far {
                    (sa, sb, far) = (i, j, d);
                }
            }
        }
        let seed_a = n.entries[sa].clone();
        let seed_b = n.entries[sb].clone();
        let mut left = Node {
            entries: Vec::new(),
            children: Vec::new(),
        };
        let mut right = left.clone();
        for (i, e) in n.entries.into_iter().enumerate() {
            let to_left = i == sa
                || (i != sb && centroid_sq_dist(&e, &seed_a) <= centroid_sq_dist(&e, &seed_b));
            let target = if to_left { &mut left } else { &mut right };
            target.entries.push(e);
            if let Some(&c) = n.children.get(i) {
                target.children.push(c);
            }
        }
        self.nodes[node] = Some(left);
        let right_id = self.alloc(right);
        (node, right_id)
    }

    fn merge_closest_leaf_entries(&mut self) {
        let leaves = self.leaves();
        let mut best = (f64::INFINITY, 0, 1);
        for i in 0..leaves.len() {
            for j in (i + 1)..leaves.len() {
                let d = centroid_sq_dist(&leaves[i], &leaves[j]);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (_, i, j) = best;
        let merged = leaves[i].merge(&leaves[j]).expect("uniform dimension");
        self.remove_leaf_entry(j);
        self.remove_leaf_entry(i);
        self.insert_feature(merged, false);
    }

    /// Removes the `index`-th leaf entry in depth-first order.
    fn remove_leaf_entry(&mut self, index: usize) {
        let mut remaining = index;
        let root = self.root;
        let removed = self.remove_in(root, &mut remaining);
        debug_assert!(removed);
        self.leaf_entries -= 1;
        self.refresh_summaries(self.root);
        // Collapse a root with a single child.
        loop {
            let r = self.node(self.root);
            if r.children.len() == 1 {
                let child = r.children[0];
                self.nodes[self.root] = None;
                self.root = child;
            } else {
                break;
            }
        }
    }

    fn remove_in(&mut self, node: usize, remaining: &mut usize) -> bool {
        if self.node(node).is_leaf() {
            let len = self.node(node).entries.len();
            if *remaining < len {
                self.node_mut(node).entries.remove(*remaining);
                return true;
            }
            *remaining -= len;
            return false;
        }
        let children = self.node(node).children.clone();
        for (pos, c) in children.into_iter().enumerate() {
            if self.remove_in(c, remaining) {
                if self.node(c).entries.is_empty() {
                    self.nodes[c] = None;
                    let n = self.node_mut(node);
                    n.children.remove(pos);
                    n.entries.remove(pos);
                }
                return true;
            }
        }
        false
    }

    fn refresh_summaries(&mut self, node: usize) {
        if self.node(node).is_leaf() {
            return;
        }
        let children = self.node(node).children.clone();
        for (pos, c) in children.into_iter().enumerate() {
            self.refresh_summaries(c);
            let s = self.summarise(c);
            self.node_mut(node).entries[pos] = s;
        }
    }

    /// Global pass: agglomerate leaf entries down to `max_clusters` and
    /// republish, carrying cluster ids over to the nearest new centers.
    pub fn rebuild_global(&mut self) -> Vec<(usize, Vec<f64>)> {
        self.inserts_since_rebuild = 0;
        let leaves = self.leaves();
        if leaves.is_empty() {
            self.clusters.clear();
            return Vec::new();
        }
        let merged = agglomerate(&leaves, self.config.max_clusters);
        let new_centers: Vec<Vec<f64>> = merged.features.iter().map(|f| f.centroid()).collect();
        let old: Vec<(usize, Vec<f64>)> = self.centers();

        // Greedy matching on ascending distance: each old id goes to at most one new center.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ni, nc) in new_centers.iter().enumerate() {
            for (oi, (_, oc)) in old.iter().enumerate() {
                pairs.push((sq_dist(nc, oc), ni, oi));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut new_ids: Vec<Option<usize>> = vec![None; new_centers.len()];
        let mut old_used = vec![false; old.len()];
        for (_, ni, oi) in pairs {
            if new_ids[ni].is_none() && !old_used[oi] {
                new_ids[ni] = Some(old[oi].0);
                old_used[oi] = true;
            }
        }
        let mut taken: Vec<usize> = new_ids.iter().flatten().cloned().collect();
        let mut clusters = Vec::with_capacity(new_centers.len());
        for (ni, feature) in merged.features.into_iter().enumerate() {
            let id = new_ids[ni].unwrap_or_else(|| {
                let id = (0..).find(|id| !taken.contains(id)).unwrap();
                taken.push(id);
                id
            });
            clusters.push(PublishedCluster { id, feature });
        }
        clusters.sort_by_key(|c| c.id);
        self.clusters = clusters;
        self.centers()
    }
}

/// Result of merging leaf features down to a target count.
#[derive(Debug, Clone)]
pub struct Agglomeration {
    pub features: Vec<ClusteringFeature>,
    /// Original leaf indices making up each output feature.
    pub members: Vec<Vec<usize>>,
    /// Merge log: smallest member index of each of the two merged groups.
    pub merges: Vec<(usize, usize)>,
}

/// Closest-centroid-first agglomeration with Lance–Williams updates of the
/// squared centroid distances. A merged group takes the slot of its
/// lower-indexed part; distance ties go to the lexicographically smallest pair.
pub fn agglomerate(features: &[ClusteringFeature], target: usize) -> Agglomeration {
    let m = features.len();
    let mut alive: Vec<bool> = vec![true; m];
    let mut feats: Vec<ClusteringFeature> = features.to_vec();
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut dist = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = centroid_sq_dist(&feats[i], &feats[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut merges = Vec::new();
    let mut live = m;
    while live > target.max(1) {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..m {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..m {
                if alive[j] && dist[i][j] < best.0 {
                    best = (dist[i][j], i, j);
                }
            }
        }
        let (dij, i, j) = best;
        let (ni, nj) = (feats[i].count as f64, feats[j].count as f64);
        let nij = ni + nj;
        for k in 0..m {
            if alive[k] && k != i && k != j {
                let d = (ni * dist[i][k] + nj * dist[j][k]) / nij - ni * nj * dij / (nij * nij);
                let d = d.max(0.0);
                dist[i][k] = d;
                dist[k][i] = d;
            }
        }
        merges.push((members[i][0].min(members[j][0]), members[i][0].max(members[j][0])));
        feats[i] = feats[i].merge(&feats[j]).expect("uniform dimension");
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        members[i].sort_unstable();
        alive[j] = false;
        live -= 1;
    }
    let mut out = Agglomeration {
        features: Vec::new(),
        members: Vec::new(),
        merges,
    };
    for i in 0..m {
        if alive[i] {
            out.features.push(feats[i].clone());
            out.members.push(members[i].clone());
        }
    }
    out
}

/// Welford running mean and variance for standardising contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStandardizer {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStandardizer {
    const STD_FLOOR: f64 = 1e-6;

    pub fn new(dim: usize) -> Self {
        RunningStandardizer {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        x.iter()
            .zip(&self.mean)
            .zip(&self.m2)
            .map(|((v, m), s)| (v - m) / (s / n).sqrt().max(Self::STD_FLOOR))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr_free::normal;

    /// Box-Muller without pulling in another crate.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal<R: Rng>(rng: &mut R) -> f64 {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    fn dyadic_point<R: Rng>(rng: &mut R) -> Vec<f64> {
        // Multiples of 2^-10 in [-8, 8]: every sum below is exact in f64.
        (0..2).map(|_| rng.gen_range(-8192i64..=8192) as f64 / 1024.0).collect()
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let cf = ClusteringFeature::from_points(2, [[1.0, 2.0].as_slice(), &[3.0, -1.0]]);
        assert_eq!(cf.merge(&ClusteringFeature::empty(2)).unwrap(), cf);
    }

    #[test]
    fn merge_of_singletons_equals_batch() {
        let (p1, p2) = ([0.5, -1.5], [2.0, 4.0]);
        let merged = ClusteringFeature::from_point(&p1)
            .merge(&ClusteringFeature::from_point(&p2))
            .unwrap();
        assert_eq!(merged, ClusteringFeature::from_points(2, [p1.as_slice(), &p2]));
    }

    #[test]
    fn merge_dimension_mismatch() {
        let a = ClusteringFeature::empty(2);
        let b = ClusteringFeature::empty(3);
        assert!(matches!(a.merge(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn split_group_merge_equals_batch_exactly() {
        let mut rng = seeded(5);
        for _ in 0..20 {
            let pts: Vec<Vec<f64>> = (0..50).map(|_| dyadic_point(&mut rng)).collect();
            let cut = rng.gen_range(0..=50);
            let a = ClusteringFeature::from_points(2, pts[..cut].iter().map(|p| p.as_slice()));
            let b = ClusteringFeature::from_points(2, pts[cut..].iter().map(|p| p.as_slice()));
            // Oracle: direct batch sums over all points.
            let ls: Vec<f64> = (0..2).map(|d| pts.iter().map(|p| p[d]).sum()).collect();
            let ss: f64 = pts.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum();
            let m = a.merge(&b).unwrap();
            assert_eq!(m.count(), 50);
            assert_eq!(m.linear_sum(), ls.as_slice());
            assert_eq!(m.squared_sum(), ss);
        }
    }

    #[test]
    fn radius_is_non_negative_and_matches_spread() {
        let cf = ClusteringFeature::from_points(1, [[0.0].as_slice(), &[2.0]]);
        assert!((cf.radius() - 1.0).abs() < 1e-12);
        assert_eq!(ClusteringFeature::from_point(&[3.0]).radius(), 0.0);
    }

    #[test]
    fn first_and_second_insertions() {
        let mut tree = CfTree::new(2, CfTreeConfig::default()).unwrap();
        let a = tree.insert(&[1.0, 1.0]).unwrap();
        assert_eq!(a.cluster_id, 0);
        assert_eq!(a.center, vec![1.0, 1.0]);
        let b = tree.insert(&[1.2, 1.0]).unwrap();
        assert_eq!(b.cluster_id, 0);
        assert!((b.center[0] - 1.1).abs() < 1e-12 && (b.center[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn insert_rejects_bad_points() {
        let mut tree = CfTree::new(2, CfTreeConfig::default()).unwrap();
        assert!(tree.insert(&[f64::NAN, 0.0]).is_err());
        assert!(tree.insert(&[0.0]).is_err());
        assert!(matches!(tree.assign(&[0.0, 0.0]), Err(Error::NoCenters)));
    }

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, [Vec<f64>; 2]) {
        let mut rng = seeded(seed);
        let means = [vec![0.0, 0.0], vec![10.0, 0.0]];
        let mut pts = Vec::new();
        for m in &means {
            for _ in 0..100 {
                pts.push(vec![m[0] + 0.5 * normal(&mut rng), m[1] + 0.5 * normal(&mut rng)]);
            }
        }
        (pts, means)
    }

    #[test]
    fn two_blob_recovery_in_several_orders() {
        for seed in 0..5 {
            let (mut pts, means) = blobs(seed);
            if seed % 2 == 1 {
                pts.reverse();
            }
            if seed >= 2 {
                // Interleave the blobs.
                let (a, b) = pts.split_at(100);
                pts = a.iter().zip(b).flat_map(|(x, y)| [x.clone(), y.clone()]).collect();
            }
            let config = CfTreeConfig {
                merge_threshold: 1.0,
                max_clusters: 2,
                ..CfTreeConfig::default()
            };
            let mut tree = CfTree::new(2, config).unwrap();
            for p in &pts {
                tree.insert(p).unwrap();
            }
            let centers = tree.rebuild_global();
            assert_eq!(centers.len(), 2);
            for m in &means {
                let nearest = centers
                    .iter()
                    .map(|(_, c)| sq_dist(c, m).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest < 0.3, "seed {seed}: center off by {nearest}");
            }
        }
    }

    #[test]
    fn assign_matches_linear_scan() {
        let mut rng = seeded(9);
        let config = CfTreeConfig {
            merge_threshold: 0.3,
            max_clusters: 6,
            ..CfTreeConfig::default()
        };
        let mut tree = CfTree::new(3, config).unwrap();
        for _ in 0..300 {
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            tree.insert(&p).unwrap();
        }
        let centers = tree.centers();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut best = (f64::INFINITY, usize::MAX);
            for (id, c) in &centers {
                let d: f64 = c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, *id);
                }
            }
            assert_eq!(tree.assign(&x).unwrap().cluster_id, best.1);
        }
    }

    #[test]
    fn assign_ties_go_to_lower_id_and_exact_center() {
        let config = CfTreeConfig {
            merge_threshold: 0.1,
            ..CfTreeConfig::default()
        };
        let mut tree = CfTree::new(1, config).unwrap();
        tree.insert(&[0.0]).unwrap();
        tree.insert(&[2.0]).unwrap();
        assert_eq!(tree.assign(&[1.0]).unwrap().cluster_id, 0);
        assert_eq!(tree.assign(&[2.0]).unwrap().cluster_id, 1);
        let snapshot = tree.centers();
        tree.assign(&[5.0]).unwrap();
        assert_eq!(tree.centers(), snapshot);
    }

    #[test]
    fn rebuild_hand_checked_instance() {
        let leaves = vec![
            ClusteringFeature::from_point(&[0.0]),
            ClusteringFeature::from_point(&[0.2]),
            ClusteringFeature::from_point(&[5.0]),
        ];
        let agg = agglomerate(&leaves, 2);
        assert_eq!(agg.members, vec![vec![0, 1], vec![2]]);
        assert!((agg.features[0].centroid()[0] - 0.1).abs() < 1e-12);
        assert_eq!(agg.features[1].centroid(), vec![5.0]);
        let untouched = agglomerate(&leaves, 4);
        assert_eq!(untouched.features, leaves);
    }

    /// Recomputes every pairwise centroid distance from scratch at each step.
    fn brute_force_agglomerate(features: &[ClusteringFeature], target: usize) -> Vec<(usize, usize)> {
        let mut groups: Vec<(Vec<usize>, ClusteringFeature)> =
            features.iter().cloned().enumerate().map(|(i, f)| (vec![i], f)).collect();
        let mut log = Vec::new();
        while groups.len() > target {
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..groups.len() {
                for j in (i + 1)..groups.len() {
                    let (ci, cj) = (groups[i].1.centroid(), groups[j].1.centroid());
                    let d: f64 = ci.iter().zip(&cj).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 {
                        best = (d, i, j);
                    }
                }
            }
            let (_, i, j) = best;
            let (gj, fj) = groups.remove(j);
            log.push((groups[i].0[0].min(gj[0]), groups[i].0[0].max(gj[0])));
            groups[i].1 = groups[i].1.merge(&fj).unwrap();
            groups[i].0.extend(gj);
            groups[i].0.sort_unstable();
        }
        log
    }

    #[test]
    fn agglomeration_order_matches_brute_force() {
        let mut rng = seeded(77);
        for _ in 0..50 {
            let leaves: Vec<ClusteringFeature> = (0..10)
                .map(|_| {
                    let n = rng.gen_range(1..5);
                    let base: Vec<f64> = (0..2).map(|_| rng.gen_range(-5.0..5.0)).collect();
                    let pts: Vec<Vec<f64>> = (0..n)
                        .map(|_| base.iter().map(|b| b + rng.gen_range(-0.3..0.3)).collect())
                        .collect();
                    ClusteringFeature::from_points(2, pts.iter().map(|p| p.as_slice()))
                })
                .collect();
            let target = rng.gen_range(1..5);
            assert_eq!(agglomerate(&leaves, target).merges, brute_force_agglomerate(&leaves, target));
        }
    }

    #[test]
    fn tree_respects_caps_and_radius() {
        let mut rng = seeded(3);
        let config = CfTreeConfig {
            branching_factor: 3,
            merge_threshold: 0.2,
            max_clusters: 4,
            max_leaf_entries: 20,
            rebuild_every: 7,
        };
        let mut tree = CfTree::new(2, config).unwrap();
        let mut all = Vec::new();
        for _ in 0..400 {
            let p: Vec<f64> = (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect();
            tree.insert(&p).unwrap();
            all.push(p);
            assert!(tree.clusters().len() <= 4);
            assert!(tree.leaf_entry_count() <= 20);
            assert_eq!(tree.leaves().len(), tree.leaf_entry_count());
        }
        // All points are accounted for in the leaves.
        let total: u64 = tree.leaves().iter().map(|l| l.count()).sum();
        assert_eq!(total, 400);
        let batch = ClusteringFeature::from_points(2, all.iter().map(|p| p.as_slice()));
        let leaves = tree.leaves();
        let merged = leaves[1..].iter().fold(leaves[0].clone(), |a, b| a.merge(b).unwrap());
        for (a, b) in merged.centroid().iter().zip(batch.centroid()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn absorbed_leaves_stay_within_threshold() {
        let mut rng = seeded(12);
        let config = CfTreeConfig {
            merge_threshold: 0.5,
            max_leaf_entries: 10_000,
            ..CfTreeConfig::default()
        };
        let mut tree = CfTree::new(2, config).unwrap();
        for _ in 0..500 {
            let p: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            tree.insert(&p).unwrap();
        }
        assert!(tree.leaves().iter().all(|l| l.radius() <= 0.5 + 1e-12));
    }

    #[test]
    fn rebuild_keeps_ids_for_unmoved_centers() {
        let config = CfTreeConfig {
            merge_threshold: 0.1,
            max_clusters: 3,
            ..CfTreeConfig::default()
        };
        let mut tree = CfTree::new(1, config).unwrap();
        for x in [0.0, 10.0, 20.0] {
            tree.insert(&[x]).unwrap();
        }
        let before = tree.centers();
        let after = tree.rebuild_global();
        assert_eq!(before, after);
    }

    #[test]
    fn standardizer_centres_and_scales() {
        let mut s = RunningStandardizer::new(1);
        for v in [1.0, 3.0] {
            s.update(&[v]);
        }
        assert_eq!(s.standardize(&[3.0]), vec![1.0]);
        assert_eq!(s.standardize(&[2.0]), vec![0.0]);
    }
}
