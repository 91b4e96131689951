//! Partition-based graph coarsening and the normalized partition algebra
//! `P = P̂ D^{-1/2}`, `X′ = PᵀX`, `A′ = PᵀAP`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoarsenMethod {
    /// Repeated maximal matchings on the heaviest normalized edges.
    EdgeMatch,
    /// Greedy merging of a seed with its whole neighbourhood, low degree first.
    NeighborhoodMerge,
}

impl fmt::Display for CoarsenMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoarsenMethod::EdgeMatch => "edge-match",
            CoarsenMethod::NeighborhoodMerge => "neighborhood-merge",
        })
    }
}

impl FromStr for CoarsenMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "edge-match" | "edgematch" | "edges" => Ok(CoarsenMethod::EdgeMatch),
            "neighborhood-merge" | "neighborhoodmerge" | "neighborhood" => {
                Ok(CoarsenMethod::NeighborhoodMerge)
            }
            _ => Err(Error::InvalidConfig(format!("unknown coarsening method {s:?}"))),
        }
    }
}

/// Cluster assignment covering every node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    sizes: Vec<usize>,
}

impl Partition {
    /// Builds a partition from raw labels; clusters are renumbered in order of
    /// their smallest member.
    pub fn from_assignment(raw: &[usize]) -> Self {
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut assignment = Vec::with_capacity(raw.len());
        let mut sizes = Vec::new();
        for &c in raw {
            let next = remap.len();
            let id = *remap.entry(c).or_insert(next);
            if id == sizes.len() {
                sizes.push(0);
            }
            sizes[id] += 1;
            assignment.push(id);
        }
        Partition { assignment, sizes }
    }

    pub fn identity(n: usize) -> Self {
        Partition {
            assignment: (0..n).collect(),
            sizes: vec![1; n],
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Member lists per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters()];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Dense `P = P̂ D^{-1/2}` (n × n′).
    pub fn dense_normalized(&self) -> Array2<f64> {
        let mut p = Array2::zeros((self.n(), self.num_clusters()));
        for (i, &c) in self.assignment.iter().enumerate() {
            p[[i, c]] = 1.0 / (self.sizes[c] as f64).sqrt();
        }
        p
    }

    /// One `node_id cluster_id` pair per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::with_capacity(self.n() * 8);
        for (i, c) in self.assignment.iter().enumerate() {
            text.push_str(&format!("{i} {c}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, n: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw = vec![usize::MAX; n];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, lineno + 1, format!("{e}")))?;
            let [node, cluster] = parsed[..] else {
                return Err(Error::parse(path, lineno + 1, "expected `node cluster`"));
            };
            if node >= n {
                return Err(Error::parse(path, lineno + 1, format!("node {node} >= {n}")));
            }
            raw[node] = cluster;
        }
        if let Some(missing) = raw.iter().position(|&c| c == usize::MAX) {
            return Err(Error::InvalidInput(format!("node {missing} has no cluster")));
        }
        Ok(Partition::from_assignment(&raw))
    }
}

/// Weighted multigraph over the current clusters during contraction.
struct Contraction {
    /// Cluster id of every original node.
    owner: Vec<usize>,
    sizes: Vec<usize>,
    /// Summed original edge counts between distinct clusters.
    links: Vec<BTreeMap<usize, f64>>,
}

impl Contraction {
    fn new(g: &Graph) -> Self {
        let links = (0..g.n())
            .map(|i| g.neighbors(i).iter().map(|&j| (j, 1.0)).collect())
            .collect();
        Contraction {
            owner: (0..g.n()).collect(),
            sizes: vec![1; g.n()],
            links,
        }
    }

    fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Applies a grouping `group[c]` of current clusters (groups numbered densely).
    fn merge(&mut self, group: &[usize]) {
        let k = group.iter().copied().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0; k];
        let mut links: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        for (c, &gc) in group.iter().enumerate() {
            sizes[gc] += self.sizes[c];
            for (&d, &w) in &self.links[c] {
                let gd = group[d];
                if gd != gc {
                    *links[gc].entry(gd).or_insert(0.0) += w;
                }
            }
        }
        for o in &mut self.owner {
            *o = group[*o];
        }
        self.sizes = sizes;
        self.links = links;
    }

    fn normalized_weight(&self, a: usize, b: usize, w: f64) -> f64 {
        w / ((self.sizes[a] * self.sizes[b]) as f64).sqrt()
    }

    /// One round of heavy-edge matching; stops once `target` clusters remain.
    fn edge_match_round(&mut self, target: usize) -> bool {
        let mut edges: Vec<(f64, usize, usize)> = Vec::new();
        for (a, nbrs) in self.links.iter().enumerate() {
            for (&b, &w) in nbrs.range(a + 1..) {
                edges.push((self.normalized_weight(a, b, w), a, b));
            }
        }
        edges.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut partner: Vec<Option<usize>> = vec![None; self.count()];
        let mut remaining = self.count();
        for (_, a, b) in edges {
            if remaining <= target {
                break;
            }
            if partner[a].is_none() && partner[b].is_none() {
                partner[a] = Some(b);
                partner[b] = Some(a);
                remaining -= 1;
            }
        }
        if remaining == self.count() {
            return false;
        }
        self.apply_pairs(&partner);
        true
    }

    fn apply_pairs(&mut self, partner: &[Option<usize>]) {
        let mut group = vec![usize::MAX; self.count()];
        let mut next = 0;
        for c in 0..self.count() {
            if group[c] != usize::MAX {
                continue;
            }
            group[c] = next;
            if let Some(p) = partner[c] {
                group[p] = next;
            }
            next += 1;
        }
        self.merge(&group);
    }

    /// One pass of neighbourhood merging, seeds in ascending (degree, id) order.
    fn neighborhood_round(&mut self, target: usize) -> bool {
        let mut order: Vec<usize> = (0..self.count()).collect();
        order.sort_by_key(|&c| (self.links[c].len(), c));
        let mut group = vec![usize::MAX; self.count()];
        let mut next = 0;
        let mut remaining = self.count();
        for seed in order {
            if group[seed] != usize::MAX {
                continue;
            }
            group[seed] = next;
            for &nb in self.links[seed].keys() {
                if remaining <= target {
                    break;
                }
                if group[nb] == usize::MAX {
                    group[nb] = next;
                    remaining -= 1;
                }
            }
            next += 1;
        }
        if remaining == self.count() {
            return false;
        }
        self.merge(&group);
        true
    }

    /// Pairs up clusters that no edge connects (smallest first) so disconnected
    /// inputs still reach the target size.
    fn merge_disconnected(&mut self, target: usize) {
        while self.count() > target {
            let mut order: Vec<usize> = (0..self.count()).collect();
            order.sort_by_key(|&c| (self.sizes[c], c));
            let mut partner = vec![None; self.count()];
            let mut remaining = self.count();
            for pair in order.chunks(2) {
                if remaining <= target {
                    break;
                }
                if let [a, b] = *pair {
                    partner[a] = Some(b);
                    partner[b] = Some(a);
                    remaining -= 1;
                }
            }
            self.apply_pairs(&partner);
        }
    }
}

/// Target super-node count `⌈rate·n⌉` (at least one).
pub fn target_clusters(n: usize, rate: f64) -> usize {
    ((rate * n as f64).ceil() as usize).clamp(1, n.max(1))
}

pub fn coarsen(g: &Graph, rate: f64, method: CoarsenMethod) -> Result<Partition> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("coarsening rate {rate} outside (0, 1]")));
    }
    if rate == 1.0 || g.n() == 0 {
        return Ok(Partition::identity(g.n()));
    }
    let target = target_clusters(g.n(), rate);
    let mut work = Contraction::new(g);
    while work.count() > target {
        let progressed = match method {
            CoarsenMethod::EdgeMatch => work.edge_match_round(target),
            CoarsenMethod::NeighborhoodMerge => work.neighborhood_round(target),
        };
        if !progressed {
            work.merge_disconnected(target);
        }
    }
    Ok(Partition::from_assignment(&work.owner))
}

/// Coarse graph with sparse symmetric `A′` rows.
#[derive(Debug, Clone)]
pub struct CoarseGraph {
    pub features: Array2<f64>,
    adjacency: Vec<Vec<(usize, f64)>>,
    pub partition: Partition,
}

impl CoarseGraph {
    pub fn n(&self) -> usize {
        self.partition.num_clusters()
    }

    pub fn adjacency_row(&self, j: usize) -> &[(usize, f64)] {
        &self.adjacency[j]
    }

    pub fn adjacency(&self, j: usize, k: usize) -> f64 {
        let row = &self.adjacency[j];
        row.binary_search_by_key(&k, |&(c, _)| c)
            .map_or(0.0, |idx| row[idx].1)
    }

    pub fn dense_adjacency(&self) -> Array2<f64> {
        let n = self.n();
        let mut a = Array2::zeros((n, n));
        for (j, row) in self.adjacency.iter().enumerate() {
            for &(k, v) in row {
                a[[j, k]] = v;
            }
        }
        a
    }
}

/// `X′ = PᵀX`, `A′ = PᵀAP`, accumulated in ascending node order.
pub fn coarse_algebra(g: &Graph, part: &Partition) -> Result<CoarseGraph> {
    if part.n() != g.n() {
        return Err(Error::Dimension(format!(
            "partition covers {} nodes, graph has {}",
            part.n(),
            g.n()
        )));
    }
    let scale: Vec<f64> = part.sizes().iter().map(|&s| 1.0 / (s as f64).sqrt()).collect();
    let k = part.num_clusters();
    let mut features = Array2::zeros((k, g.feature_dim()));
    for (i, x) in g.features().rows().into_iter().enumerate() {
        let c = part.cluster_of(i);
        let p = scale[c];
        features
            .row_mut(c)
            .zip_mut_with(&x, |acc, &v| *acc += p * v);
    }
    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
    for i in 0..g.n() {
        let ci = part.cluster_of(i);
        for &l in g.neighbors(i) {
            let cl = part.cluster_of(l);
            *rows[ci].entry(cl).or_insert(0.0) += scale[ci] * scale[cl];
        }
    }
    Ok(CoarseGraph {
        features,
        adjacency: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
        partition: part.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        let feats = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        Graph::from_edges(n, edges, feats, None).unwrap().0
    }

    #[test]
    fn rate_one_is_identity() {
        let g = graph(5, &[(0, 1), (2, 3)]);
        for m in [CoarsenMethod::EdgeMatch, CoarsenMethod::NeighborhoodMerge] {
            assert_eq!(coarsen(&g, 1.0, m).unwrap(), Partition::identity(5));
        }
    }

    #[test]
    fn path_quarter_rate() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        for m in [CoarsenMethod::EdgeMatch, CoarsenMethod::NeighborhoodMerge] {
            let k = coarsen(&g, 0.25, m).unwrap().num_clusters();
            assert!((1..=2).contains(&k), "{m}: {k}");
        }
    }

    #[test]
    fn disconnected_graph_still_reaches_target() {
        let g = graph(10, &[(0, 1)]);
        let p = coarsen(&g, 0.2, CoarsenMethod::EdgeMatch).unwrap();
        assert!(p.num_clusters() <= 2 * target_clusters(10, 0.2));
    }

    #[test]
    fn rejects_bad_rate() {
        let g = graph(3, &[]);
        assert!(coarsen(&g, 0.0, CoarsenMethod::EdgeMatch).is_err());
        assert!(coarsen(&g, 1.5, CoarsenMethod::EdgeMatch).is_err());
    }

    #[test]
    fn identity_algebra_is_exact() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let cg = coarse_algebra(&g, &Partition::identity(4)).unwrap();
        assert_eq!(&cg.features, g.features());
        assert_eq!(cg.dense_adjacency(), g.dense_adjacency());
    }

    #[test]
    fn single_cluster_algebra() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let cg = coarse_algebra(&g, &Partition::from_assignment(&[0; 4])).unwrap();
        let sums = g.features().sum_axis(ndarray::Axis(0));
        for (a, b) in cg.features.row(0).iter().zip(sums.iter()) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
        assert!((cg.adjacency(0, 0) - 6.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn partition_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let p = Partition::from_assignment(&[3, 3, 1, 0, 1]);
        assert_eq!(p.assignment(), &[0, 0, 1, 2, 1]);
        p.save(&path).unwrap();
        assert_eq!(Partition::load(&path, 5).unwrap(), p);
        assert!(Partition::load(&path, 6).is_err());
    }
}
