//! Per-center sampling distributions for the four node-sampling heuristics.
//!
//! Every row excludes the center, is truncated to the `L` heaviest candidates
//! (ties broken by ascending node id) and renormalized to sum to one. A row with
//! empty support marks a heuristic that cannot propose anything for that center.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizedAdjacency};

pub const DEFAULT_TRUNCATION: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeuristicKind {
    OneHop = 0,
    TwoHop = 1,
    Knn = 2,
    Ppr = 3,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 4] = [
        HeuristicKind::OneHop,
        HeuristicKind::TwoHop,
        HeuristicKind::Knn,
        HeuristicKind::Ppr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::OneHop => "1-hop",
            HeuristicKind::TwoHop => "2-hop",
            HeuristicKind::Knn => "knn",
            HeuristicKind::Ppr => "ppr",
        }
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeuristicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1-hop" | "onehop" | "one-hop" | "1hop" => Ok(HeuristicKind::OneHop),
            "2-hop" | "twohop" | "two-hop" | "2hop" => Ok(HeuristicKind::TwoHop),
            "knn" => Ok(HeuristicKind::Knn),
            "ppr" => Ok(HeuristicKind::Ppr),
            _ => Err(Error::InvalidConfig(format!("unknown heuristic {s:?}"))),
        }
    }
}

/// One heuristic's distribution over candidate nodes for one center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRow {
    pub center: usize,
    pub kind: HeuristicKind,
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
}

impl SamplingRow {
    pub fn empty(center: usize, kind: HeuristicKind) -> Self {
        SamplingRow {
            center,
            kind,
            support: Vec::new(),
            probs: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Probability mass on `node` (zero off-support).
    pub fn prob(&self, node: usize) -> f64 {
        self.support
            .binary_search(&node)
            .map_or(0.0, |k| self.probs[k])
    }

    /// Keeps the `limit` heaviest positive candidates and renormalizes.
    /// `weighted` must not contain the center.
    fn from_weights(
        center: usize,
        kind: HeuristicKind,
        mut weighted: Vec<(usize, f64)>,
        limit: usize,
    ) -> Self {
        weighted.retain(|&(_, w)| w > 0.0);
        top_by_weight(&mut weighted, limit);
        Self::normalized(center, kind, weighted)
    }

    fn normalized(center: usize, kind: HeuristicKind, mut weighted: Vec<(usize, f64)>) -> Self {
        if weighted.is_empty() {
            return Self::empty(center, kind);
        }
        weighted.sort_unstable_by_key(|&(j, _)| j);
        let total: f64 = weighted.iter().map(|&(_, w)| w).sum();
        let (support, probs) = weighted.into_iter().map(|(j, w)| (j, w / total)).unzip();
        SamplingRow {
            center,
            kind,
            support,
            probs,
        }
    }
}

/// Sorts descending by weight (ascending id on ties) and truncates.
fn top_by_weight(weighted: &mut Vec<(usize, f64)>, limit: usize) {
    weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    weighted.truncate(limit);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PprParams {
    /// Teleport probability.
    pub teleport: f64,
    pub iterations: usize,
    pub tolerance: f64,
}

impl Default for PprParams {
    fn default() -> Self {
        PprParams {
            teleport: 0.15,
            iterations: 100,
            tolerance: 1e-8,
        }
    }
}

impl PprParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.teleport > 0.0 && self.teleport <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "teleport {} outside (0, 1]",
                self.teleport
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("ppr iterations must be positive".into()));
        }
        Ok(())
    }
}

pub fn one_hop_row(adj: &NormalizedAdjacency, center: usize, limit: usize) -> SamplingRow {
    let (cols, vals) = adj.row(center);
    let weighted = cols
        .iter()
        .zip(vals)
        .filter(|(&j, _)| j != center)
        .map(|(&j, &v)| (j, v))
        .collect();
    SamplingRow::from_weights(center, HeuristicKind::OneHop, weighted, limit)
}

/// Row `center` of `Ã²`, computed as the sparse row of `Ã` times `Ã`.
pub fn two_hop_weights(adj: &NormalizedAdjacency, center: usize) -> Vec<(usize, f64)> {
    let mut acc = vec![0.0; adj.n()];
    let mut touched = Vec::new();
    let (mid, mid_vals) = adj.row(center);
    for (&l, &a_cl) in mid.iter().zip(mid_vals) {
        let (cols, vals) = adj.row(l);
        for (&j, &a_lj) in cols.iter().zip(vals) {
            if acc[j] == 0.0 {
                touched.push(j);
            }
            acc[j] += a_cl * a_lj;
        }
    }
    touched.sort_unstable();
    touched.into_iter().map(|j| (j, acc[j])).collect()
}

pub fn two_hop_row(adj: &NormalizedAdjacency, center: usize, limit: usize) -> SamplingRow {
    let mut weighted = two_hop_weights(adj, center);
    weighted.retain(|&(j, _)| j != center);
    SamplingRow::from_weights(center, HeuristicKind::TwoHop, weighted, limit)
}

/// Feature rows scaled to unit Euclidean norm; all-zero rows stay zero.
pub fn unit_features(features: &Array2<f64>) -> Array2<f64> {
    let mut out = features.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

fn knn_row_from_similarities(
    center: usize,
    center_is_zero: bool,
    sims: &Array1<f64>,
    limit: usize,
) -> SamplingRow {
    if center_is_zero {
        return SamplingRow::empty(center, HeuristicKind::Knn);
    }
    let mut candidates: Vec<(usize, f64)> = sims
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != center)
        .map(|(j, &s)| (j, s))
        .collect();
    top_by_weight(&mut candidates, limit);
    let clamped: Vec<(usize, f64)> = candidates.iter().map(|&(j, s)| (j, s.max(0.0))).collect();
    if clamped.iter().all(|&(_, w)| w == 0.0) {
        let uniform = candidates.into_iter().map(|(j, _)| (j, 1.0)).collect();
        return SamplingRow::normalized(center, HeuristicKind::Knn, uniform);
    }
    let positive = clamped.into_iter().filter(|&(_, w)| w > 0.0).collect();
    SamplingRow::normalized(center, HeuristicKind::Knn, positive)
}

/// Cosine-similarity nearest neighbours of `center`.
pub fn knn_row(g: &Graph, center: usize, limit: usize) -> SamplingRow {
    let unit = unit_features(g.features());
    knn_row_with_unit(&unit, center, limit)
}

fn knn_row_with_unit(unit: &Array2<f64>, center: usize, limit: usize) -> SamplingRow {
    let x = unit.row(center);
    let zero = x.iter().all(|&v| v == 0.0);
    let sims = unit.dot(&x);
    knn_row_from_similarities(center, zero, &sims, limit)
}

/// Column `center` of `c (I − (1−c) Ā)⁻¹` by power iteration, with `Ā` the
/// column-normalized adjacency. Returns the iterate and whether it converged.
pub fn ppr_vector(g: &Graph, params: &PprParams, center: usize) -> (Vec<f64>, bool) {
    let n = g.n();
    let c = params.teleport;
    let inv_deg: Vec<f64> = (0..n)
        .map(|j| match g.degree(j) {
            0 => 0.0,
            d => 1.0 / d as f64,
        })
        .collect();
    let mut pi = vec![0.0; n];
    pi[center] = 1.0;
    let mut next = vec![0.0; n];
    let mut scaled = vec![0.0; n];
    for _ in 0..params.iterations {
        for j in 0..n {
            scaled[j] = pi[j] * inv_deg[j];
        }
        let mut change: f64 = 0.0;
        for i in 0..n {
            let s: f64 = g.neighbors(i).iter().map(|&j| scaled[j]).sum();
            let mut v = (1.0 - c) * s;
            if i == center {
                v += c;
            }
            next[i] = v;
            change = change.max((v - pi[i]).abs());
        }
        std::mem::swap(&mut pi, &mut next);
        if change < params.tolerance {
            return (pi, true);
        }
    }
    (pi, false)
}

fn ppr_row_inner(g: &Graph, params: &PprParams, center: usize, limit: usize) -> (SamplingRow, bool) {
    let (pi, converged) = ppr_vector(g, params, center);
    let weighted = pi
        .into_iter()
        .enumerate()
        .filter(|&(j, _)| j != center)
        .collect();
    (
        SamplingRow::from_weights(center, HeuristicKind::Ppr, weighted, limit),
        converged,
    )
}

pub fn ppr_row(g: &Graph, params: &PprParams, center: usize, limit: usize) -> SamplingRow {
    let (row, converged) = ppr_row_inner(g, params, center, limit);
    if !converged {
        log::warn!(
            "ppr for node {center} did not reach tolerance {} in {} iterations",
            params.tolerance,
            params.iterations
        );
    }
    row
}

/// The four heuristic rows for one center, in `HeuristicKind` order.
pub fn build_q(
    g: &Graph,
    adj: &NormalizedAdjacency,
    params: &PprParams,
    center: usize,
    limit: usize,
) -> Vec<SamplingRow> {
    vec![
        one_hop_row(adj, center, limit),
        two_hop_row(adj, center, limit),
        knn_row(g, center, limit),
        ppr_row(g, params, center, limit),
    ]
}

/// Sampling rows for every node, built once and read-only afterwards.
#[derive(Debug, Clone)]
pub struct QTable {
    rows: Vec<Vec<SamplingRow>>,
}

impl QTable {
    pub fn build(g: &Graph, adj: &NormalizedAdjacency, params: &PprParams, limit: usize) -> Self {
        let unit = unit_features(g.features());
        let mut unconverged = 0usize;
        let rows = (0..g.n())
            .map(|center| {
                let (ppr, ok) = ppr_row_inner(g, params, center, limit);
                if !ok {
                    unconverged += 1;
                }
                vec![
                    one_hop_row(adj, center, limit),
                    two_hop_row(adj, center, limit),
                    knn_row_with_unit(&unit, center, limit),
                    ppr,
                ]
            })
            .collect();
        if unconverged > 0 {
            log::warn!(
                "ppr hit the {}-iteration cap before tolerance {} for {unconverged} of {} nodes",
                params.iterations,
                params.tolerance,
                g.n()
            );
        }
        QTable { rows }
    }

    pub fn rows(&self, center: usize) -> &[SamplingRow] {
        &self.rows[center]
    }

    pub fn num_kinds(&self) -> usize {
        self.rows.first().map_or(HeuristicKind::ALL.len(), Vec::len)
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }
}
