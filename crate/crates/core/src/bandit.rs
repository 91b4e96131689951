//! Exponential-weights mixture over sampling heuristics.
//!
//! The heuristic weights `w` are scaled to probabilities `p` with an exploration
//! floor, `p` mixes the heuristic rows into one node distribution `ψ`, nodes are
//! drawn from `ψ`, and attention-derived significance scores are turned into an
//! importance-weighted reward per heuristic that drives the weight update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heuristics::SamplingRow;

/// `p_k = (1 − K·p_min)·w_k/Σw + p_min`.
pub fn probabilities_from_weights(weights: &[f64], p_min: f64) -> Result<Vec<f64>> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidState(format!("weights {weights:?} not finite and nonnegative")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidState("all bandit weights are zero".into()));
    }
    let k = weights.len() as f64;
    let spread = 1.0 - k * p_min;
    Ok(weights.iter().map(|&w| spread * (w / total) + p_min).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub p_min: f64,
    /// Epochs between weight updates.
    pub period: usize,
    /// Nodes sampled per center.
    pub samples: usize,
    /// Number of completed weight updates.
    pub updates: usize,
}

impl BanditState {
    pub fn new(kinds: usize, p_min: f64, period: usize, samples: usize) -> Result<Self> {
        if kinds == 0 {
            return Err(Error::InvalidConfig("bandit needs at least one arm".into()));
        }
        if !(p_min > 0.0) || kinds as f64 * p_min >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "p_min {p_min} must be positive with K·p_min < 1 (K = {kinds})"
            )));
        }
        if period == 0 || samples == 0 {
            return Err(Error::InvalidConfig("update period and sample count must be positive".into()));
        }
        let weights = vec![1.0; kinds];
        let probs = probabilities_from_weights(&weights, p_min)?;
        Ok(BanditState {
            weights,
            probs,
            p_min,
            period,
            samples,
            updates: 0,
        })
    }

    pub fn kinds(&self) -> usize {
        self.weights.len()
    }

    /// Step size `√(ln(N/0.1) / (K·T))` shared by every arm.
    pub fn learning_rate(&self) -> f64 {
        ((self.samples as f64 / 0.1).ln() / (self.kinds() * self.period) as f64).sqrt()
    }

    /// Applies `w_k ← w_k·exp((p_min/2)(r_k + 1/p_k)·η)` using the current `p`,
    /// rescales weights by their maximum, and refreshes `p`.
    pub fn update(&mut self, rewards: &[f64]) -> Result<()> {
        if rewards.len() != self.kinds() {
            return Err(Error::Dimension(format!(
                "{} rewards for {} arms",
                rewards.len(),
                self.kinds()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            log::warn!("skipping bandit update with non-finite rewards {rewards:?}");
            return Ok(());
        }
        let eta = self.learning_rate();
        let log_w: Vec<f64> = self
            .weights
            .iter()
            .zip(rewards)
            .zip(&self.probs)
            .map(|((&w, &r), &p)| w.ln() + 0.5 * self.p_min * (r + 1.0 / p) * eta)
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // underflow to exactly zero is harmless: p keeps its floor
        self.weights = log_w.iter().map(|&l| (l - max).exp()).collect();
        self.probs = probabilities_from_weights(&self.weights, self.p_min)?;
        self.updates += 1;
        Ok(())
    }
}

/// The mixed node distribution `ψ` for one center, over the union of supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Mixture {
    pub fn prob(&self, node: usize) -> f64 {
        self.support
            .binary_search(&node)
            .map_or(0.0, |k| self.probs[k])
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn uniform(nodes: impl IntoIterator<Item = usize>) -> Self {
        let mut support: Vec<usize> = nodes.into_iter().collect();
        support.sort_unstable();
        support.dedup();
        let p = 1.0 / support.len().max(1) as f64;
        let probs = vec![p; support.len()];
        Mixture { support, probs }
    }
}

/// `ψ_i = Σ_k p_k Q_{k,i}` with empty rows dropped and `p` renormalized.
pub fn combined_distribution(probs: &[f64], rows: &[SamplingRow]) -> Result<Mixture> {
    if probs.len() != rows.len() {
        return Err(Error::Dimension(format!(
            "{} probabilities for {} rows",
            probs.len(),
            rows.len()
        )));
    }
    let live: f64 = probs
        .iter()
        .zip(rows)
        .filter(|(_, r)| !r.is_empty())
        .map(|(&p, _)| p)
        .sum();
    let center = rows.first().map_or(0, |r| r.center);
    if live <= 0.0 {
        return Err(Error::NoCandidates(center));
    }
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for (&p, row) in probs.iter().zip(rows) {
        if row.is_empty() || p == 0.0 {
            continue;
        }
        let scale = p / live;
        pairs.extend(row.support.iter().zip(&row.probs).map(|(&j, &q)| (j, scale * q)));
    }
    pairs.sort_by_key(|&(j, _)| j);
    let mut support = Vec::new();
    let mut out: Vec<f64> = Vec::new();
    for (j, v) in pairs {
        if support.last() == Some(&j) {
            *out.last_mut().unwrap() += v;
        } else {
            support.push(j);
            out.push(v);
        }
    }
    Ok(Mixture {
        support,
        probs: out,
    })
}

/// Draws up to `count` distinct nodes by successive weighted draws, renormalizing
/// over the remaining candidates after each draw.
pub fn sample_nodes<R: Rng + ?Sized>(psi: &Mixture, count: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> = psi
        .support
        .iter()
        .zip(&psi.probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&j, &p)| (j, p))
        .collect();
    if remaining.len() <= count {
        return remaining.into_iter().map(|(j, _)| j).collect();
    }
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().map(|&(_, p)| p).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = remaining.len() - 1;
        for (idx, &(_, p)) in remaining.iter().enumerate() {
            acc += p;
            if target < acc {
                chosen = idx;
                break;
            }
        }
        picked.push(remaining.swap_remove(chosen).0);
    }
    picked
}

/// Per-heuristic reward `r_k = Σ_i s_i Q_{k,i} / ψ_i` for one sequence, with `s`
/// normalized to unit sum first.
pub fn compute_reward(
    significance: &[f64],
    sampled: &[usize],
    rows: &[SamplingRow],
    psi: &Mixture,
) -> Result<Vec<f64>> {
    if significance.len() != sampled.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} sampled nodes",
            significance.len(),
            sampled.len()
        )));
    }
    let total: f64 = significance.iter().sum();
    let mut rewards = vec![0.0; rows.len()];
    if sampled.is_empty() || total <= 0.0 {
        return Ok(rewards);
    }
    for (&node, &s) in sampled.iter().zip(significance) {
        let p = psi.prob(node);
        if p <= 0.0 {
            return Err(Error::Consistency(format!(
                "sampled node {node} has zero mixture probability"
            )));
        }
        let weight = s / total / p;
        for (r, row) in rewards.iter_mut().zip(rows) {
            *r += weight * row.prob(node);
        }
    }
    Ok(rewards)
}

/// Running mean of per-sequence reward vectors within one update window.
#[derive(Debug, Clone, Default)]
pub struct RewardAccumulator {
    sums: Vec<f64>,
    count: usize,
}

impl RewardAccumulator {
    pub fn new(kinds: usize) -> Self {
        RewardAccumulator {
            sums: vec![0.0; kinds],
            count: 0,
        }
    }

    pub fn add(&mut self, reward: &[f64]) {
        for (s, r) in self.sums.iter_mut().zip(reward) {
            *s += r;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.sums.iter().map(|s| s / c).collect()
    }
}

/// One row of the weight trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTraceRow {
    pub epoch: usize,
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub rewards: Vec<f64>,
}
