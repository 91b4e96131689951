//! Newman-style planted-partition networks with class-clustered binary attributes.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewmanConfig {
    pub n: usize,
    pub classes: usize,
    /// Mean number of intra-class edges per node.
    pub z_in: f64,
    /// Mean number of inter-class edges per node.
    pub z_out: f64,
    /// Total attribute dimension; each class owns a block of `attr_dim / classes`.
    pub attr_dim: usize,
    /// Expected ones inside a node's own class block.
    pub h_in: f64,
    /// Expected ones across all foreign blocks.
    pub h_out: f64,
    pub seed: u64,
}

impl Default for NewmanConfig {
    fn default() -> Self {
        NewmanConfig {
            n: 128,
            classes: 4,
            z_in: 12.0,
            z_out: 4.0,
            attr_dim: 200,
            h_in: 12.0,
            h_out: 4.0,
            seed: 0,
        }
    }
}

impl NewmanConfig {
    /// Config with `z_in = 16·alpha`, `z_out = 16 − z_in`.
    pub fn with_homophily(alpha: f64, seed: u64) -> Self {
        let z_in = 16.0 * alpha;
        NewmanConfig {
            z_in,
            z_out: 16.0 - z_in,
            seed,
            ..Default::default()
        }
    }

    fn block(&self) -> usize {
        self.attr_dim / self.classes
    }

    /// Edge probabilities `(intra, inter)` for a single node pair.
    pub fn edge_probabilities(&self) -> Result<(f64, f64)> {
        let m = self.n / self.classes;
        let p_in = if m > 1 { self.z_in / (m - 1) as f64 } else { 0.0 };
        let p_out = if self.n > m {
            self.z_out / (self.n - m) as f64
        } else {
            0.0
        };
        for (name, p) in [("intra", p_in), ("inter", p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "{name}-class edge probability {p} outside [0, 1]"
                )));
            }
        }
        Ok((p_in, p_out))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || !self.n.is_multiple_of(self.classes) {
            return Err(Error::InvalidConfig(format!(
                "{} nodes not divisible into {} classes",
                self.n, self.classes
            )));
        }
        if self.classes < 2 || !self.attr_dim.is_multiple_of(self.classes) || self.attr_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "attribute dimension {} not divisible into {} blocks",
                self.attr_dim, self.classes
            )));
        }
        let h = self.block() as f64;
        let p_in = self.h_in / h;
        let p_out = self.h_out / ((self.classes - 1) as f64 * h);
        if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
            return Err(Error::InvalidConfig("attribute probability outside [0, 1]".into()));
        }
        self.edge_probabilities().map(|_| ())
    }
}

/// Generates the graph; node `i` belongs to class `i / (n / classes)`.
pub fn generate_newman(cfg: &NewmanConfig) -> Result<Graph> {
    cfg.validate()?;
    let (p_in, p_out) = cfg.edge_probabilities()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.n / cfg.classes;
    let labels: Vec<usize> = (0..cfg.n).map(|i| i / m).collect();

    let mut edges = Vec::new();
    for u in 0..cfg.n {
        for v in (u + 1)..cfg.n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let h = cfg.block();
    let attr_in = cfg.h_in / h as f64;
    let attr_out = cfg.h_out / ((cfg.classes - 1) * h) as f64;
    let mut features = Array2::zeros((cfg.n, cfg.attr_dim));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let own = labels[i] * h..(labels[i] + 1) * h;
        for (d, x) in row.iter_mut().enumerate() {
            let p = if own.contains(&d) { attr_in } else { attr_out };
            if rng.random::<f64>() < p {
                *x = 1.0;
            }
        }
    }
    let (g, _) = Graph::from_edges(cfg.n, &edges, features, Some(labels))?;
    g.with_num_classes(cfg.classes)
}

/// `z_in / (z_in + z_out)`.
pub fn expected_homophily(cfg: &NewmanConfig) -> Result<f64> {
    let total = cfg.z_in + cfg.z_out;
    if total <= 0.0 {
        return Err(Error::InvalidConfig("z_in + z_out must be positive".into()));
    }
    Ok(cfg.z_in / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::homophily;

    #[test]
    fn expected_homophily_values() {
        let cfg = |z_in, z_out| NewmanConfig {
            z_in,
            z_out,
            ..Default::default()
        };
        assert_eq!(expected_homophily(&cfg(14.0, 2.0)).unwrap(), 0.875);
        assert_eq!(expected_homophily(&cfg(0.0, 16.0)).unwrap(), 0.0);
        assert_eq!(expected_homophily(&cfg(4.0, 12.0)).unwrap(), 0.25);
        assert!(expected_homophily(&cfg(0.0, 0.0)).is_err());
    }

    #[test]
    fn default_mean_degree_near_sixteen() {
        let g = generate_newman(&NewmanConfig::default()).unwrap();
        let mean = 2.0 * g.num_edges() as f64 / g.n() as f64;
        assert!((mean - 16.0).abs() <= 1.5, "mean degree {mean}");
    }

    #[test]
    fn binary_attributes_of_width_200() {
        let g = generate_newman(&NewmanConfig::default()).unwrap();
        assert_eq!(g.feature_dim(), 200);
        assert!(g.features().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn pure_homophily_without_inter_edges() {
        let cfg = NewmanConfig {
            z_in: 16.0,
            z_out: 0.0,
            ..Default::default()
        };
        assert_eq!(homophily(&generate_newman(&cfg).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn rejects_impossible_probability() {
        let cfg = NewmanConfig {
            z_in: 40.0,
            z_out: 0.0,
            ..Default::default()
        };
        assert!(matches!(generate_newman(&cfg), Err(Error::InvalidConfig(_))));
        let cfg = NewmanConfig {
            n: 130,
            ..Default::default()
        };
        assert!(generate_newman(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_graph() {
        let a = generate_newman(&NewmanConfig::default()).unwrap();
        let b = generate_newman(&NewmanConfig::default()).unwrap();
        assert_eq!(a.edges().collect::<Vec<_>>(), b.edges().collect::<Vec<_>>());
        assert_eq!(a.features(), b.features());
    }
}
