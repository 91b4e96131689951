//! Token sequences: center + sampled fine nodes + super-nodes + global tokens,
//! their proximity encodings, and the resolved numeric input for one forward pass.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coarsening::Partition;
use crate::graph::NormalizedAdjacency;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Center = 0,
    Fine = 1,
    Super = 2,
    Global = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    /// Node id (center/fine), super-node id, or global slot.
    pub id: usize,
    pub valid: bool,
}

/// Token layout `[center, fine × fine_slots, super × n_s, global × n_g]`;
/// fine slots beyond the sampled nodes are padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSequence {
    pub center: usize,
    pub fine: Vec<usize>,
    pub fine_slots: usize,
    pub supers: Vec<usize>,
    pub global_count: usize,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        1 + self.fine_slots + self.supers.len() + self.global_count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.len());
        out.push(Token {
            kind: TokenKind::Center,
            id: self.center,
            valid: true,
        });
        for slot in 0..self.fine_slots {
            out.push(match self.fine.get(slot) {
                Some(&id) => Token {
                    kind: TokenKind::Fine,
                    id,
                    valid: true,
                },
                None => Token {
                    kind: TokenKind::Fine,
                    id: 0,
                    valid: false,
                },
            });
        }
        out.extend(self.supers.iter().map(|&id| Token {
            kind: TokenKind::Super,
            id,
            valid: true,
        }));
        out.extend((0..self.global_count).map(|id| Token {
            kind: TokenKind::Global,
            id,
            valid: true,
        }));
        out
    }

    /// Sequence positions of the sampled (unpadded) fine tokens.
    pub fn fine_positions(&self) -> std::ops::Range<usize> {
        1..1 + self.fine.len()
    }
}

/// Builds a sequence from bandit-sampled fine nodes, `n_s` super-nodes drawn
/// uniformly without replacement from clusters other than the center's own,
/// and `n_g` global tokens.
pub fn assemble_sequence<R: Rng + ?Sized>(
    partition: &Partition,
    center: usize,
    fine: Vec<usize>,
    fine_slots: usize,
    n_s: usize,
    n_g: usize,
    rng: &mut R,
) -> InputSequence {
    let own = partition.cluster_of(center);
    let available = partition.num_clusters().saturating_sub(1);
    let take = if n_s > available {
        log::warn!("requested {n_s} super-nodes but only {available} are available; clipping");
        available
    } else {
        n_s
    };
    let supers = index::sample(rng, available, take)
        .into_iter()
        .map(|k| if k >= own { k + 1 } else { k })
        .collect();
    let mut fine = fine;
    fine.truncate(fine_slots);
    InputSequence {
        center,
        fine,
        fine_slots,
        supers,
        global_count: n_g,
    }
}

/// Rows `e_centerᵀ Ã^m` for `m = 0..M-1`.
#[derive(Debug, Clone)]
pub struct CenterProximity {
    pub center: usize,
    powers: Vec<Vec<f64>>,
}

impl CenterProximity {
    pub fn new(adj: &NormalizedAdjacency, center: usize, order: usize) -> Self {
        let n = adj.n();
        let mut powers = Vec::with_capacity(order);
        let mut current = vec![0.0; n];
        current[center] = 1.0;
        for m in 0..order {
            if m > 0 {
                let mut next = vec![0.0; n];
                adj.propagate(&current, &mut next);
                current = next;
            }
            powers.push(current.clone());
        }
        CenterProximity { center, powers }
    }

    pub fn order(&self) -> usize {
        self.powers.len()
    }

    /// `Φ_m(center, node)` for every `m`.
    pub fn node(&self, node: usize) -> Vec<f64> {
        self.powers.iter().map(|p| p[node]).collect()
    }

    /// Partition-lifted encoding `Σ_{l∈C} Ã^m[center, l] / √|C|`.
    pub fn cluster(&self, members: &[usize]) -> Vec<f64> {
        let scale = 1.0 / (members.len() as f64).sqrt();
        self.powers
            .iter()
            .map(|p| members.iter().map(|&l| p[l]).sum::<f64>() * scale)
            .collect()
    }

    pub fn encode(&self, seq: &InputSequence, members: &[Vec<usize>]) -> ProximityEncoding {
        let tokens = seq.tokens();
        let mut values = Array2::zeros((tokens.len(), self.order()));
        let mut learned = vec![None; tokens.len()];
        for (t, tok) in tokens.iter().enumerate() {
            let row = match tok.kind {
                TokenKind::Center | TokenKind::Fine if tok.valid => self.node(tok.id),
                TokenKind::Super => self.cluster(&members[tok.id]),
                TokenKind::Global => {
                    learned[t] = Some(tok.id);
                    continue;
                }
                _ => continue,
            };
            values.row_mut(t).assign(&ndarray::Array1::from(row));
        }
        ProximityEncoding { values, learned }
    }
}

/// Per-token M-vectors; rows of global tokens come from learnable parameters
/// and are left as zeros here.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityEncoding {
    pub values: Array2<f64>,
    /// Global slot for tokens whose encoding is learned.
    pub learned: Vec<Option<usize>>,
}

pub fn encode_proximity(
    adj: &NormalizedAdjacency,
    members: &[Vec<usize>],
    seq: &InputSequence,
    order: usize,
) -> ProximityEncoding {
    CenterProximity::new(adj, seq.center, order).encode(seq, members)
}

/// Compressed sparse rows of a feature matrix.
#[derive(Debug, Clone)]
pub struct SparseFeatures {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    dim: usize,
}

impl SparseFeatures {
    pub fn from_dense(x: &Array2<f64>) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        SparseFeatures {
            offsets,
            cols,
            vals,
            dim: x.ncols(),
        }
    }

    pub fn row(&self, i: usize) -> FeatureRow<'_> {
        let r = self.offsets[i]..self.offsets[i + 1];
        FeatureRow {
            cols: &self.cols[r.clone()],
            vals: &self.vals[r],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureRow<'a> {
    pub cols: &'a [usize],
    pub vals: &'a [f64],
}

/// Everything the network reads for one sequence.
#[derive(Debug, Clone)]
pub struct TokenInput<'a> {
    pub kinds: Vec<TokenKind>,
    /// Raw feature row for node and super-node tokens.
    pub features: Vec<Option<FeatureRow<'a>>>,
    pub global_slot: Vec<Option<usize>>,
    pub valid: Vec<bool>,
    pub proximity: ProximityEncoding,
    pub fine_positions: std::ops::Range<usize>,
}

impl<'a> TokenInput<'a> {
    pub fn new(
        seq: &InputSequence,
        proximity: ProximityEncoding,
        node_features: &'a SparseFeatures,
        super_features: &'a SparseFeatures,
    ) -> Self {
        let tokens = seq.tokens();
        let mut kinds = Vec::with_capacity(tokens.len());
        let mut features = Vec::with_capacity(tokens.len());
        let mut global_slot = Vec::with_capacity(tokens.len());
        let mut valid = Vec::with_capacity(tokens.len());
        for tok in &tokens {
            kinds.push(tok.kind);
            valid.push(tok.valid);
            features.push(match tok.kind {
                TokenKind::Center | TokenKind::Fine if tok.valid => Some(node_features.row(tok.id)),
                TokenKind::Super => Some(super_features.row(tok.id)),
                _ => None,
            });
            global_slot.push((tok.kind == TokenKind::Global).then_some(tok.id));
        }
        TokenInput {
            kinds,
            features,
            global_slot,
            valid,
            proximity,
            fine_positions: seq.fine_positions(),
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)], Array2::ones((3, 1)), None)
            .unwrap()
            .0
    }

    #[test]
    fn plain_sequence_length() {
        let part = Partition::identity(30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = assemble_sequence(&part, 0, (1..21).collect(), 20, 0, 0, &mut rng);
        assert_eq!(seq.len(), 21);
        assert_eq!(seq.tokens()[0].kind, TokenKind::Center);
    }

    #[test]
    fn short_sample_is_padded() {
        let part = Partition::identity(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = assemble_sequence(&part, 0, vec![1, 2], 20, 2, 1, &mut rng);
        let toks = seq.tokens();
        assert_eq!(toks.len(), 24);
        assert_eq!(toks.iter().filter(|t| !t.valid).count(), 18);
        assert!(seq.supers.iter().all(|&s| s != 0));
    }

    #[test]
    fn supers_exclude_own_cluster_and_clip() {
        let part = Partition::from_assignment(&[0, 0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = assemble_sequence(&part, 1, vec![], 0, 5, 0, &mut rng);
        let mut s = seq.supers.clone();
        s.sort();
        assert_eq!(s, vec![1, 2]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let part = Partition::identity(40);
        let a = assemble_sequence(&part, 3, vec![1], 4, 6, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let b = assemble_sequence(&part, 3, vec![1], 4, 6, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn proximity_zeroth_power_is_identity() {
        let adj = normalize_adjacency(&path3());
        let prox = CenterProximity::new(&adj, 0, 10);
        assert_eq!(prox.node(0)[0], 1.0);
        assert_eq!(prox.node(2)[0], 0.0);
        assert_eq!(prox.node(2)[1], 0.0);
        assert!(prox.node(2)[2] > 0.0);
    }

    #[test]
    fn global_rows_are_learned() {
        let adj = normalize_adjacency(&path3());
        let seq = InputSequence {
            center: 0,
            fine: vec![2],
            fine_slots: 2,
            supers: vec![],
            global_count: 2,
        };
        let enc = encode_proximity(&adj, &[], &seq, 3);
        assert_eq!(enc.learned, vec![None, None, None, Some(0), Some(1)]);
        assert!(enc.values.iter().all(|&v| v >= 0.0));
    }
}
