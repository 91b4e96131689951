//! Training loop with periodic bandit updates, bagged evaluation, and the
//! fixed-strategy homophily sweep.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{
    combined_distribution, compute_reward, sample_nodes, BanditState, BanditTraceRow, Mixture, RewardAccumulator,
};
use crate::coarsening::{coarse_algebra, coarsen, CoarseGraph, CoarsenMethod, Partition};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, DataSplit, Graph, NormalizedAdjacency};
use crate::heuristics::{HeuristicKind, PprParams, QTable};
use crate::model::{
    assemble_sequence, significance, CenterProximity, ModelConfig, ModelParams, SparseFeatures, TokenInput,
};
use crate::synthetic::{generate_newman, NewmanConfig};

/// Node-sampling policy: the adaptive bandit, or one heuristic pinned with
/// probability one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Adaptive,
    Fixed(HeuristicKind),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Adaptive => f.write_str("adaptive"),
            Strategy::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(Strategy::Adaptive);
        }
        s.parse().map(Strategy::Fixed).map_err(|_| {
            Error::InvalidConfig(format!("unknown strategy {s:?} (adaptive, one-hop, two-hop, knn, ppr)"))
        })
    }
}

/// Every knob of a training run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Bandit update and resampling period `T`, in epochs.
    pub period: usize,
    /// Sequences per center node `𝒮`.
    pub augmentations: usize,
    pub batch_size: usize,
    /// Fine nodes per sequence `N`.
    pub samples: usize,
    pub supers: usize,
    pub globals: usize,
    pub proximity_order: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub p_min: f64,
    pub truncation: usize,
    pub lr: f64,
    pub warmup: usize,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub coarsen_rate: f64,
    pub coarsen_method: CoarsenMethod,
    pub ppr_teleport: f64,
    pub ppr_iterations: usize,
    pub ppr_tolerance: f64,
    pub strategy: Strategy,
    /// Validation is evaluated every this many epochs.
    pub eval_every: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    /// L1-normalize feature rows before training.
    pub normalize_features: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            period: 100,
            augmentations: 16,
            batch_size: 32,
            samples: 20,
            supers: 3,
            globals: 2,
            proximity_order: 10,
            layers: 3,
            hidden: 128,
            heads: 8,
            dropout: 0.5,
            p_min: 0.1,
            truncation: 50,
            lr: 2e-4,
            warmup: 100,
            final_lr: 1e-9,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            coarsen_rate: 0.01,
            coarsen_method: CoarsenMethod::EdgeMatch,
            ppr_teleport: 0.15,
            ppr_iterations: 100,
            ppr_tolerance: 1e-8,
            strategy: Strategy::Adaptive,
            eval_every: 1,
            train_frac: 0.6,
            val_frac: 0.2,
            normalize_features: true,
            threads: 1,
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Sets one field by its config-file name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "period" => self.period = parse_value(key, v)?,
            "augmentations" => self.augmentations = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "samples" => self.samples = parse_value(key, v)?,
            "supers" => self.supers = parse_value(key, v)?,
            "globals" => self.globals = parse_value(key, v)?,
            "proximity_order" => self.proximity_order = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "p_min" => self.p_min = parse_value(key, v)?,
            "truncation" => self.truncation = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "warmup" => self.warmup = parse_value(key, v)?,
            "final_lr" => self.final_lr = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "coarsen_rate" => self.coarsen_rate = parse_value(key, v)?,
            "coarsen_method" => {
                self.coarsen_method = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("{key}: unknown method {v:?}")))?
            }
            "ppr_teleport" => self.ppr_teleport = parse_value(key, v)?,
            "ppr_iterations" => self.ppr_iterations = parse_value(key, v)?,
            "ppr_tolerance" => self.ppr_tolerance = parse_value(key, v)?,
            "strategy" => {
                self.strategy = v
                    .parse()
                    .map_err(|e: Error| Error::InvalidConfig(format!("{key}: {e}")))?
            }
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "train_frac" => self.train_frac = parse_value(key, v)?,
            "val_frac" => self.val_frac = parse_value(key, v)?,
            "normalize_features" => self.normalize_features = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("{key}: unknown key"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. Does not validate.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!("line {}: expected key = value", idx + 1)));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Parses a config file over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Round-trippable `key = value` rendering.
    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = json {
            for (k, v) in map {
                let rendered = match k.as_str() {
                    "coarsen_method" => self.coarsen_method.to_string(),
                    "strategy" => self.strategy.to_string(),
                    _ => v.to_string(),
                };
                let _ = writeln!(out, "{k} = {rendered}");
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("period", self.period),
            ("augmentations", self.augmentations),
            ("batch_size", self.batch_size),
            ("samples", self.samples),
            ("proximity_order", self.proximity_order),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("truncation", self.truncation),
            ("eval_every", self.eval_every),
            ("threads", self.threads),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{key}: must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "heads: hidden {} is not divisible by {}",
                self.hidden, self.heads
            )));
        }
        if !(self.p_min > 0.0) || HeuristicKind::ALL.len() as f64 * self.p_min >= 1.0 {
            return Err(Error::InvalidConfig(format!("p_min: {} violates 0 < K·p_min < 1", self.p_min)));
        }
        let unit_open = [
            ("dropout", self.dropout, true),
            ("beta1", self.beta1, true),
            ("beta2", self.beta2, true),
        ];
        for (key, v, closed_low) in unit_open {
            let ok = if closed_low { (0.0..1.0).contains(&v) } else { v > 0.0 && v < 1.0 };
            if !ok {
                return Err(Error::InvalidConfig(format!("{key}: {v} outside [0, 1)")));
            }
        }
        for (key, v) in [("lr", self.lr), ("final_lr", self.final_lr), ("eps", self.eps)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{key}: must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight_decay: negative value {}", self.weight_decay)));
        }
        if !(self.coarsen_rate > 0.0 && self.coarsen_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("coarsen_rate: {} outside (0, 1]", self.coarsen_rate)));
        }
        if !(self.train_frac > 0.0) || !(self.val_frac >= 0.0) || self.train_frac + self.val_frac > 1.0 {
            return Err(Error::InvalidConfig("train_frac/val_frac: invalid proportions".into()));
        }
        self.ppr().validate().map_err(|e| Error::InvalidConfig(format!("ppr_*: {e}")))?;
        Ok(())
    }

    pub fn ppr(&self) -> PprParams {
        PprParams {
            teleport: self.ppr_teleport,
            iterations: self.ppr_iterations,
            tolerance: self.ppr_tolerance,
        }
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            classes,
            proximity_order: self.proximity_order,
            global_tokens: self.globals,
            dropout: self.dropout,
        }
    }

    /// Linear warmup from `lr/warmup` to `lr` at epoch `warmup`, then linear
    /// decay reaching `final_lr` at epoch `epochs`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.warmup && self.warmup > 0 {
            return self.lr * epoch.max(1) as f64 / self.warmup as f64;
        }
        if self.epochs <= self.warmup {
            return self.final_lr;
        }
        let frac = ((epoch - self.warmup) as f64 / (self.epochs - self.warmup) as f64).min(1.0);
        self.lr + (self.final_lr - self.lr) * frac
    }
}

/// Decoupled-weight-decay Adam over flattened parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(size: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; size],
            v: vec![0.0; size],
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            *p -= lr * (update + self.weight_decay * *p);
        }
    }
}

/// Graph-derived state shared by training and evaluation: normalized
/// adjacency, heuristic rows, coarsening, and sparse token features.
pub struct Workspace<'g> {
    pub graph: &'g Graph,
    pub labels: &'g [usize],
    pub adj: NormalizedAdjacency,
    pub q: QTable,
    pub partition: Partition,
    pub coarse: CoarseGraph,
    members: Vec<Vec<usize>>,
    node_features: SparseFeatures,
    super_features: SparseFeatures,
    pub coarsen_seconds: f64,
    pub heuristic_seconds: f64,
}

impl<'g> Workspace<'g> {
    pub fn new(graph: &'g Graph, cfg: &TrainConfig, partition: Option<Partition>) -> Result<Self> {
        let labels = graph
            .labels()
            .ok_or_else(|| Error::InvalidInput("training needs node labels".into()))?;
        let adj = normalize_adjacency(graph);
        let started = Instant::now();
        let q = QTable::build(graph, &adj, &cfg.ppr(), cfg.truncation);
        let heuristic_seconds = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let partition = match partition {
            Some(p) if p.n() == graph.n() => p,
            Some(p) => {
                return Err(Error::Dimension(format!(
                    "partition covers {} nodes, graph has {}",
                    p.n(),
                    graph.n()
                )))
            }
            None => coarsen(graph, cfg.coarsen_rate, cfg.coarsen_method)?,
        };
        let coarse = coarse_algebra(graph, &partition)?;
        let coarsen_seconds = started.elapsed().as_secs_f64();
        log::info!(
            "coarsened {} nodes into {} super-nodes in {coarsen_seconds:.3}s",
            graph.n(),
            partition.num_clusters()
        );
        Ok(Workspace {
            graph,
            labels,
            adj,
            q,
            members: partition.members(),
            node_features: SparseFeatures::from_dense(graph.features()),
            super_features: SparseFeatures::from_dense(&coarse.features),
            partition,
            coarse,
            coarsen_seconds,
            heuristic_seconds,
        })
    }

    /// Samples `count` sequences for `center` with heuristic probabilities `probs`.
    fn sample_center(
        &self,
        center: usize,
        probs: &[f64],
        count: usize,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<CenterSequences<'_>> {
        let psi = match combined_distribution(probs, self.q.rows(center)) {
            Ok(m) => Some(m),
            Err(Error::NoCandidates(_)) => None,
            Err(e) => return Err(e),
        };
        let prox = CenterProximity::new(&self.adj, center, cfg.proximity_order);
        let mut sequences = Vec::with_capacity(count);
        for _ in 0..count {
            let fine = psi
                .as_ref()
                .map_or_else(Vec::new, |m| sample_nodes(m, cfg.samples, rng));
            let seq = assemble_sequence(
                &self.partition,
                center,
                fine,
                cfg.samples,
                cfg.supers,
                cfg.globals,
                rng,
            );
            let input = TokenInput::new(
                &seq,
                prox.encode(&seq, &self.members),
                &self.node_features,
                &self.super_features,
            );
            sequences.push(Sampled { fine: seq.fine, input });
        }
        Ok(CenterSequences {
            center,
            psi,
            sequences,
        })
    }

    fn sample_all(
        &self,
        nodes: &[usize],
        probs: &[f64],
        count: usize,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<CenterSequences<'_>>> {
        nodes
            .iter()
            .map(|&c| self.sample_center(c, probs, count, cfg, rng))
            .collect()
    }
}

struct Sampled<'w> {
    fine: Vec<usize>,
    input: TokenInput<'w>,
}

struct CenterSequences<'w> {
    center: usize,
    psi: Option<Mixture>,
    sequences: Vec<Sampled<'w>>,
}

/// Heuristic probabilities the sampler uses under `strategy`.
pub fn sampling_probs(strategy: Strategy, bandit: &BanditState) -> Vec<f64> {
    match strategy {
        Strategy::Adaptive => bandit.probs.clone(),
        Strategy::Fixed(kind) => {
            let mut p = vec![0.0; bandit.kinds()];
            p[kind.index()] = 1.0;
            p
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
    /// Whether sequences were (re)sampled at the start of this epoch.
    pub resampled: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
    pub bandit: Vec<BanditTraceRow>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub bandit_seconds: f64,
    pub train_seconds: f64,
}

impl MetricsLog {
    /// Per-epoch loss, validation accuracy and learning rate. Deterministic for
    /// a fixed seed; wall-clock times live in `timing_csv`.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy,val_loss,lr\n");
        for e in &self.epochs {
            let val = e.val_accuracy.map_or_else(String::new, |v| format!("{v:.6}"));
            let val_loss = e.val_loss.map_or_else(String::new, |v| format!("{v:.10}"));
            let _ = writeln!(out, "{},{:.10},{val},{val_loss},{:.6e}", e.epoch, e.train_loss, e.lr);
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds,resampled\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{}", e.epoch, e.seconds, e.resampled);
        }
        out
    }

    pub fn bandit_csv(&self) -> String {
        let mut out = String::from("epoch");
        for field in ["w", "p", "r"] {
            for k in HeuristicKind::ALL {
                let _ = write!(out, ",{field}_{}", k.name());
            }
        }
        out.push('\n');
        for row in &self.bandit {
            let _ = write!(out, "{}", row.epoch);
            for v in row.weights.iter().chain(&row.probs).chain(&row.rewards) {
                let _ = write!(out, ",{v:.8e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Result of a finished (or diverged) run. `params` holds the best-validation
/// model, falling back to the last good parameters.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub bandit: BanditState,
    pub metrics: MetricsLog,
    /// `(epoch, loss)` if training stopped on a non-finite loss.
    pub diverged: Option<(usize, f64)>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sum of per-sequence gradients and losses for one batch, split into
/// contiguous chunks across threads and reduced in chunk order.
fn batch_gradient(
    params: &ModelParams,
    items: &[(&TokenInput, usize)],
    scale: f64,
    threads: usize,
    dropout_seeds: &[u64],
) -> Result<(ModelParams, f64)> {
    let work = |range: std::ops::Range<usize>| -> Result<(ModelParams, f64)> {
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        for i in range {
            let (input, target) = items[i];
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seeds[i]);
            let pass = params.forward(input, Some(&mut rng))?;
            loss += params.backward(input, &pass, target, scale, &mut grad)?;
        }
        Ok((grad, loss))
    };
    let threads = threads.min(items.len()).max(1);
    if threads == 1 {
        return work(0..items.len());
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<(ModelParams, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = (t * chunk).min(items.len())..((t + 1) * chunk).min(items.len());
                s.spawn(move || work(range))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut parts = parts.into_iter();
    let (mut grad, mut loss) = parts.next().expect("at least one chunk")?;
    for part in parts {
        let (g, l) = part?;
        grad.add_scaled(&g, 1.0);
        loss += l;
    }
    Ok((grad, loss))
}

/// Bagged prediction: class probabilities averaged over the sequences of a center.
fn bagged_probs(params: &ModelParams, sequences: &[Sampled]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; params.config.classes];
    for s in sequences {
        let p = params.predict(&s.input)?;
        total.iter_mut().zip(p.iter()).for_each(|(t, v)| *t += v);
    }
    let count = sequences.len().max(1) as f64;
    Ok(total.into_iter().map(|t| t / count).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Bagged accuracy and mean cross-entropy over `centers`.
fn validation_scores(params: &ModelParams, ws: &Workspace, centers: &[CenterSequences]) -> Result<(f64, f64)> {
    if centers.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for c in centers {
        let p = bagged_probs(params, &c.sequences)?;
        let y = ws.labels[c.center];
        if argmax(&p) == y {
            correct += 1;
        }
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
    }
    let n = centers.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Per-node bagged predictions and the resulting accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `(node, predicted class, averaged class probabilities)`.
    pub predictions: Vec<(usize, usize, Vec<f64>)>,
}

/// Classifies `nodes` by averaging class probabilities over `augmentations`
/// sequences each, sampled with the frozen heuristic probabilities `probs`.
pub fn evaluate(
    params: &ModelParams,
    ws: &Workspace,
    probs: &[f64],
    nodes: &[usize],
    augmentations: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Evaluation> {
    let mut rng = rng_stream(seed, 7);
    let mut predictions = Vec::with_capacity(nodes.len());
    let mut correct = 0usize;
    for &node in nodes {
        let c = ws.sample_center(node, probs, augmentations.max(1), cfg, &mut rng)?;
        let p = bagged_probs(params, &c.sequences)?;
        let pred = argmax(&p);
        if pred == ws.labels[node] {
            correct += 1;
        }
        predictions.push((node, pred, p));
    }
    let accuracy = if nodes.is_empty() {
        0.0
    } else {
        correct as f64 / nodes.len() as f64
    };
    Ok(Evaluation { accuracy, predictions })
}

/// Mean per-heuristic reward over the stored training sequences, using
/// eval-mode significance scores from the current model.
fn collect_rewards(params: &ModelParams, centers: &[CenterSequences], ws: &Workspace) -> Result<Vec<f64>> {
    let mut acc = RewardAccumulator::new(ws.q.num_kinds());
    for c in centers {
        let Some(psi) = &c.psi else { continue };
        for s in &c.sequences {
            if s.fine.is_empty() {
                continue;
            }
            let pass = params.forward::<ChaCha8Rng>(&s.input, None)?;
            let scores = significance(&pass.record);
            acc.add(&compute_reward(&scores, &s.fine, ws.q.rows(c.center), psi)?);
        }
    }
    Ok(acc.mean())
}

/// Trains on `split.train`, selecting the epoch with the best validation
/// accuracy; without validation nodes the final parameters are kept.
pub fn train(ws: &Workspace, split: &DataSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate(ws.graph.n())?;
    if split.train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let model_cfg = cfg.model_config(ws.graph.feature_dim(), ws.graph.num_classes());
    let mut params = ModelParams::new(model_cfg, &mut rng_stream(cfg.seed, 0))?;
    log::info!("model has {} parameters", params.num_parameters());
    let mut bandit = BanditState::new(ws.q.num_kinds(), cfg.p_min, cfg.period, cfg.samples)?;
    let mut optimizer = AdamW::new(params.num_parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut sample_rng = rng_stream(cfg.seed, 1);
    let mut order_rng = rng_stream(cfg.seed, 2);
    let mut dropout_rng = rng_stream(cfg.seed, 3);

    let mut metrics = MetricsLog::default();
    let mut best: Option<ModelParams> = None;
    let mut train_seqs = Vec::new();
    let mut val_seqs = Vec::new();
    let mut needs_sampling = true;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let run_started = Instant::now();
    let mut diverged = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let resampled = needs_sampling;
        if needs_sampling {
            let probs = sampling_probs(cfg.strategy, &bandit);
            train_seqs = ws.sample_all(&split.train, &probs, cfg.augmentations, cfg, &mut sample_rng)?;
            val_seqs = ws.sample_all(&split.validation, &probs, cfg.augmentations, cfg, &mut sample_rng)?;
            needs_sampling = false;
        }
        let lr = cfg.learning_rate(epoch - 1);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<(&TokenInput, usize)> = batch
                .iter()
                .flat_map(|&b| {
                    let c = &train_seqs[b];
                    c.sequences.iter().map(move |s| (&s.input, ws.labels[c.center]))
                })
                .collect();
            let seeds: Vec<u64> = items.iter().map(|_| rand::Rng::random(&mut dropout_rng)).collect();
            let scale = 1.0 / items.len() as f64;
            let (grad, loss) = batch_gradient(&params, &items, scale, cfg.threads, &seeds)?;
            if !loss.is_finite() || !grad.is_finite() {
                log::error!("non-finite loss {loss} at epoch {epoch}; stopping");
                diverged = Some((epoch, loss));
                break 'epochs;
            }
            let mut flat = params.flatten();
            optimizer.step(&mut flat, &grad.flatten(), lr);
            params.assign_flat(&flat)?;
            loss_sum += loss * items.len() as f64;
            loss_count += items.len();
        }
        let train_loss = loss_sum / loss_count.max(1) as f64;

        let evaluate_now = !val_seqs.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let validation = if evaluate_now {
            let (acc, loss) = validation_scores(&params, ws, &val_seqs)?;
            // small validation sets saturate early; ties go to the lower loss
            let better = acc > metrics.best_val_accuracy
                || (acc == metrics.best_val_accuracy && loss < metrics.best_val_loss);
            if best.is_none() || better {
                metrics.best_val_accuracy = acc;
                metrics.best_val_loss = loss;
                metrics.best_epoch = epoch;
                best = Some(params.clone());
            }
            Some((acc, loss))
        } else {
            None
        };

        if epoch % cfg.period == 0 {
            if cfg.strategy == Strategy::Adaptive {
                let bandit_started = Instant::now();
                let rewards = collect_rewards(&params, &train_seqs, ws)?;
                bandit.update(&rewards)?;
                metrics.bandit.push(BanditTraceRow {
                    epoch,
                    weights: bandit.weights.clone(),
                    probs: bandit.probs.clone(),
                    rewards,
                });
                metrics.bandit_seconds += bandit_started.elapsed().as_secs_f64();
            }
            needs_sampling = true;
        }

        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy: validation.map(|v| v.0),
            val_loss: validation.map(|v| v.1),
            lr,
            seconds: started.elapsed().as_secs_f64(),
            resampled,
        });
        log::debug!("epoch {epoch}: loss {train_loss:.5} val {validation:?}");
    }
    metrics.train_seconds = run_started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        params: best.unwrap_or(params),
        bandit,
        metrics,
        diverged,
    })
}

/// One cell of the homophily sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub accuracy: f64,
    /// Heuristic probabilities at the end of training.
    pub final_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotivateConfig {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub graph: NewmanConfig,
    pub train: TrainConfig,
}

impl Default for MotivateConfig {
    /// A desk-scale sweep: the full grid of homophily levels and strategies,
    /// ten sampled nodes per sequence, and a reduced model.
    fn default() -> Self {
        let mut strategies: Vec<Strategy> = HeuristicKind::ALL.iter().map(|&k| Strategy::Fixed(k)).collect();
        strategies.push(Strategy::Adaptive);
        MotivateConfig {
            alphas: vec![0.05, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2],
            strategies,
            graph: NewmanConfig::default(),
            train: TrainConfig {
                epochs: 80,
                period: 20,
                augmentations: 4,
                samples: 10,
                hidden: 32,
                heads: 4,
                layers: 2,
                lr: 5e-3,
                warmup: 10,
                // attributes are 0/1 indicators with a near-constant count per node
                normalize_features: false,
                ..TrainConfig::default()
            },
        }
    }
}

/// Trains every strategy on Newman graphs across homophily levels and seeds,
/// reporting bagged test accuracy.
pub fn motivate(cfg: &MotivateConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &alpha in &cfg.alphas {
        for &seed in &cfg.seeds {
            let z_in = 16.0 * alpha;
            let graph_cfg = NewmanConfig {
                z_in,
                z_out: 16.0 - z_in,
                seed,
                ..cfg.graph.clone()
            };
            let mut graph = generate_newman(&graph_cfg)?;
            if cfg.train.normalize_features {
                graph = graph.with_row_normalized_features();
            }
            let split = DataSplit::random(graph.n(), cfg.train.train_frac, cfg.train.val_frac, seed)?;
            let base = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let ws = Workspace::new(&graph, &base, None)?;
            for &strategy in &cfg.strategies {
                let tc = TrainConfig { strategy, ..base.clone() };
                let out = train(&ws, &split, &tc)?;
                if let Some((epoch, loss)) = out.diverged {
                    return Err(Error::Diverged { epoch, loss });
                }
                let probs = sampling_probs(strategy, &out.bandit);
                let eval = evaluate(&out.params, &ws, &probs, &split.test, tc.augmentations, &tc, seed)?;
                log::info!("alpha {alpha} seed {seed} {strategy}: test accuracy {:.4}", eval.accuracy);
                rows.push(SweepRow {
                    alpha,
                    strategy,
                    seed,
                    accuracy: eval.accuracy,
                    final_probs: probs,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean accuracy per `(alpha, strategy)` in first-seen order.
pub fn summarize(rows: &[SweepRow]) -> Vec<(f64, Strategy, f64)> {
    let mut out: Vec<(f64, Strategy, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(a, s, _, _)| *a == r.alpha && *s == r.strategy) {
            Some(entry) => {
                entry.2 += r.accuracy;
                entry.3 += 1;
            }
            None => out.push((r.alpha, r.strategy, r.accuracy, 1)),
        }
    }
    out.into_iter().map(|(a, s, t, c)| (a, s, t / c as f64)).collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,strategy,seed,accuracy,p_one_hop,p_two_hop,p_knn,p_ppr\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{:.6}", r.alpha, r.strategy, r.seed, r.accuracy);
        for p in &r.final_probs {
            let _ = write!(out, ",{p:.6}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((cfg.learning_rate(0) - 2e-6).abs() < 1e-18);
        assert!((cfg.learning_rate(50) - 1e-4).abs() < 1e-18);
        assert!((cfg.learning_rate(100) - 2e-4).abs() < 1e-18);
        assert!((cfg.learning_rate(1000) - 1e-9).abs() < 1e-18);
        let mid = cfg.learning_rate(550);
        assert!((mid - (2e-4 + 1e-9) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn parse_round_trip() {
        let cfg = TrainConfig {
            strategy: Strategy::Fixed(HeuristicKind::Knn),
            coarsen_method: CoarsenMethod::NeighborhoodMerge,
            lr: 1.5e-3,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_names_bad_key() {
        let err = TrainConfig::parse("epochs = 10\nlearning_rate = 3\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        let err = TrainConfig::parse("epochs = ten\n").unwrap_err();
        assert!(err.to_string().contains("epochs"));
        let err = TrainConfig::parse("p_min = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("p_min"));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::parse("# header\n\nepochs = 5 # short\nstrategy = two-hop\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.strategy, Strategy::Fixed(HeuristicKind::TwoHop));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut opt = AdamW::new(2, 0.99, 0.999, 1e-8, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut opt = AdamW::new(1, 0.9, 0.999, 1e-8, 0.1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.5);
        assert!((p[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn fixed_strategy_is_one_hot() {
        let b = BanditState::new(4, 0.1, 10, 20).unwrap();
        assert_eq!(sampling_probs(Strategy::Fixed(HeuristicKind::Ppr), &b), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(sampling_probs(Strategy::Adaptive, &b), vec![0.25; 4]);
    }
}
