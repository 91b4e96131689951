use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use ansgt_core::bandit::BanditState;
use ansgt_core::coarsening::{coarsen, CoarsenMethod, Partition};
use ansgt_core::graph::{load_graph, load_linqs, save_graph, DataSplit, Graph};
use ansgt_core::heuristics::{HeuristicKind, QTable};
use ansgt_core::model::ModelParams;
use ansgt_core::synthetic::{generate_newman, NewmanConfig};
use ansgt_core::trainer::{
    evaluate, motivate, sampling_probs, summarize, sweep_csv, train, MotivateConfig, TrainConfig, Workspace,
};

const EDGES: &str = "edges.txt";
const FEATURES: &str = "features.csv";
const LABELS: &str = "labels.txt";
const SPLIT: &str = "split.txt";
const PARTITION: &str = "partition.txt";
const THREADS_ENV: &str = "ANSGT_THREADS";

#[derive(Parser)]
#[command(name = "ansgt", version, about = "Graph transformer with adaptive node sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Newman planted-partition graph with clustered binary attributes.
    GenerateNewman {
        #[arg(long, default_value_t = 12.0)]
        z_in: f64,
        #[arg(long, default_value_t = 4.0)]
        z_out: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        nodes: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Coarsen a graph and write its node-to-super-node partition.
    Coarsen {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.01)]
        rate: f64,
        #[arg(long, default_value = "edge-match")]
        method: String,
        /// Partition file; a manifest is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics, bandit trace, checkpoint and manifest.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Flat `key = value` file; unspecified keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Precomputed partition instead of coarsening during the run.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run with bagged inference.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        nodes: String,
        /// Sequences per node; defaults to the run's augmentation count.
        #[arg(long)]
        augmentations: Option<usize>,
    },
    /// Fixed-strategy vs adaptive sampling across homophily levels on Newman graphs.
    Motivate {
        #[arg(long)]
        out: PathBuf,
        /// Training overrides applied on top of the sweep's reduced defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print the four heuristic sampling rows of one node as JSON.
    InspectQ {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        center: usize,
        #[arg(long, default_value_t = 50)]
        truncation: usize,
    },
}

/// Input graph: a directory holding `edges.txt`, `features.csv`, `labels.txt`
/// (and optionally `split.txt`), or a LINQS `.content`/`.cites` pair.
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, requires = "cites", conflicts_with = "data")]
    content: Option<PathBuf>,
    #[arg(long, requires = "content")]
    cites: Option<PathBuf>,
}

struct LoadedData {
    graph: Graph,
    split: Option<DataSplit>,
    inputs: Vec<PathBuf>,
}

impl DataArgs {
    fn load(&self, normalize_features: bool) -> Result<LoadedData> {
        let (graph, split, inputs) = match (&self.data, &self.content, &self.cites) {
            (Some(dir), _, _) => {
                let paths = [dir.join(EDGES), dir.join(FEATURES), dir.join(LABELS)];
                let graph = load_graph(&paths[0], &paths[1], &paths[2])?;
                let split_path = dir.join(SPLIT);
                let mut inputs = paths.to_vec();
                let split = if split_path.exists() {
                    inputs.push(split_path.clone());
                    Some(DataSplit::load(&split_path, graph.n())?)
                } else {
                    None
                };
                (graph, split, inputs)
            }
            (None, Some(content), Some(cites)) => {
                let (graph, classes) = load_linqs(content, cites)?;
                log::info!("classes: {}", classes.join(", "));
                (graph, None, vec![content.clone(), cites.clone()])
            }
            _ => bail!("pass --data <dir> or --content <file> --cites <file>"),
        };
        let graph = if normalize_features {
            graph.with_row_normalized_features()
        } else {
            graph
        };
        log::info!("loaded {} nodes, {} edges, {} features", graph.n(), graph.num_edges(), graph.feature_dim());
        Ok(LoadedData { graph, split, inputs })
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    /// SHA-256 of every input file, keyed by path.
    inputs: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    timings: BTreeMap<String, f64>,
    results: BTreeMap<String, serde_json::Value>,
}

fn hash_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            Ok((p.display().to_string(), hex::encode(Sha256::digest(&bytes))))
        })
        .collect()
}

/// Writes through a temporary sibling and renames into place.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    write_atomic(path, &serde_json::to_string_pretty(manifest)?)
}

fn read_config(path: Option<&Path>, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = path {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply(&text).with_context(|| format!("config {}", path.display()))?;
    }
    if let Ok(threads) = std::env::var(THREADS_ENV) {
        cfg.set("threads", &threads).with_context(|| format!("environment variable {THREADS_ENV}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_split(loaded: &LoadedData, cfg: &TrainConfig) -> Result<DataSplit> {
    match &loaded.split {
        Some(split) => Ok(split.clone()),
        None => Ok(DataSplit::random(loaded.graph.n(), cfg.train_frac, cfg.val_frac, cfg.seed)?),
    }
}

fn cmd_generate(z_in: f64, z_out: f64, seed: u64, nodes: usize, out_dir: &Path) -> Result<()> {
    let cfg = NewmanConfig {
        n: nodes,
        z_in,
        z_out,
        seed,
        ..NewmanConfig::default()
    };
    let graph = generate_newman(&cfg)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    save_graph(&graph, &out_dir.join(EDGES), &out_dir.join(FEATURES), &out_dir.join(LABELS))?;
    DataSplit::random(graph.n(), 0.6, 0.2, seed)?.save(&out_dir.join(SPLIT))?;
    println!(
        "wrote {} nodes, {} edges, homophily {:.4} to {}",
        graph.n(),
        graph.num_edges(),
        ansgt_core::graph::homophily(&graph)?,
        out_dir.display()
    );
    Ok(())
}

fn cmd_coarsen(data: &DataArgs, rate: f64, method: &str, out: &Path) -> Result<()> {
    let method: CoarsenMethod = method.parse()?;
    // the partition depends on structure only
    let loaded = data.load(false)?;
    let started = Instant::now();
    let partition = coarsen(&loaded.graph, rate, method)?;
    let seconds = started.elapsed().as_secs_f64();
    partition.save(out)?;
    println!(
        "coarsened {} nodes into {} super-nodes with {method} in {seconds:.3}s",
        loaded.graph.n(),
        partition.num_clusters()
    );
    let manifest = RunManifest {
        command: "coarsen".into(),
        config: serde_json::json!({ "rate": rate, "method": method.to_string() }),
        seed: 0,
        inputs: hash_inputs(&loaded.inputs)?,
        timings: BTreeMap::from([("coarsening".to_string(), seconds)]),
        results: BTreeMap::from([("super_nodes".to_string(), partition.num_clusters().into())]),
    };
    write_manifest(&out.with_extension("manifest.json"), &manifest)
}

fn cmd_train(data: &DataArgs, config: Option<&Path>, partition: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = read_config(config, TrainConfig::default())?;
    let loaded = data.load(cfg.normalize_features)?;
    let split = resolve_split(&loaded, &cfg)?;
    let mut inputs = loaded.inputs.clone();
    inputs.extend(config.map(Path::to_path_buf));
    let partition = match partition {
        Some(p) => {
            inputs.push(p.to_path_buf());
            Some(Partition::load(p, loaded.graph.n())?)
        }
        None => None,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ws = Workspace::new(&loaded.graph, &cfg, partition)?;
    let outcome = train(&ws, &split, &cfg)?;

    write_atomic(&out.join("config.txt"), &cfg.to_text())?;
    write_atomic(&out.join("metrics.csv"), &outcome.metrics.epochs_csv())?;
    write_atomic(&out.join("timing.csv"), &outcome.metrics.timing_csv())?;
    write_atomic(&out.join("bandit_trace.csv"), &outcome.metrics.bandit_csv())?;
    write_atomic(&out.join("bandit.json"), &serde_json::to_string_pretty(&outcome.bandit)?)?;
    split.save(&out.join(SPLIT))?;
    ws.partition.save(&out.join(PARTITION))?;
    outcome.params.save(&out.join("checkpoint.json"))?;

    let probs = sampling_probs(cfg.strategy, &outcome.bandit);
    let eval_started = Instant::now();
    let test = evaluate(&outcome.params, &ws, &probs, &split.test, cfg.augmentations, &cfg, cfg.seed)?;
    let eval_seconds = eval_started.elapsed().as_secs_f64();

    let mut results = BTreeMap::new();
    results.insert("test_accuracy".to_string(), test.accuracy.into());
    results.insert("best_val_accuracy".to_string(), outcome.metrics.best_val_accuracy.into());
    results.insert("best_val_loss".to_string(), outcome.metrics.best_val_loss.into());
    results.insert("best_epoch".to_string(), outcome.metrics.best_epoch.into());
    results.insert("final_probs".to_string(), serde_json::to_value(&probs)?);
    results.insert("parameters".to_string(), outcome.params.num_parameters().into());
    if let Some((epoch, loss)) = outcome.diverged {
        results.insert("diverged_at_epoch".to_string(), epoch.into());
        results.insert("diverged_loss".to_string(), loss.to_string().into());
    }
    let manifest = RunManifest {
        command: "train".into(),
        config: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        inputs: hash_inputs(&inputs)?,
        timings: BTreeMap::from([
            ("heuristics".to_string(), ws.heuristic_seconds),
            ("coarsening".to_string(), ws.coarsen_seconds),
            ("training".to_string(), outcome.metrics.train_seconds),
            ("bandit_updates".to_string(), outcome.metrics.bandit_seconds),
            ("evaluation".to_string(), eval_seconds),
        ]),
        results,
    };
    write_manifest(&out.join("manifest.json"), &manifest)?;
    if let Some((epoch, loss)) = outcome.diverged {
        bail!(ansgt_core::Error::Diverged { epoch, loss });
    }
    println!(
        "test accuracy {:.4} (best validation {:.4} at epoch {}), outputs in {}",
        test.accuracy,
        outcome.metrics.best_val_accuracy,
        outcome.metrics.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(data: &DataArgs, run: &Path, nodes: &str, augmentations: Option<usize>) -> Result<()> {
    let cfg = read_config(Some(&run.join("config.txt")), TrainConfig::default())?;
    let params = ModelParams::load(&run.join("checkpoint.json"))?;
    let bandit_path = run.join("bandit.json");
    let bandit: BanditState = serde_json::from_str(
        &fs::read_to_string(&bandit_path).with_context(|| format!("reading {}", bandit_path.display()))?,
    )
    .with_context(|| format!("parsing {}", bandit_path.display()))?;
    let loaded = data.load(cfg.normalize_features)?;
    let split = DataSplit::load(&run.join(SPLIT), loaded.graph.n())?;
    let set = match nodes {
        "train" => &split.train,
        "validation" | "val" => &split.validation,
        "test" => &split.test,
        other => bail!("--nodes: unknown node set {other:?} (train, validation, test)"),
    };
    let partition = Partition::load(&run.join(PARTITION), loaded.graph.n())?;
    let ws = Workspace::new(&loaded.graph, &cfg, Some(partition))?;
    let probs = sampling_probs(cfg.strategy, &bandit);
    let result = evaluate(&params, &ws, &probs, set, augmentations.unwrap_or(cfg.augmentations), &cfg, cfg.seed)?;
    println!(
        "{}",
        serde_json::json!({ "nodes": nodes, "count": set.len(), "accuracy": result.accuracy })
    );
    Ok(())
}

fn cmd_motivate(out: &Path, config: Option<&Path>, alphas: Option<Vec<f64>>, seeds: Option<Vec<u64>>) -> Result<()> {
    let mut sweep = MotivateConfig::default();
    sweep.train = read_config(config, sweep.train)?;
    if let Some(a) = alphas {
        sweep.alphas = a;
    }
    if let Some(s) = seeds {
        sweep.seeds = s;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let started = Instant::now();
    let rows = motivate(&sweep)?;
    let seconds = started.elapsed().as_secs_f64();
    write_atomic(&out.join("figure2.csv"), &sweep_csv(&rows))?;
    for (alpha, strategy, acc) in summarize(&rows) {
        println!("alpha {alpha:<5} {:<9} {:.4}", strategy.to_string(), acc);
    }
    let manifest = RunManifest {
        command: "motivate".into(),
        config: serde_json::json!({
            "alphas": sweep.alphas,
            "seeds": sweep.seeds,
            "train": sweep.train,
        }),
        seed: sweep.train.seed,
        inputs: hash_inputs(&config.map(Path::to_path_buf).into_iter().collect::<Vec<_>>())?,
        timings: BTreeMap::from([("total".to_string(), seconds)]),
        results: BTreeMap::from([("rows".to_string(), rows.len().into())]),
    };
    write_manifest(&out.join("manifest.json"), &manifest)
}

fn cmd_inspect(data: &DataArgs, center: usize, truncation: usize) -> Result<()> {
    // cosine similarity ignores row scaling, so normalization cannot change these rows
    let loaded = data.load(false)?;
    if center >= loaded.graph.n() {
        bail!("--center: node {center} out of range for {} nodes", loaded.graph.n());
    }
    let adj = ansgt_core::graph::normalize_adjacency(&loaded.graph);
    let cfg = TrainConfig::default();
    let q = QTable::build(&loaded.graph, &adj, &cfg.ppr(), truncation);
    let rows: BTreeMap<String, serde_json::Value> = HeuristicKind::ALL
        .iter()
        .zip(q.rows(center))
        .map(|(k, row)| {
            let entries: Vec<_> = row
                .support
                .iter()
                .zip(&row.probs)
                .map(|(n, p)| serde_json::json!([n, p]))
                .collect();
            (k.name().to_string(), serde_json::Value::Array(entries))
        })
        .collect();
    println!("{}", serde_json::json!({ "center": center, "rows": rows }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateNewman {
            z_in,
            z_out,
            seed,
            nodes,
            out_dir,
        } => cmd_generate(z_in, z_out, seed, nodes, &out_dir),
        Command::Coarsen { data, rate, method, out } => cmd_coarsen(&data, rate, &method, &out),
        Command::Train {
            data,
            config,
            partition,
            out,
        } => cmd_train(&data, config.as_deref(), partition.as_deref(), &out),
        Command::Eval {
            data,
            run,
            nodes,
            augmentations,
        } => cmd_eval(&data, &run, &nodes, augmentations),
        Command::Motivate {
            out,
            config,
            alphas,
            seeds,
        } => cmd_motivate(&out, config.as_deref(), alphas, seeds),
        Command::InspectQ {
            data,
            center,
            truncation,
        } => cmd_inspect(&data, center, truncation),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
