//! Graph storage: a symmetric 0/1 adjacency in compressed row form, dense node
//! features, optional labels, the self-loop normalized adjacency and data splits.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Undirected, unweighted graph with node attributes.
#[derive(Debug, Clone)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Array2<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

/// Lines dropped while building a graph from a raw edge list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdgeStats {
    pub duplicates: usize,
    pub self_loops: usize,
}

impl Graph {
    /// Builds a graph from an arbitrary edge list. Edges are symmetrized; duplicate
    /// edges and self-loops are dropped and counted.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<(Self, EdgeStats)> {
        if features.nrows() != n {
            return Err(Error::Dimension(format!(
                "feature matrix has {} rows, graph has {n} nodes",
                features.nrows()
            )));
        }
        let mut stats = EdgeStats::default();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                stats.self_loops += 1;
                continue;
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        let mut raw_pairs = 0usize;
        for list in &mut adj {
            raw_pairs += list.len();
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        // every dropped undirected duplicate removed two directed entries
        stats.duplicates = (raw_pairs - neighbors.len()) / 2;

        let num_classes = match &labels {
            Some(l) => {
                if l.len() != n {
                    return Err(Error::Dimension(format!(
                        "{} labels for {n} nodes",
                        l.len()
                    )));
                }
                l.iter().copied().max().map_or(0, |m| m + 1)
            }
            None => 0,
        };
        Ok((
            Graph {
                offsets,
                neighbors,
                features,
                labels,
                num_classes,
            },
            stats,
        ))
    }

    /// Overrides the class count (must cover every label present).
    pub fn with_num_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(l) = &self.labels {
            if l.iter().any(|&y| y >= classes) {
                return Err(Error::InvalidInput(format!(
                    "label out of range for {classes} classes"
                )));
            }
        }
        self.num_classes = classes;
        Ok(self)
    }

    /// Scales every nonzero feature row to unit L1 mass.
    pub fn with_row_normalized_features(mut self) -> Self {
        for mut row in self.features.axis_iter_mut(Axis(0)) {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        self
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges with `u < v`, in row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| v > u)
                .map(move |v| (u, v))
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dense_adjacency(&self) -> Array2<f64> {
        let n = self.n();
        let mut a = Array2::zeros((n, n));
        for (u, v) in self.edges() {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` stored in compressed row form.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    /// `out = xᵀ Ã` for a dense vector `x` (equal to `Ã x` by symmetry).
    /// Contributions are accumulated in ascending source-row order.
    pub fn propagate(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (l, &xl) in x.iter().enumerate() {
            if xl == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(l);
            for (&j, &a) in cols.iter().zip(vals) {
                out[j] += xl * a;
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                a[[i, j]] = v;
            }
        }
        a
    }
}

pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.n();
    let deg: Vec<f64> = (0..n).map(|i| (g.degree(i) + 1) as f64).collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(g.neighbors.len() + n);
    let mut vals = Vec::with_capacity(g.neighbors.len() + n);
    offsets.push(0);
    for i in 0..n {
        let mut diag_done = false;
        for &j in g.neighbors(i) {
            if !diag_done && j > i {
                cols.push(i);
                vals.push(1.0 / deg[i]);
                diag_done = true;
            }
            cols.push(j);
            vals.push(1.0 / (deg[i].sqrt() * deg[j].sqrt()));
        }
        if !diag_done {
            cols.push(i);
            vals.push(1.0 / deg[i]);
        }
        offsets.push(cols.len());
    }
    NormalizedAdjacency {
        offsets,
        cols,
        vals,
    }
}

/// Fraction of undirected edges joining same-label endpoints.
pub fn homophily(g: &Graph) -> Result<f64> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::InvalidInput("homophily needs labels".into()))?;
    let m = g.num_edges();
    if m == 0 {
        return Err(Error::InvalidInput("homophily of an empty edge set".into()));
    }
    let same = g.edges().filter(|&(u, v)| labels[u] == labels[v]).count();
    Ok(same as f64 / m as f64)
}

/// Disjoint train/validation/test node sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    /// Random split by proportions; the test set takes the remainder.
    pub fn random(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&val_frac)
            || train_frac + val_frac > 1.0 + 1e-12
        {
            return Err(Error::InvalidConfig(format!(
                "bad split proportions {train_frac}/{val_frac}"
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (train_frac * n as f64).round() as usize;
        let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
        let mut train = perm[..n_train].to_vec();
        let mut validation = perm[n_train..n_train + n_val].to_vec();
        let mut test = perm[n_train + n_val..].to_vec();
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        Ok(DataSplit {
            train,
            validation,
            test,
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= n {
                return Err(Error::InvalidInput(format!("split index {i} >= {n}")));
            }
            if seen[i] {
                return Err(Error::InvalidInput(format!("node {i} in two splits")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Reads three lines of comma-separated indices: train, validation, test.
    pub fn load(path: &Path, n: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sets = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            let set = if line.is_empty() {
                Vec::new()
            } else {
                line.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::parse(path, lineno + 1, format!("{t:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            sets.push(set);
        }
        if sets.len() != 3 {
            return Err(Error::parse(
                path,
                sets.len(),
                format!("expected 3 lines, found {}", sets.len()),
            ));
        }
        let test = sets.pop().unwrap();
        let validation = sets.pop().unwrap();
        let train = sets.pop().unwrap();
        let split = DataSplit {
            train,
            validation,
            test,
        };
        split.validate(n)?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let join = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let text = format!(
            "{}\n{}\n{}\n",
            join(&self.train),
            join(&self.validation),
            join(&self.test)
        );
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn parse_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = || -> Result<usize> {
            let tok = it
                .next()
                .ok_or_else(|| Error::parse(path, lineno + 1, "expected two node ids"))?;
            tok.parse()
                .map_err(|e| Error::parse(path, lineno + 1, format!("{tok:?}: {e}")))
        };
        let u = next()?;
        let v = next()?;
        if it.next().is_some() {
            return Err(Error::parse(path, lineno + 1, "trailing tokens"));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn parse_features(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|e| Error::parse(path, lineno + 1, format!("{tok:?}: {e}")))?;
            data.push(v);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("row has {w} columns, expected {expected}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width.unwrap_or(0)), data)
        .map_err(|e| Error::Dimension(e.to_string()))
}

fn parse_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, l)| {
            let tok = l.trim().trim_end_matches(',');
            tok.parse()
                .map_err(|e| Error::parse(path, lineno + 1, format!("{tok:?}: {e}")))
        })
        .collect()
}

/// Loads an edge list, a feature CSV and a label file (one class id per line).
/// Node count is the number of feature rows.
pub fn load_graph(
    edge_list_path: &Path,
    features_path: &Path,
    labels_path: &Path,
) -> Result<Graph> {
    let features = parse_features(features_path)?;
    let labels = parse_labels(labels_path)?;
    let edges = parse_edge_list(edge_list_path)?;
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels vs {n} feature rows",
            labels.len()
        )));
    }
    let (g, stats) = Graph::from_edges(n, &edges, features, Some(labels))?;
    if stats.duplicates > 0 || stats.self_loops > 0 {
        log::warn!(
            "{}: dropped {} duplicate edges and {} self-loops",
            edge_list_path.display(),
            stats.duplicates,
            stats.self_loops
        );
    }
    Ok(g)
}

/// Loads the LINQS citation layout: `<content>` rows `paper_id f_1 … f_p label`
/// and `<cites>` rows `cited citing`. Node ids follow row order of the content
/// file and class ids follow sorted label names, which are returned alongside.
pub fn load_linqs(content_path: &Path, cites_path: &Path) -> Result<(Graph, Vec<String>)> {
    let text = fs::read_to_string(content_path).map_err(|e| Error::io(content_path, e))?;
    let mut ids = std::collections::HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::parse(content_path, lineno + 1, "expected id, features and label"));
        }
        let feats = toks[1..toks.len() - 1]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(content_path, lineno + 1, e.to_string()))?;
        if rows.first().is_some_and(|r| r.len() != feats.len()) {
            return Err(Error::parse(content_path, lineno + 1, "inconsistent feature count"));
        }
        if ids.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(Error::parse(content_path, lineno + 1, format!("duplicate id {}", toks[0])));
        }
        rows.push(feats);
        names.push(toks[toks.len() - 1].to_string());
    }
    let mut classes: Vec<String> = names.clone();
    classes.sort();
    classes.dedup();
    let labels = names
        .iter()
        .map(|n| classes.binary_search(n).expect("label collected above"))
        .collect();
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let features = Array2::from_shape_vec((n, p), rows.concat()).map_err(|e| Error::Dimension(e.to_string()))?;

    let text = fs::read_to_string(cites_path).map_err(|e| Error::io(cites_path, e))?;
    let mut edges = Vec::new();
    let mut unknown = 0usize;
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            continue;
        }
        match (ids.get(toks[0]), ids.get(toks[1])) {
            (Some(&u), Some(&v)) => edges.push((u, v)),
            _ => unknown += 1,
        }
    }
    if unknown > 0 {
        log::warn!("{}: skipped {unknown} citations to unknown papers", cites_path.display());
    }
    let (g, stats) = Graph::from_edges(n, &edges, features, Some(labels))?;
    if stats.duplicates > 0 || stats.self_loops > 0 {
        log::info!(
            "{}: merged {} reciprocal or duplicate citations, dropped {} self-citations",
            cites_path.display(),
            stats.duplicates,
            stats.self_loops
        );
    }
    Ok((g, classes))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes the edge list (`u v`, `u < v`), features CSV and labels file.
pub fn save_graph(g: &Graph, edge_list_path: &Path, features_path: &Path, labels_path: &Path) -> Result<()> {
    write_with(edge_list_path, |w| {
        for (u, v) in g.edges() {
            writeln!(w, "{u} {v}")?;
        }
        Ok(())
    })?;
    write_with(features_path, |w| {
        for row in g.features().rows() {
            let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    if let Some(labels) = g.labels() {
        write_with(labels_path, |w| {
            for y in labels {
                writeln!(w, "{y}")?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(n, edges, Array2::zeros((n, 1)), None).unwrap().0
    }

    #[test]
    fn symmetrizes_single_edge() {
        let g = graph(2, &[(0, 1)]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn dedups_reverse_edges() {
        let (g, stats) =
            Graph::from_edges(2, &[(0, 1), (1, 0)], Array2::zeros((2, 1)), None).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(stats.duplicates, 1);
    }

    #[test]
    fn drops_self_loops() {
        let (g, stats) =
            Graph::from_edges(2, &[(0, 0), (0, 1)], Array2::zeros((2, 1)), None).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(stats.self_loops, 1);
        assert!(!g.has_edge(0, 0));
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Graph::from_edges(2, &[(0, 2)], Array2::zeros((2, 1)), None).is_err());
    }

    #[test]
    fn isolated_node_normalizes_to_one() {
        let a = normalize_adjacency(&graph(1, &[]));
        assert_eq!(a.get(0, 0), 1.0);
    }

    #[test]
    fn single_edge_normalizes_to_halves() {
        let a = normalize_adjacency(&graph(2, &[(0, 1)])).to_dense();
        for v in a.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn homophily_extremes() {
        let feats = Array2::zeros((4, 1));
        let g = Graph::from_edges(4, &[(0, 1), (2, 3)], feats.clone(), Some(vec![0, 0, 1, 1]))
            .unwrap()
            .0;
        assert_eq!(homophily(&g).unwrap(), 1.0);
        let g = Graph::from_edges(4, &[(0, 2), (1, 3)], feats, Some(vec![0, 0, 1, 1]))
            .unwrap()
            .0;
        assert_eq!(homophily(&g).unwrap(), 0.0);
    }

    #[test]
    fn homophily_errors() {
        assert!(homophily(&graph(3, &[(0, 1)])).is_err());
        let g = Graph::from_edges(2, &[], Array2::zeros((2, 1)), Some(vec![0, 1]))
            .unwrap()
            .0;
        assert!(homophily(&g).is_err());
    }

    #[test]
    fn split_is_disjoint_and_proportional() {
        let s = DataSplit::random(100, 0.6, 0.2, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (60, 20, 20));
        s.validate(100).unwrap();
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.txt");
        let f = dir.path().join("f.csv");
        let l = dir.path().join("l.txt");
        fs::write(&e, "0 1\n1 x\n").unwrap();
        fs::write(&f, "1,0\n0,1\n").unwrap();
        fs::write(&l, "0\n1\n").unwrap();
        match load_graph(&e, &f, &l) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&e, "0 1\n").unwrap();
        fs::write(&l, "0\n1\n1\n").unwrap();
        assert!(matches!(load_graph(&e, &f, &l), Err(Error::Dimension(_))));
    }

    #[test]
    fn linqs_layout() {
        let dir = tempfile::tempdir().unwrap();
        let content = dir.path().join("x.content");
        let cites = dir.path().join("x.cites");
        std::fs::write(&content, "p9 1 0 B\np3 0 1 A\np5 1 1 B\n").unwrap();
        std::fs::write(&cites, "p9 p3\np3 p9\np5 p9\np5 p77\n").unwrap();
        let (g, classes) = load_linqs(&content, &cites).unwrap();
        assert_eq!(classes, vec!["A", "B"]);
        assert_eq!(g.labels().unwrap(), &[1, 0, 1]);
        assert_eq!(g.num_edges(), 2);
        assert!(g.has_edge(0, 2));
    }
}
