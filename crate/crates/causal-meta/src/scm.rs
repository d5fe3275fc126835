//! Ground-truth structural causal models, interventional task generation, and
//! the on-disk dataset format.
//!
//! Synthetic mechanisms are finite-rank Gaussian-process surrogates: each
//! non-root variable gets a random-Fourier-feature expansion over its parents,
//! so sampling is O(n) and deterministic under a seed while the function
//! distribution matches an RBF-kernel GP.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal, seeded};

pub const RFF_FEATURES: usize = 64;
const RFF_LENGTH_SCALE: f64 = 1.0;
/// Hard interventions draw the clamped value from Normal(HARD_MEAN, 1);
/// soft interventions shift the mechanism output by SOFT_SHIFT.
pub const HARD_MEAN: f64 = 2.0;
pub const SOFT_SHIFT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    Hard,
    Soft,
}

/// Random-Fourier-feature mechanism for one variable. Root variables carry
/// the zero function.
#[derive(Debug, Clone)]
pub struct Mechanism {
    pub parents: Vec<usize>,
    /// (RFF_FEATURES, n_parents) frequency matrix; empty for roots.
    omega: Array2<f64>,
    phase: Vec<f64>,
    weights: Vec<f64>,
}

impl Mechanism {
    fn zero() -> Self {
        Mechanism {
            parents: Vec::new(),
            omega: Array2::zeros((0, 0)),
            phase: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn random(parents: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let p = parents.len();
        let omega =
            Array2::from_shape_fn((RFF_FEATURES, p), |_| normal(rng) / RFF_LENGTH_SCALE);
        let phase = (0..RFF_FEATURES)
            .map(|_| rng.gen::<f64>() * std::f64::consts::TAU)
            .collect();
        let weights = (0..RFF_FEATURES).map(|_| normal(rng)).collect();
        Mechanism {
            parents,
            omega,
            phase,
            weights,
        }
    }

    /// Evaluate on a full d-dimensional row; only parent coordinates are read.
    pub fn eval(&self, row: &[f64]) -> f64 {
        if self.parents.is_empty() {
            return 0.0;
        }
        let scale = (2.0 / RFF_FEATURES as f64).sqrt();
        let mut acc = 0.0;
        for f in 0..RFF_FEATURES {
            let mut arg = self.phase[f];
            for (k, &j) in self.parents.iter().enumerate() {
                arg += self.omega[[f, k]] * row[j];
            }
            acc += self.weights[f] * arg.cos();
        }
        scale * acc
    }
}

/// A fully specified generating process: DAG, per-variable mechanisms, and
/// noise scales. Immutable once constructed.
#[derive(Debug, Clone)]
pub struct GroundTruthScm {
    pub d: usize,
    pub adjacency: Array2<u8>,
    pub mechanisms: Vec<Mechanism>,
    pub noise_scale: Vec<f64>,
    topo_order: Vec<usize>,
}

impl GroundTruthScm {
    pub fn set_noise_scale(&mut self, sigma: f64) {
        for s in &mut self.noise_scale {
            *s = sigma;
        }
    }
}

/// Kahn topological sort; `Err` on a cycle. Also serves as the independent
/// acyclicity oracle for sampled graphs.
pub fn topological_order(adjacency: &Array2<u8>) -> Result<Vec<usize>> {
    let d = adjacency.dim().0;
    if adjacency.dim().1 != d {
        return Err(Error::Dimension {
            what: "adjacency matrix",
            expected: d,
            found: adjacency.dim().1,
        });
    }
    let mut indegree = vec![0usize; d];
    for j in 0..d {
        for i in 0..d {
            if adjacency[[i, j]] != 0 {
                indegree[j] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..d).filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(n) = queue.pop() {
        order.push(n);
        for j in 0..d {
            if adjacency[[n, j]] != 0 {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push(j);
                }
            }
        }
    }
    if order.len() == d {
        Ok(order)
    } else {
        Err(Error::CyclicGraph)
    }
}

/// Erdos-Renyi DAG over a uniformly random topological order. Each admissible
/// edge is kept with probability 2 * rate / (d - 1), so the expected
/// out-degree matches `expected_edges_per_node`.
pub fn sample_dag(
    d: usize,
    expected_edges_per_node: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<u8>> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 variables, got {d}"
        )));
    }
    if expected_edges_per_node < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "edge rate must be non-negative, got {expected_edges_per_node}"
        )));
    }
    let p = (2.0 * expected_edges_per_node / (d - 1) as f64).min(1.0);
    // Fisher-Yates permutation for the node order.
    let mut order: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut adj = Array2::zeros((d, d));
    for r in 0..d {
        for s in (r + 1)..d {
            if rng.gen::<f64>() < p {
                adj[[order[r], order[s]]] = 1;
            }
        }
    }
    Ok(adj)
}

/// Attach random GP-surrogate mechanisms and a uniform noise scale of 0.1 to
/// an acyclic adjacency matrix.
pub fn sample_mechanisms(adjacency: &Array2<u8>, rng: &mut ChaCha8Rng) -> Result<GroundTruthScm> {
    let topo_order = topological_order(adjacency)?;
    let d = adjacency.dim().0;
    let mut mechanisms = Vec::with_capacity(d);
    for i in 0..d {
        let parents: Vec<usize> = (0..d).filter(|&j| adjacency[[j, i]] != 0).collect();
        if parents.is_empty() {
            mechanisms.push(Mechanism::zero());
        } else {
            mechanisms.push(Mechanism::random(parents, rng));
        }
    }
    Ok(GroundTruthScm {
        d,
        adjacency: adjacency.clone(),
        mechanisms,
        noise_scale: vec![0.1; d],
        topo_order,
    })
}

/// One experiment's data. Support and query are disjoint draws from the same
/// interventional distribution; the ground-truth target annotation is kept
/// private so inference code cannot reach it (evaluation goes through
/// [`TaskDataset::truth_targets`]).
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    pub support: Array2<f64>,
    pub query: Array2<f64>,
    pub is_meta_test: bool,
    true_targets: Option<Vec<u8>>,
}

impl TaskDataset {
    pub fn new(
        task_id: usize,
        support: Array2<f64>,
        query: Array2<f64>,
        is_meta_test: bool,
        true_targets: Option<Vec<u8>>,
    ) -> Result<Self> {
        if support.dim().0 < 1 {
            return Err(Error::InvalidArgument(
                "support set must contain at least one row".into(),
            ));
        }
        if query.dim().0 > 0 && query.dim().1 != support.dim().1 {
            return Err(Error::Dimension {
                what: "query column count",
                expected: support.dim().1,
                found: query.dim().1,
            });
        }
        if let Some(t) = &true_targets {
            if t.len() != support.dim().1 {
                return Err(Error::Dimension {
                    what: "true_targets length",
                    expected: support.dim().1,
                    found: t.len(),
                });
            }
        }
        Ok(TaskDataset {
            task_id,
            support,
            query,
            is_meta_test,
            true_targets,
        })
    }

    pub fn d(&self) -> usize {
        self.support.dim().1
    }

    /// Evaluation-only accessor for the ground-truth intervention targets.
    pub fn truth_targets(&self) -> Option<&[u8]> {
        self.true_targets.as_deref()
    }

    /// Replace the truth annotation (evaluation plumbing; never read by
    /// inference).
    pub fn with_truth(mut self, targets: Option<Vec<u8>>) -> Self {
        self.true_targets = targets;
        self
    }
}

/// Ancestral sampling of one task under the given intervention targets.
///
/// Hard interventions replace the structural equation with a draw from
/// Normal(2, 1); soft interventions shift the mechanism output by +2 while
/// keeping the parent dependence.
pub fn generate_task(
    scm: &GroundTruthScm,
    targets: &[u8],
    kind: InterventionKind,
    n_support: usize,
    n_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskDataset> {
    if targets.len() != scm.d {
        return Err(Error::Dimension {
            what: "targets length",
            expected: scm.d,
            found: targets.len(),
        });
    }
    if n_support < 1 {
        return Err(Error::InvalidArgument(
            "n_support must be at least 1".into(),
        ));
    }
    let n = n_support + n_query;
    let mut data = Array2::zeros((n, scm.d));
    let mut row = vec![0.0; scm.d];
    for r in 0..n {
        for v in &mut row {
            *v = 0.0;
        }
        for &i in &scm.topo_order {
            let value = if targets[i] != 0 {
                match kind {
                    InterventionKind::Hard => HARD_MEAN + normal(rng),
                    InterventionKind::Soft => {
                        scm.mechanisms[i].eval(&row)
                            + SOFT_SHIFT
                            + scm.noise_scale[i] * normal(rng)
                    }
                }
            } else {
                scm.mechanisms[i].eval(&row) + scm.noise_scale[i] * normal(rng)
            };
            row[i] = value;
            data[[r, i]] = value;
        }
    }
    let support = data.slice(ndarray::s![..n_support, ..]).to_owned();
    let query = data.slice(ndarray::s![n_support.., ..]).to_owned();
    TaskDataset::new(0, support, query, false, Some(targets.to_vec()))
}

// ── collection generation ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub d: usize,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub n_support: usize,
    pub n_query: usize,
    /// Meta-test tasks carry only this many support rows and no query split.
    pub n_test_support: usize,
    pub expected_edges_per_node: f64,
    pub intervention_kind: InterventionKind,
    /// Intervened variables per (non-observational) task, 0..=3.
    pub targets_per_task: usize,
    /// Fraction of tasks left purely observational (targets all zero).
    pub observational_fraction: f64,
    pub noise_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            d: 10,
            n_train_tasks: 20,
            n_test_tasks: 20,
            n_support: 10,
            n_query: 100,
            n_test_support: 10,
            expected_edges_per_node: 1.0,
            intervention_kind: InterventionKind::Hard,
            targets_per_task: 1,
            observational_fraction: 0.0,
            noise_scale: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config("d must be at least 2".into()));
        }
        if self.targets_per_task > 3 {
            return Err(Error::Config(
                "targets_per_task must be between 0 and 3".into(),
            ));
        }
        if self.targets_per_task > self.d {
            return Err(Error::Config("targets_per_task cannot exceed d".into()));
        }
        if !(0.0..=1.0).contains(&self.observational_fraction) {
            return Err(Error::Config(
                "observational_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.n_train_tasks == 0 {
            return Err(Error::Config("need at least one training task".into()));
        }
        if self.n_support == 0 || self.n_test_support == 0 {
            return Err(Error::Config("support sizes must be positive".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// A generated (or ingested) dataset: tasks plus whatever ground truth is
/// available for evaluation.
#[derive(Debug, Clone)]
pub struct TaskCollection {
    pub d: usize,
    pub seed: u64,
    pub kind: InterventionKind,
    pub true_adjacency: Option<Array2<u8>>,
    pub tasks: Vec<TaskDataset>,
}

impl TaskCollection {
    pub fn train_tasks(&self) -> impl Iterator<Item = &TaskDataset> {
        self.tasks.iter().filter(|t| !t.is_meta_test)
    }

    pub fn test_tasks(&self) -> impl Iterator<Item = &TaskDataset> {
        self.tasks.iter().filter(|t| t.is_meta_test)
    }
}

/// Generate a full meta-training + meta-test collection from one SCM.
pub fn generate_collection(cfg: &GenConfig, seed: u64) -> Result<TaskCollection> {
    cfg.validate()?;
    let mut graph_rng = seeded(derive_seed(seed, 0xdaa9, 0));
    let adjacency = sample_dag(cfg.d, cfg.expected_edges_per_node, &mut graph_rng)?;
    let mut scm = sample_mechanisms(&adjacency, &mut graph_rng)?;
    scm.set_noise_scale(cfg.noise_scale);

    let total = cfg.n_train_tasks + cfg.n_test_tasks;
    let mut tasks = Vec::with_capacity(total);
    for t in 0..total {
        let mut rng = seeded(derive_seed(seed, 0x7a5c, t as u64));
        let mut targets = vec![0u8; cfg.d];
        if rng.gen::<f64>() >= cfg.observational_fraction {
            let mut chosen: Vec<usize> = Vec::new();
            while chosen.len() < cfg.targets_per_task {
                let i = rng.gen_range(0..cfg.d);
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
            for i in chosen {
                targets[i] = 1;
            }
        }
        let is_test = t >= cfg.n_train_tasks;
        let (ns, nq) = if is_test {
            (cfg.n_test_support, 0)
        } else {
            (cfg.n_support, cfg.n_query)
        };
        let mut task = generate_task(&scm, &targets, cfg.intervention_kind, ns, nq, &mut rng)?;
        task.task_id = t;
        task.is_meta_test = is_test;
        tasks.push(task);
    }
    Ok(TaskCollection {
        d: cfg.d,
        seed,
        kind: cfg.intervention_kind,
        true_adjacency: Some(adjacency),
        tasks,
    })
}

// ── on-disk format ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaHeader {
    format_version: u32,
    d: usize,
    n_tasks: usize,
    seed: u64,
    kind: InterventionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_adjacency: Option<Vec<Vec<u8>>>,
}

fn fmt_float(x: f64) -> String {
    // 17 significant digits: enough to round-trip every finite f64.
    format!("{:.16e}", x)
}

/// Write a collection as `meta.json` + per-task CSV files.
pub fn save_tasks(collection: &TaskCollection, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let header = MetaHeader {
        format_version: 1,
        d: collection.d,
        n_tasks: collection.tasks.len(),
        seed: collection.seed,
        kind: collection.kind,
        true_adjacency: collection
            .true_adjacency
            .as_ref()
            .map(|a| (0..collection.d).map(|i| a.row(i).to_vec()).collect()),
    };
    let meta_path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Config(format!("meta serialization: {e}")))?;
    std::fs::write(&meta_path, body).map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    for task in &collection.tasks {
        let path = dir.join(format!("task_{}.csv", task.task_id));
        let mut out = String::new();
        for j in 0..collection.d {
            write!(out, "x_{},", j + 1).unwrap();
        }
        out.push_str("split\n");
        for (matrix, label) in [(&task.support, "support"), (&task.query, "query")] {
            for r in 0..matrix.dim().0 {
                for c in 0..collection.d {
                    out.push_str(&fmt_float(matrix[[r, c]]));
                    out.push(',');
                }
                out.push_str(label);
                out.push('\n');
            }
        }
        std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;

        if let Some(targets) = task.truth_targets() {
            let tpath = dir.join(format!("targets_{}.csv", task.task_id));
            let line: Vec<String> = targets.iter().map(|t| t.to_string()).collect();
            std::fs::write(&tpath, line.join(",") + "\n")
                .map_err(|e| Error::io(tpath.display().to_string(), e))?;
        }
    }
    Ok(())
}

fn parse_task_csv(path: &Path, d: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let name = path.display().to_string();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut lines = body.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::DataFormat {
        path: name.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != d + 1 || cols[d] != "split" {
        return Err(Error::DataFormat {
            path: name.clone(),
            line: 1,
            msg: format!(
                "expected header with {d} variable columns plus 'split', got {} columns",
                cols.len()
            ),
        });
    }
    let mut support: Vec<f64> = Vec::new();
    let mut query: Vec<f64> = Vec::new();
    let (mut ns, mut nq) = (0usize, 0usize);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::DataFormat {
                path: name.clone(),
                line: lineno,
                msg: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        let dest = match fields[d] {
            "support" => {
                ns += 1;
                &mut support
            }
            "query" => {
                nq += 1;
                &mut query
            }
            other => {
                return Err(Error::DataFormat {
                    path: name.clone(),
                    line: lineno,
                    msg: format!("split column must be 'support' or 'query', got '{other}'"),
                })
            }
        };
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| Error::DataFormat {
                path: name.clone(),
                line: lineno,
                msg: format!("non-numeric cell '{f}'"),
            })?;
            dest.push(v);
        }
    }
    let support = Array2::from_shape_vec((ns, d), support).expect("consistent row length");
    let query = Array2::from_shape_vec((nq, d), query).expect("consistent row length");
    Ok((support, query))
}

fn parse_targets_csv(path: &Path, d: usize) -> Result<Vec<u8>> {
    let name = path.display().to_string();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(name.clone(), e))?;
    let line = body.lines().next().unwrap_or("");
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != d {
        return Err(Error::DataFormat {
            path: name.clone(),
            line: 1,
            msg: format!("expected {d} target flags, got {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| match *f {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(Error::DataFormat {
                path: name.clone(),
                line: 1,
                msg: format!("target flags must be 0 or 1, got '{other}'"),
            }),
        })
        .collect()
}

/// Load a collection saved by [`save_tasks`] (or an ingested export in the
/// same layout; missing `targets_*.csv` files simply leave the evaluation
/// annotations absent).
pub fn load_tasks(dir: &Path) -> Result<TaskCollection> {
    let meta_path = dir.join("meta.json");
    let name = meta_path.display().to_string();
    let body = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(name.clone(), e))?;
    let header: MetaHeader = serde_json::from_str(&body).map_err(|e| Error::DataFormat {
        path: name.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let d = header.d;
    let true_adjacency = match header.true_adjacency {
        Some(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::DataFormat {
                    path: name.clone(),
                    line: 1,
                    msg: "true_adjacency must be a d x d matrix".into(),
                });
            }
            let mut adj = Array2::zeros((d, d));
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    adj[[i, j]] = v;
                }
            }
            topological_order(&adj)?;
            Some(adj)
        }
        None => None,
    };

    let mut tasks = Vec::with_capacity(header.n_tasks);
    for t in 0..header.n_tasks {
        let path = dir.join(format!("task_{t}.csv"));
        let (support, query) = parse_task_csv(&path, d)?;
        let tpath = dir.join(format!("targets_{t}.csv"));
        let targets = if tpath.exists() {
            Some(parse_targets_csv(&tpath, d)?)
        } else {
            None
        };
        let is_meta_test = query.dim().0 == 0;
        let mut task = TaskDataset::new(t, support, query, is_meta_test, targets)?;
        task.task_id = t;
        tasks.push(task);
    }
    Ok(TaskCollection {
        d,
        seed: header.seed,
        kind: header.kind,
        true_adjacency,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_gives_empty_graph() {
        let mut rng = seeded(0);
        let adj = sample_dag(2, 0.0, &mut rng).unwrap();
        assert_eq!(adj.sum(), 0);
    }

    #[test]
    fn edge_count_matches_binomial_expectation() {
        // d=5, rate=1: each of the 10 admissible pairs kept with p=0.5, so
        // the mean edge count over 10^4 draws follows Binomial(10, 0.5).
        let mut rng = seeded(1);
        let n = 10_000;
        let mut total = 0u64;
        for _ in 0..n {
            total += sample_dag(5, 1.0, &mut rng)
                .unwrap()
                .iter()
                .map(|&v| v as u64)
                .sum::<u64>();
        }
        let mean = total as f64 / n as f64;
        let sigma = (10.0 * 0.25 / n as f64).sqrt();
        assert!(
            (mean - 5.0).abs() < 3.0 * sigma,
            "mean {mean}, tolerance {}",
            3.0 * sigma
        );
    }

    #[test]
    fn sampled_dags_are_acyclic() {
        let mut rng = seeded(2);
        for _ in 0..200 {
            let adj = sample_dag(8, 2.5, &mut rng).unwrap();
            topological_order(&adj).expect("sampled graph must be acyclic");
        }
    }

    #[test]
    fn cyclic_adjacency_rejected() {
        let mut adj = Array2::zeros((2, 2));
        adj[[0, 1]] = 1;
        adj[[1, 0]] = 1;
        let mut rng = seeded(0);
        assert!(matches!(
            sample_mechanisms(&adj, &mut rng),
            Err(Error::CyclicGraph)
        ));
    }

    #[test]
    fn root_mechanism_is_zero() {
        let mut rng = seeded(3);
        let adj = Array2::zeros((3, 3));
        let scm = sample_mechanisms(&adj, &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(scm.mechanisms[i].eval(&[1.0, -2.0, 0.5]), 0.0);
        }
    }

    #[test]
    fn mechanisms_deterministic_under_seed() {
        let mut adj = Array2::zeros((2, 2));
        adj[[0, 1]] = 1;
        let f = |seed| {
            let mut rng = seeded(seed);
            let scm = sample_mechanisms(&adj, &mut rng).unwrap();
            scm.mechanisms[1].eval(&[0.7, 0.0])
        };
        assert_eq!(f(9), f(9));
        assert_ne!(f(9), f(10));
    }

    #[test]
    fn rff_covariance_approximates_rbf_kernel() {
        // Across mechanism redraws, E[f(x) f(x')] equals the RBF kernel
        // exp(-(x - x')^2 / 2). Monte-Carlo estimate over 4000 draws.
        let mut adj = Array2::zeros((2, 2));
        adj[[0, 1]] = 1;
        let mut rng = seeded(4);
        let gaps = [0.0, 0.5, 1.0, 1.5];
        let draws = 4000;
        let mut sums = [0.0f64; 4];
        for _ in 0..draws {
            let scm = sample_mechanisms(&adj, &mut rng).unwrap();
            for (k, gap) in gaps.iter().enumerate() {
                let fa = scm.mechanisms[1].eval(&[0.0, 0.0]);
                let fb = scm.mechanisms[1].eval(&[*gap, 0.0]);
                sums[k] += fa * fb;
            }
        }
        for (k, gap) in gaps.iter().enumerate() {
            let want = (-gap * gap / 2.0).exp();
            let got = sums[k] / draws as f64;
            let rel = (got - want).abs() / want;
            assert!(rel < 0.15, "gap {gap}: got {got}, want {want}, rel {rel}");
        }
    }

    #[test]
    fn hard_intervention_centers_on_two() {
        let mut rng = seeded(5);
        let adj = sample_dag(4, 1.0, &mut rng).unwrap();
        let scm = sample_mechanisms(&adj, &mut rng).unwrap();
        // Pick a root of the sampled graph so its observational mean is 0.
        let root = (0..4)
            .find(|&i| (0..4).all(|j| adj[[j, i]] == 0))
            .expect("a DAG has at least one root");
        let mut targets = vec![0u8; 4];
        targets[root] = 1;
        let task =
            generate_task(&scm, &targets, InterventionKind::Hard, 5000, 0, &mut rng).unwrap();
        let mean = task.support.column(root).sum() / 5000.0;
        let tol = 3.0 / (5000.0f64).sqrt();
        assert!((mean - 2.0).abs() < tol, "mean {mean}");
    }

    #[test]
    fn all_zero_targets_is_observational() {
        let mut rng = seeded(6);
        let adj = Array2::zeros((3, 3));
        let scm = sample_mechanisms(&adj, &mut rng).unwrap();
        let task =
            generate_task(&scm, &[0, 0, 0], InterventionKind::Hard, 4000, 0, &mut rng).unwrap();
        // All roots with sigma=0.1 noise: every column is centered near 0.
        for j in 0..3 {
            let mean = task.support.column(j).sum() / 4000.0;
            assert!(
                mean.abs() < 3.0 * 0.1 / (4000.0f64).sqrt() + 1e-9,
                "col {j} mean {mean}"
            );
        }
    }

    fn ks_statistic(a: &mut Vec<f64>, b: &mut Vec<f64>) -> f64 {
        a.sort_unstable_by(f64::total_cmp);
        b.sort_unstable_by(f64::total_cmp);
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j) = (0usize, 0usize);
        let mut d = 0.0f64;
        while i < n && j < m {
            let x = if a[i] <= b[j] { a[i] } else { b[j] };
            while i < n && a[i] <= x {
                i += 1;
            }
            while j < m && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        d
    }

    #[test]
    fn sink_intervention_leaves_other_marginals() {
        // X1 -> X2 with X2 a sink: intervening on X2 cannot move X1.
        let mut adj = Array2::zeros((2, 2));
        adj[[0, 1]] = 1;
        let mut rng = seeded(7);
        let scm = sample_mechanisms(&adj, &mut rng).unwrap();
        let obs = generate_task(&scm, &[0, 0], InterventionKind::Hard, 5000, 0, &mut rng).unwrap();
        let intv = generate_task(&scm, &[0, 1], InterventionKind::Hard, 5000, 0, &mut rng).unwrap();
        let mut a: Vec<f64> = obs.support.column(0).to_vec();
        let mut b: Vec<f64> = intv.support.column(0).to_vec();
        let d = ks_statistic(&mut a, &mut b);
        // Two-sample KS critical value at alpha = 0.01.
        let crit = 1.628 * (2.0f64 / 5000.0).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds {crit}");
    }

    #[test]
    fn zero_noise_limit_is_deterministic() {
        let mut rng = seeded(8);
        let adj = sample_dag(5, 1.5, &mut rng).unwrap();
        let mut scm = sample_mechanisms(&adj, &mut rng).unwrap();
        scm.set_noise_scale(0.0);
        let task = generate_task(&scm, &[0; 5], InterventionKind::Hard, 20, 0, &mut rng).unwrap();
        for r in 0..20 {
            let row: Vec<f64> = task.support.row(r).to_vec();
            for i in 0..5 {
                assert_eq!(row[i], scm.mechanisms[i].eval(&row), "row {r} var {i}");
            }
        }
    }

    #[test]
    fn support_must_be_nonempty() {
        let mut rng = seeded(9);
        let adj = Array2::zeros((2, 2));
        let scm = sample_mechanisms(&adj, &mut rng).unwrap();
        assert!(generate_task(&scm, &[0, 0], InterventionKind::Hard, 0, 5, &mut rng).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_lossless() {
        let cfg = GenConfig {
            d: 4,
            n_train_tasks: 3,
            n_test_tasks: 2,
            n_support: 5,
            n_query: 7,
            ..GenConfig::default()
        };
        let coll = generate_collection(&cfg, 123).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_tasks(&coll, dir.path()).unwrap();
        let loaded = load_tasks(dir.path()).unwrap();
        assert_eq!(loaded.d, coll.d);
        assert_eq!(loaded.seed, coll.seed);
        assert_eq!(loaded.true_adjacency, coll.true_adjacency);
        assert_eq!(loaded.tasks.len(), coll.tasks.len());
        for (a, b) in coll.tasks.iter().zip(loaded.tasks.iter()) {
            assert_eq!(a.task_id, b.task_id);
            assert_eq!(a.is_meta_test, b.is_meta_test);
            assert_eq!(a.support, b.support, "support differs for task {}", a.task_id);
            assert_eq!(a.query, b.query);
            assert_eq!(a.truth_targets(), b.truth_targets());
        }
    }

    #[test]
    fn missing_targets_load_as_absent() {
        let cfg = GenConfig {
            d: 3,
            n_train_tasks: 1,
            n_test_tasks: 0,
            n_support: 4,
            n_query: 2,
            ..GenConfig::default()
        };
        let coll = generate_collection(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_tasks(&coll, dir.path()).unwrap();
        // Simulate an ingested export: strip the annotation files.
        std::fs::remove_file(dir.path().join("targets_0.csv")).unwrap();
        let meta = dir.path().join("meta.json");
        let body = std::fs::read_to_string(&meta).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&body).unwrap();
        v.as_object_mut().unwrap().remove("true_adjacency");
        std::fs::write(&meta, serde_json::to_string(&v).unwrap()).unwrap();

        let loaded = load_tasks(dir.path()).unwrap();
        assert!(loaded.tasks[0].truth_targets().is_none());
        assert!(loaded.true_adjacency.is_none());
    }

    #[test]
    fn malformed_cell_reports_line() {
        let cfg = GenConfig {
            d: 2,
            n_train_tasks: 1,
            n_test_tasks: 0,
            n_support: 2,
            n_query: 0,
            ..GenConfig::default()
        };
        let coll = generate_collection(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_tasks(&coll, dir.path()).unwrap();
        let path = dir.path().join("task_0.csv");
        let mut body = std::fs::read_to_string(&path).unwrap();
        body = body.replacen("support", "support\nbad,row_here,support", 1);
        std::fs::write(&path, body).unwrap();
        match load_tasks(dir.path()) {
            Err(Error::DataFormat { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected data format error, got {other:?}"),
        }
    }

    #[test]
    fn row_width_mismatch_reports_line() {
        let cfg = GenConfig {
            d: 2,
            n_train_tasks: 1,
            n_test_tasks: 0,
            n_support: 1,
            n_query: 0,
            ..GenConfig::default()
        };
        let coll = generate_collection(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_tasks(&coll, dir.path()).unwrap();
        let path = dir.path().join("task_0.csv");
        let mut body = std::fs::read_to_string(&path).unwrap();
        body.push_str("1.0,support\n");
        std::fs::write(&path, body).unwrap();
        match load_tasks(dir.path()) {
            Err(Error::DataFormat { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("fields"));
            }
            other => panic!("expected data format error, got {other:?}"),
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = GenConfig::default();
        let a = generate_collection(&cfg, 77).unwrap();
        let b = generate_collection(&cfg, 77).unwrap();
        for (x, y) in a.tasks.iter().zip(b.tasks.iter()) {
            assert_eq!(x.support, y.support);
            assert_eq!(x.query, y.query);
        }
    }
}
