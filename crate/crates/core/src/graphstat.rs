//! Exact shortest-path and degree statistics over [`Adjacency`] graphs.
//!
//! Distances are unweighted BFS hop counts summed in `u64`; the mean is a
//! single division at the end, so sequential and parallel runs agree bit for
//! bit.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::graphkit::{build_grid, build_knn_adjacency, Adjacency, GraphKind};

/// How node pairs enter the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairConvention {
    /// Mean over the `N (N - 1)` ordered pairs `i != j`.
    OrderedPairsExcludingSelf,
    /// Mean over all `N^2` ordered pairs, self-pairs contributing 0.
    OrderedPairsIncludingSelf,
}

impl PairConvention {
    pub fn pair_count(self, nodes: usize) -> u64 {
        let n = nodes as u64;
        match self {
            PairConvention::OrderedPairsExcludingSelf => n * n.saturating_sub(1),
            PairConvention::OrderedPairsIncludingSelf => n * n,
        }
    }
}

/// Unweighted distances from `src`; `None` marks unreachable nodes.
pub fn bfs_distances(adj: &Adjacency, src: usize) -> Result<Vec<Option<u32>>> {
    let n = adj.node_count();
    if src >= n {
        return Err(domain(format!("source {src} out of range for {n} nodes")));
    }
    let mut dist = vec![None; n];
    let mut queue = VecDeque::with_capacity(n);
    dist[src] = Some(0);
    queue.push_back(src);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or_default();
        for &v in &adj.neighbors[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// BFS from `src` into a caller-owned buffer. Returns (sum of distances,
/// number of reached nodes other than `src`, first unreachable node).
fn bfs_sum(adj: &Adjacency, src: usize, dist: &mut [u32], queue: &mut VecDeque<usize>) -> (u64, u64, Option<usize>) {
    dist.fill(u32::MAX);
    queue.clear();
    dist[src] = 0;
    queue.push_back(src);
    let (mut sum, mut reached) = (0u64, 0u64);
    while let Some(u) = queue.pop_front() {
        let next = dist[u] + 1;
        for &v in &adj.neighbors[u] {
            if dist[v] == u32::MAX {
                dist[v] = next;
                sum += next as u64;
                reached += 1;
                queue.push_back(v);
            }
        }
    }
    let missing = dist.iter().position(|&d| d == u32::MAX);
    (sum, reached, missing)
}

/// Totals over every BFS source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistanceTotals {
    pub sum: u64,
    pub reachable_pairs: u64,
    /// First (source, target) pair with no path, if any.
    pub unreachable: Option<(usize, usize)>,
}

pub fn distance_totals(adj: &Adjacency, parallel: bool) -> DistanceTotals {
    let n = adj.node_count();
    let per_source = |src: usize, dist: &mut Vec<u32>, queue: &mut VecDeque<usize>| {
        let (s, r, miss) = bfs_sum(adj, src, dist, queue);
        DistanceTotals {
            sum: s,
            reachable_pairs: r,
            unreachable: miss.map(|t| (src, t)),
        }
    };
    let merge = |a: DistanceTotals, b: DistanceTotals| DistanceTotals {
        sum: a.sum + b.sum,
        reachable_pairs: a.reachable_pairs + b.reachable_pairs,
        unreachable: a.unreachable.or(b.unreachable),
    };
    let zero = DistanceTotals {
        sum: 0,
        reachable_pairs: 0,
        unreachable: None,
    };
    if parallel {
        (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0u32; n], VecDeque::with_capacity(n)),
                |(dist, queue), src| per_source(src, dist, queue),
            )
            // sources are visited in index order within and across chunks
            .reduce(|| zero, merge)
    } else {
        let mut dist = vec![0u32; n];
        let mut queue = VecDeque::with_capacity(n);
        (0..n).fold(zero, |acc, src| merge(acc, per_source(src, &mut dist, &mut queue)))
    }
}

/// Mean shortest-path length under `convention`; errors on a disconnected graph.
pub fn avg_shortest_path_with(adj: &Adjacency, convention: PairConvention, parallel: bool) -> Result<f64> {
    let n = adj.node_count();
    if n <= 1 {
        return Ok(0.0);
    }
    let totals = distance_totals(adj, parallel);
    if let Some((from, to)) = totals.unreachable {
        return Err(Error::Disconnected { from, to });
    }
    Ok(totals.sum as f64 / convention.pair_count(n) as f64)
}

/// Mean of `d(i, j)` over ordered pairs `i != j`.
pub fn avg_shortest_path(adj: &Adjacency) -> Result<f64> {
    avg_shortest_path_with(adj, PairConvention::OrderedPairsExcludingSelf, true)
}

/// Mean over reachable ordered pairs only; defined for disconnected graphs.
pub fn reachable_pair_mean(adj: &Adjacency) -> Option<f64> {
    let t = distance_totals(adj, true);
    (t.reachable_pairs > 0).then(|| t.sum as f64 / t.reachable_pairs as f64)
}

/// Tabulated square-lattice value `2n/3`; this is also the exact i != j mean
/// Manhattan distance on an `n x n` grid.
pub fn lattice_closed_form(n: usize) -> f64 {
    2.0 * n as f64 / 3.0
}

/// Exact self-inclusive mean Manhattan distance `2 (n^2 - 1) / (3n)`.
pub fn lattice_self_inclusive_mean(n: usize) -> f64 {
    let n = n as f64;
    2.0 * (n * n - 1.0) / (3.0 * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub directed_edge_count: usize,
}

pub fn degree_stats(adj: &Adjacency) -> DegreeStats {
    let degrees = adj.neighbors.iter().map(Vec::len);
    let edges = adj.directed_edge_count();
    DegreeStats {
        min: degrees.clone().min().unwrap_or(0),
        max: degrees.max().unwrap_or(0),
        mean: if adj.node_count() == 0 {
            0.0
        } else {
            edges as f64 / adj.node_count() as f64
        },
        directed_edge_count: edges,
    }
}

/// One row of the resolution/graph-kind path table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub kind: GraphKind,
    pub resolution: usize,
    /// Mean over the construction overlaid on the square lattice; `None` when
    /// even that is disconnected.
    pub avg_shortest_path: Option<f64>,
    pub pair_convention: PairConvention,
    pub lattice_overlay: bool,
    pub node_count: usize,
    pub directed_edge_count: usize,
    pub min_degree: usize,
    pub max_degree: usize,
    /// `2n/3`, lattice rows only.
    pub closed_form: Option<f64>,
    /// Mean over the bare construction; `None` if it is disconnected.
    pub bare_avg_shortest_path: Option<f64>,
    /// Mean over reachable ordered pairs of the bare construction.
    pub bare_reachable_mean: Option<f64>,
}

/// Builds an `n x n` graph of `kind` and measures it.
pub fn path_report(kind: GraphKind, n: usize, k: usize) -> Result<PathReport> {
    let convention = PairConvention::OrderedPairsExcludingSelf;
    let bare = build_grid(kind, n, n, k)?;
    let stats = degree_stats(&bare);
    let overlaid = bare.overlay_lattice();
    let avg = avg_shortest_path_with(&overlaid, convention, true).ok();
    let bare_totals = distance_totals(&bare, true);
    let bare_avg = if n * n <= 1 {
        Some(0.0)
    } else {
        bare_totals
            .unreachable
            .is_none()
            .then(|| bare_totals.sum as f64 / convention.pair_count(n * n) as f64)
    };
    Ok(PathReport {
        kind,
        resolution: n,
        avg_shortest_path: avg,
        pair_convention: convention,
        lattice_overlay: true,
        node_count: bare.node_count(),
        directed_edge_count: stats.directed_edge_count,
        min_degree: stats.min,
        max_degree: stats.max,
        closed_form: (kind == GraphKind::Lattice).then(|| lattice_closed_form(n)),
        bare_avg_shortest_path: bare_avg,
        bare_reachable_mean: (bare_totals.reachable_pairs > 0)
            .then(|| bare_totals.sum as f64 / bare_totals.reachable_pairs as f64),
    })
}

/// One report per (kind, resolution), kinds outermost.
pub fn analyze(kinds: &[GraphKind], resolutions: &[usize], k: usize) -> Result<Vec<PathReport>> {
    let mut rows = Vec::with_capacity(kinds.len() * resolutions.len());
    for &kind in kinds {
        for &n in resolutions {
            rows.push(path_report(kind, n, k)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: GraphKind,
    pub resolution: usize,
    pub nodes: usize,
    pub median_seconds: f64,
    pub directed_edges: usize,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub resolutions: Vec<usize>,
    pub kinds: Vec<GraphKind>,
    pub k: usize,
    pub knn_k: usize,
    pub knn_dim: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![7, 14, 28, 56],
            kinds: vec![GraphKind::Lsgc, GraphKind::Svga, GraphKind::Knn],
            k: 2,
            knn_k: 9,
            knn_dim: 16,
            trials: 3,
            seed: 0,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Times graph construction per (kind, resolution). KNN runs over seeded
/// random features of dimension `knn_dim`.
pub fn construction_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.trials == 0 {
        return Err(domain("bench needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        for &n in &cfg.resolutions {
            let nodes = n * n;
            let features: Vec<f64> = if kind == GraphKind::Knn {
                (0..nodes * cfg.knn_dim).map(|_| rng.gen::<f64>()).collect()
            } else {
                Vec::new()
            };
            let mut times = Vec::with_capacity(cfg.trials);
            let mut edges = 0;
            for _ in 0..cfg.trials {
                let start = Instant::now();
                let adj = match kind {
                    GraphKind::Knn => build_knn_adjacency(&features, cfg.knn_dim, cfg.knn_k.min(nodes.saturating_sub(1)).max(1))?,
                    _ => build_grid(kind, n, n, cfg.k)?,
                };
                times.push(start.elapsed().as_secs_f64());
                edges = adj.directed_edge_count();
            }
            rows.push(BenchRow {
                kind,
                resolution: n,
                nodes,
                median_seconds: median(times),
                directed_edges: edges,
            });
        }
    }
    Ok(rows)
}
