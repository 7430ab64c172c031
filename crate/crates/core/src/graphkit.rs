//! Pixel-grid graph builders.
//!
//! Every builder emits an [`Adjacency`]: directed, row-major neighbor lists
//! (`index = r * width + c`) that are sorted, duplicate-free and never contain
//! the node itself. LSGC, SVGA and lattice graphs are symmetric; KNN graphs
//! are not symmetrized.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Number of binary digits needed to represent `n` (`floor(log2 n) + 1`).
pub fn bit_depth(n: i64) -> Result<u32> {
    if n <= 0 {
        return Err(domain(format!("bit_depth needs n >= 1, got {n}")));
    }
    Ok(64 - n.leading_zeros())
}

/// Image dimensions together with their bit-depths and the expansion rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsgcConfig {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub h_bits: u32,
    pub w_bits: u32,
}

impl LsgcConfig {
    pub fn new(height: usize, width: usize, k: usize) -> Result<Self> {
        check_dims(height, width)?;
        check_rate(k)?;
        Ok(Self {
            height,
            width,
            k,
            h_bits: bit_depth(height as i64)?,
            w_bits: bit_depth(width as i64)?,
        })
    }

    /// Per-axis neighbor offsets for rows and columns.
    pub fn axis_offsets(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((
            effective_offsets(self.height, self.k)?.into_iter().collect(),
            effective_offsets(self.width, self.k)?.into_iter().collect(),
        ))
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(domain(format!(
            "grid dimensions must be >= 1, got {height}x{width}"
        )));
    }
    Ok(())
}

fn check_rate(k: usize) -> Result<()> {
    if k < 2 {
        return Err(domain(format!("expansion rate K must be >= 2, got {k}")));
    }
    Ok(())
}

/// Raw LSGC distances `K^i - 1` for `i = 1..=bit_depth(dim)`, unreduced.
pub fn lsgc_offsets(dim: usize, k: usize) -> Result<Vec<u64>> {
    if dim == 0 {
        return Err(domain("dimension must be >= 1"));
    }
    check_rate(k)?;
    let depth = bit_depth(dim as i64)?;
    (1..=depth)
        .map(|i| {
            (k as u64)
                .checked_pow(i)
                .map(|p| p - 1)
                .ok_or_else(|| domain(format!("offset {k}^{i} - 1 overflows u64")))
        })
        .collect()
}

/// LSGC offsets reduced onto the torus: forward and backward residues of
/// every raw distance, with the self residue 0 removed.
pub fn effective_offsets(dim: usize, k: usize) -> Result<BTreeSet<usize>> {
    let raw = lsgc_offsets(dim, k)?;
    let m = dim as u64;
    let mut set = BTreeSet::new();
    for d in raw {
        let fwd = d % m;
        set.insert(fwd as usize);
        set.insert(((m - fwd) % m) as usize);
    }
    set.remove(&0);
    Ok(set)
}

/// SVGA offsets: every K-th position along the axis, both directions, on the
/// torus. For even `dim` this is exactly the same-residue class mod K.
pub fn svga_offsets(dim: usize, k: usize) -> Result<BTreeSet<usize>> {
    if dim == 0 {
        return Err(domain("dimension must be >= 1"));
    }
    if k == 0 {
        return Err(domain("SVGA stride K must be >= 1"));
    }
    let mut set = BTreeSet::new();
    for d in (k..dim).step_by(k) {
        set.insert(d);
        set.insert(dim - d);
    }
    set.remove(&0);
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Lsgc,
    Svga,
    Lattice,
    Knn,
}

impl GraphKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::Lsgc => "lsgc",
            GraphKind::Svga => "svga",
            GraphKind::Lattice => "lattice",
            GraphKind::Knn => "knn",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lsgc" => Ok(GraphKind::Lsgc),
            "svga" => Ok(GraphKind::Svga),
            "lattice" => Ok(GraphKind::Lattice),
            "knn" => Ok(GraphKind::Knn),
            other => Err(domain(format!("unknown graph kind '{other}'"))),
        }
    }
}

/// Directed neighbor lists over an `height x width` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    pub height: usize,
    pub width: usize,
    pub kind: GraphKind,
    pub k: Option<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn directed_edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn contains_edge(&self, from: usize, to: usize) -> bool {
        self.neighbors[from].binary_search(&to).is_ok()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, list)| list.iter().all(|&j| self.contains_edge(j, i)))
    }

    /// Checks the container invariants: sorted, duplicate-free, in range, no
    /// self-loops.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.neighbors.len() != n {
            return Err(domain(format!(
                "{} neighbor lists for a {}x{} grid",
                self.neighbors.len(),
                self.height,
                self.width
            )));
        }
        for (i, list) in self.neighbors.iter().enumerate() {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(domain(format!("neighbors of {i} not strictly sorted")));
            }
            if let Some(&j) = list.iter().find(|&&j| j >= n || j == i) {
                return Err(domain(format!("invalid neighbor {j} of node {i}")));
            }
        }
        Ok(())
    }

    /// Union with the 4-neighbor square lattice (no wrap). Kind and K are kept.
    pub fn overlay_lattice(&self) -> Adjacency {
        let lattice = build_lattice_adjacency(self.height, self.width)
            .expect("dimensions already validated");
        let neighbors = self
            .neighbors
            .iter()
            .zip(&lattice.neighbors)
            .map(|(a, b)| {
                let mut merged: Vec<usize> = a.iter().chain(b).copied().collect();
                merged.sort_unstable();
                merged.dedup();
                merged
            })
            .collect();
        Adjacency {
            neighbors,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("adjacency serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let adj: Adjacency =
            serde_json::from_str(s).map_err(|e| domain(format!("bad adjacency JSON: {e}")))?;
        adj.validate()?;
        Ok(adj)
    }
}

/// Torus graph connecting `(r, c)` to `(r +- dr, c)` and `(r, c +- dc)` for
/// the given per-axis offset sets (already closed under negation).
fn build_axis_adjacency(
    height: usize,
    width: usize,
    row_offsets: &BTreeSet<usize>,
    col_offsets: &BTreeSet<usize>,
    kind: GraphKind,
    k: usize,
) -> Adjacency {
    let neighbors = (0..height * width)
        .map(|idx| {
            let (r, c) = (idx / width, idx % width);
            let mut list: Vec<usize> = row_offsets
                .iter()
                .map(|&d| ((r + d) % height) * width + c)
                .chain(col_offsets.iter().map(|&d| r * width + (c + d) % width))
                .collect();
            list.sort_unstable();
            list.dedup();
            list
        })
        .collect();
    Adjacency {
        height,
        width,
        kind,
        k: Some(k),
        neighbors,
    }
}

pub fn build_lsgc_adjacency(height: usize, width: usize, k: usize) -> Result<Adjacency> {
    let cfg = LsgcConfig::new(height, width, k)?;
    Ok(build_axis_adjacency(
        height,
        width,
        &effective_offsets(cfg.height, k)?,
        &effective_offsets(cfg.width, k)?,
        GraphKind::Lsgc,
        k,
    ))
}

pub fn build_svga_adjacency(height: usize, width: usize, k: usize) -> Result<Adjacency> {
    check_dims(height, width)?;
    Ok(build_axis_adjacency(
        height,
        width,
        &svga_offsets(height, k)?,
        &svga_offsets(width, k)?,
        GraphKind::Svga,
        k,
    ))
}

/// 4-neighbor grid graph without wrap-around.
pub fn build_lattice_adjacency(height: usize, width: usize) -> Result<Adjacency> {
    check_dims(height, width)?;
    let neighbors = (0..height * width)
        .map(|idx| {
            let (r, c) = (idx / width, idx % width);
            let mut list = Vec::with_capacity(4);
            if r > 0 {
                list.push(idx - width);
            }
            if c > 0 {
                list.push(idx - 1);
            }
            if c + 1 < width {
                list.push(idx + 1);
            }
            if r + 1 < height {
                list.push(idx + width);
            }
            list
        })
        .collect();
    Ok(Adjacency {
        height,
        width,
        kind: GraphKind::Lattice,
        k: None,
        neighbors,
    })
}

/// Brute-force Euclidean k-nearest neighbors over `features` (row-major,
/// `n x dim`). Squared distances are compared exactly; ties go to the lower
/// node index. The result is laid out as a `1 x n` grid.
pub fn build_knn_adjacency(features: &[f64], dim: usize, k: usize) -> Result<Adjacency> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(domain(format!(
            "feature buffer of length {} is not a multiple of D = {dim}",
            features.len()
        )));
    }
    let n = features.len() / dim;
    if k == 0 || k >= n {
        return Err(domain(format!("KNN needs 1 <= k < N, got k = {k}, N = {n}")));
    }
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &features[i * dim..(i + 1) * dim];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let xj = &features[j * dim..(j + 1) * dim];
                    let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, j)
                })
                .collect();
            let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, order);
            let mut list: Vec<usize> = cand[..k].iter().map(|&(_, j)| j).collect();
            list.sort_unstable();
            list
        })
        .collect();
    Ok(Adjacency {
        height: 1,
        width: n,
        kind: GraphKind::Knn,
        k: Some(k),
        neighbors,
    })
}

/// Builds a grid graph of the requested kind. KNN is not a grid construction
/// and is rejected here.
pub fn build_grid(kind: GraphKind, height: usize, width: usize, k: usize) -> Result<Adjacency> {
    match kind {
        GraphKind::Lsgc => build_lsgc_adjacency(height, width, k),
        GraphKind::Svga => build_svga_adjacency(height, width, k),
        GraphKind::Lattice => build_lattice_adjacency(height, width),
        GraphKind::Knn => Err(domain("KNN graphs need feature vectors, not a grid size")),
    }
}
