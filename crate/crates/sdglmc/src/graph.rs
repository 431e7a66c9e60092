//! Areal adjacency graphs and the precision matrices built from them.
//!
//! The graph stores an undirected neighbour structure over `n` areal units.
//! Two precision matrices derive from it: the intrinsic autoregressive form
//! `Q = D - W` (improper, rank `n - 1` on a connected graph) used as a prior,
//! and the proper form `Omega = D - phi * W` used to colour simulation
//! innovations.

use nalgebra::{DMatrix, DVector};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({i}, {j}) references a unit outside [0, {n})")]
    InvalidIndex { i: usize, j: usize, n: usize },
    #[error("self loop on unit {0}")]
    SelfLoop(usize),
    #[error("graph is disconnected ({components} components); a connected graph is required here")]
    DisconnectedGraph { components: usize },
    #[error("spatial autocorrelation must lie in (0, 1), got {0}")]
    PhiOutOfRange(f64),
    #[error("graph must have at least one node")]
    Empty,
    #[error("failed to read edge list {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("edge list {path}, line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

/// Undirected areal adjacency with cached degrees.
///
/// Immutable after construction; share by reference across threads.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    degree: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    components: usize,
}

impl SpatialGraph {
    /// Builds a validated graph from an edge list. Edges are normalized to
    /// `(min, max)` and de-duplicated; a disconnected result is permitted
    /// (check [`SpatialGraph::connected`]) but rejected later by ICAR fitting.
    pub fn from_edges(n: usize, edge_list: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(edge_list.len());
        for &(i, j) in edge_list {
            if i >= n || j >= n {
                return Err(GraphError::InvalidIndex { i, j, n });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            edges.push((i.min(j), i.max(j)));
        }
        edges.sort_unstable();
        edges.dedup();

        let mut degree = vec![0usize; n];
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            degree[i] += 1;
            degree[j] += 1;
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        let components = count_components(n, &neighbors);
        if components > 1 {
            log::warn!("spatial graph has {components} connected components");
        }
        Ok(Self {
            n,
            edges,
            degree,
            neighbors,
            components,
        })
    }

    /// Rook-adjacency lattice with `rows * cols` units, row-major unit ids.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "lattice dimensions must be >= 1");
        let idx = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::with_capacity(rows * (cols - 1) + cols * (rows - 1));
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.push((idx(r, c), idx(r, c + 1)));
                }
                if r + 1 < rows {
                    edges.push((idx(r, c), idx(r + 1, c)));
                }
            }
        }
        Self::from_edges(rows * cols, &edges).expect("lattice edges are valid by construction")
    }

    /// Unit coordinates of the lattice produced by [`SpatialGraph::lattice`],
    /// in the same row-major order.
    pub fn lattice_coords(rows: usize, cols: usize) -> Vec<(f64, f64)> {
        let mut coords = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                coords.push((c as f64, r as f64));
            }
        }
        coords
    }

    /// Parses a whitespace-separated `i j` edge-list file (`#` comments).
    /// When `n` is `None` the unit count is inferred as `max index + 1`.
    pub fn from_edge_list_file(path: &Path, n: Option<usize>) -> Result<Self, GraphError> {
        let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut edges = Vec::new();
        let mut max_idx = 0usize;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize, GraphError> {
                tok.ok_or_else(|| GraphError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: "expected two indices".into(),
                })?
                .parse::<usize>()
                .map_err(|e| GraphError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: e.to_string(),
                })
            };
            let i = parse(it.next())?;
            let j = parse(it.next())?;
            if it.next().is_some() {
                return Err(GraphError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: "expected exactly two indices".into(),
                });
            }
            max_idx = max_idx.max(i).max(j);
            edges.push((i, j));
        }
        let n = n.unwrap_or(max_idx + 1);
        Self::from_edges(n, &edges)
    }

    /// Writes the edge list in the same format accepted by
    /// [`SpatialGraph::from_edge_list_file`].
    pub fn write_edge_list_file(&self, path: &Path) -> Result<(), GraphError> {
        let mut out = String::with_capacity(self.edges.len() * 8);
        for &(i, j) in &self.edges {
            out.push_str(&format!("{i} {j}\n"));
        }
        fs::write(path, out).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn connected(&self) -> bool {
        self.components == 1
    }

    /// Gate used before ICAR fitting: the rank-deficiency correction by
    /// centering assumes a single connected component.
    pub fn require_connected(&self) -> Result<(), GraphError> {
        if self.connected() {
            Ok(())
        } else {
            Err(GraphError::DisconnectedGraph {
                components: self.components,
            })
        }
    }

    /// Intrinsic precision `Q = D - W`. Every row sums to zero.
    pub fn icar_precision(&self) -> IcarPrecision {
        let mut q = DMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            q[(i, j)] = -1.0;
            q[(j, i)] = -1.0;
        }
        for i in 0..self.n {
            q[(i, i)] = self.degree[i] as f64;
        }
        IcarPrecision {
            rank: self.n - self.components,
            q,
        }
    }

    /// Proper precision `Omega = D - phi * W`, positive definite for
    /// `phi` in (0, 1) on a connected graph.
    pub fn pcar_precision(&self, phi: f64) -> Result<PcarPrecision, GraphError> {
        if !(phi > 0.0 && phi < 1.0) || !phi.is_finite() {
            return Err(GraphError::PhiOutOfRange(phi));
        }
        let mut omega = DMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            omega[(i, j)] = -phi;
            omega[(j, i)] = -phi;
        }
        for i in 0..self.n {
            omega[(i, i)] = self.degree[i] as f64;
        }
        Ok(PcarPrecision { omega, phi })
    }

    /// Pairwise-difference quadratic form `x' (D - W) x`, evaluated as the
    /// sum of squared differences over edges.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.n);
        self.edges
            .iter()
            .map(|&(i, j)| {
                let d = x[i] - x[j];
                d * d
            })
            .sum()
    }
}

fn count_components(n: usize, neighbors: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; n];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(u) = stack.pop() {
            for &v in &neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    components
}

/// `Q = D - W` with its rank (`n` minus the number of components).
#[derive(Debug, Clone)]
pub struct IcarPrecision {
    pub q: DMatrix<f64>,
    pub rank: usize,
}

/// `Omega = D - phi * W` for `phi` in (0, 1).
#[derive(Debug, Clone)]
pub struct PcarPrecision {
    pub omega: DMatrix<f64>,
    pub phi: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_node_graph() {
        let g = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(g.degree(), &[1, 1]);
        assert!(g.connected());
    }

    #[test]
    fn isolated_node_flagged_not_fatal() {
        let g = SpatialGraph::from_edges(3, &[(0, 1)]).unwrap();
        assert!(!g.connected());
        assert!(matches!(
            g.require_connected(),
            Err(GraphError::DisconnectedGraph { components: 2 })
        ));
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(matches!(
            SpatialGraph::from_edges(2, &[(0, 2)]),
            Err(GraphError::InvalidIndex { .. })
        ));
        assert!(matches!(
            SpatialGraph::from_edges(2, &[(1, 1)]),
            Err(GraphError::SelfLoop(1))
        ));
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = SpatialGraph::from_edges(2, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn lattice_degrees_4x4() {
        // Rook adjacency: corners 2, edge cells 3, interior 4.
        let g = SpatialGraph::lattice(4, 4);
        assert_eq!(g.n(), 16);
        let deg = g.degree();
        for r in 0..4 {
            for c in 0..4 {
                let on_r = usize::from(r == 0 || r == 3);
                let on_c = usize::from(c == 0 || c == 3);
                assert_eq!(deg[r * 4 + c], 4 - on_r - on_c);
            }
        }
    }

    #[test]
    fn lattice_sizes() {
        let g = SpatialGraph::lattice(1, 1);
        assert_eq!((g.n(), g.n_edges()), (1, 0));
        let g = SpatialGraph::lattice(2, 2);
        assert_eq!((g.n(), g.n_edges()), (4, 4));
        // r(c-1) + c(r-1) rook edges.
        let g = SpatialGraph::lattice(3, 4);
        assert_eq!((g.n(), g.n_edges()), (12, 3 * 3 + 4 * 2));
    }

    #[test]
    fn icar_small_matrices() {
        let g = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        let q = g.icar_precision().q;
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));

        let path = SpatialGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let q = path.icar_precision().q;
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(q, expected);
    }

    #[test]
    fn icar_rank_by_eigenvalues() {
        let g = SpatialGraph::lattice(4, 4);
        let icar = g.icar_precision();
        let eigs = icar.q.clone().symmetric_eigen().eigenvalues;
        let numeric_rank = eigs.iter().filter(|&&l| l > 1e-9).count();
        assert_eq!(numeric_rank, 15);
        assert_eq!(icar.rank, 15);
    }

    #[test]
    fn icar_row_sums_zero_and_symmetric() {
        let g = SpatialGraph::lattice(5, 3);
        let q = g.icar_precision().q;
        for i in 0..g.n() {
            assert_abs_diff_eq!(q.row(i).sum(), 0.0, epsilon = 1e-15);
            for j in 0..g.n() {
                assert_eq!(q[(i, j)], q[(j, i)]);
            }
        }
    }

    #[test]
    fn quadratic_form_matches_matrix() {
        let g = SpatialGraph::lattice(4, 5);
        let q = g.icar_precision().q;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = DVector::from_fn(g.n(), |_, _| rng.gen_range(-2.0..2.0));
            let direct = (x.transpose() * &q * &x)[(0, 0)];
            assert_abs_diff_eq!(g.quadratic_form(&x), direct, epsilon = 1e-10);
        }
    }

    #[test]
    fn pcar_small_matrix_and_limits() {
        let g = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        let p = g.pcar_precision(0.5).unwrap();
        assert_eq!(
            p.omega,
            DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0])
        );

        // phi -> 0 leaves the degree diagonal.
        let p = g.pcar_precision(1e-12).unwrap();
        assert_abs_diff_eq!(p.omega[(0, 1)], 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(p.omega[(0, 0)], 1.0, epsilon = 1e-15);

        // phi -> 1 recovers the intrinsic matrix elementwise.
        let p = g.pcar_precision(1.0 - 1e-12).unwrap();
        let q = g.icar_precision().q;
        assert_abs_diff_eq!((p.omega - q).norm(), 0.0, epsilon = 1e-9);

        assert!(matches!(
            g.pcar_precision(1.0),
            Err(GraphError::PhiOutOfRange(_))
        ));
        assert!(matches!(
            g.pcar_precision(0.0),
            Err(GraphError::PhiOutOfRange(_))
        ));
    }

    #[test]
    fn pcar_positive_definite() {
        let g = SpatialGraph::lattice(4, 4);
        let p = g.pcar_precision(0.98).unwrap();
        let min_eig = p
            .omega
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig > 0.0, "smallest eigenvalue {min_eig} not positive");
    }

    #[test]
    fn pcar_cholesky_succeeds_up_to_20x20() {
        for &phi in &[0.2, 0.5, 0.98] {
            for &(r, c) in &[(5, 5), (12, 9), (20, 20)] {
                let g = SpatialGraph::lattice(r, c);
                let p = g.pcar_precision(phi).unwrap();
                assert!(
                    p.omega.clone().cholesky().is_some(),
                    "cholesky failed for {r}x{c}, phi={phi}"
                );
            }
        }
    }

    #[test]
    fn edge_list_file_round_trip() {
        let dir = std::env::temp_dir().join("sdglmc_graph_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("edges.txt");
        std::fs::write(&path, "# comment line\n0 1\n1 2 # trailing comment\n\n2 3\n").unwrap();
        let g = SpatialGraph::from_edge_list_file(&path, None).unwrap();
        assert_eq!((g.n(), g.n_edges()), (4, 3));

        let out = dir.join("edges_out.txt");
        g.write_edge_list_file(&out).unwrap();
        let g2 = SpatialGraph::from_edge_list_file(&out, Some(4)).unwrap();
        assert_eq!(g2.edges(), g.edges());
    }
}
