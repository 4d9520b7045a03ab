//! Areal adjacency with nearest-centroid repair of isolated areas, plus the
//! spectral quantities the Leroux CAR prior needs.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geo::{haversine_km, LatLon};

/// Undirected 0/1 adjacency before island repair.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraph {
    pub zcta_ids: Vec<String>,
    /// Sorted neighbour lists.
    pub neighbors: Vec<Vec<usize>>,
}

impl RawGraph {
    pub fn len(&self) -> usize {
        self.zcta_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zcta_ids.is_empty()
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    fn from_edge_set(zcta_ids: Vec<String>, edges: &BTreeSet<(usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); zcta_ids.len()];
        for &(a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        RawGraph {
            zcta_ids,
            neighbors,
        }
    }

    fn edge_set(&self) -> BTreeSet<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }
}

pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != ["zcta_a", "zcta_b"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "expected header `zcta_a,zcta_b`, found `{}`",
                header.join(",")
            ),
        });
    }
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record?;
        edges.push((record[0].trim().to_string(), record[1].trim().to_string()));
    }
    Ok(edges)
}

pub fn write_edge_list(path: impl AsRef<Path>, edges: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["zcta_a", "zcta_b"])?;
    for (a, b) in edges {
        w.write_record([a, b])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Builds the graph over `nodes`. Every endpoint must be a `known_ids` entry;
/// edges touching a known area outside `nodes` (no facilities) are dropped.
pub fn build_graph(
    edges: &[(String, String)],
    known_ids: &[String],
    nodes: &[String],
) -> Result<RawGraph> {
    let known: HashSet<&str> = known_ids.iter().map(String::as_str).collect();
    let index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if index.len() != nodes.len() {
        return Err(Error::Graph("duplicate node id".into()));
    }
    let mut set = BTreeSet::new();
    for (a, b) in edges {
        for id in [a, b] {
            if !known.contains(id.as_str()) && !index.contains_key(id.as_str()) {
                return Err(Error::Graph(format!("unknown id `{id}` in edge list")));
            }
        }
        if a == b {
            return Err(Error::Graph(format!("self-loop on `{a}`")));
        }
        if let (Some(&i), Some(&j)) = (index.get(a.as_str()), index.get(b.as_str())) {
            set.insert((i.min(j), i.max(j)));
        }
    }
    Ok(RawGraph::from_edge_set(nodes.to_vec(), &set))
}

/// Edges between every pair of centroids closer than `max_km`.
pub fn threshold_edges(ids: &[String], centroids: &[LatLon], max_km: f64) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if haversine_km(centroids[i], centroids[j]) < max_km {
                edges.push((ids[i].clone(), ids[j].clone()));
            }
        }
    }
    edges
}

/// Symmetric augmented adjacency `W*` with precomputed degrees and Laplacian spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ZctaGraph {
    pub zcta_ids: Vec<String>,
    pub neighbors: Vec<Vec<usize>>,
    pub degrees: Vec<usize>,
    /// Eigenvalues of `D - W*`, ascending.
    pub laplacian_eigenvalues: Vec<f64>,
    /// Repair edges `(isolated node, nearest node)`.
    pub augmented_edges: Vec<(usize, usize)>,
}

/// Connects every originally isolated node to its nearest centroid (ties go to
/// the lexicographically smaller id). Repair edges are set in both directions,
/// and a mutually nearest isolated pair shares a single edge.
pub fn augment_islands(raw: &RawGraph, centroids: &[LatLon]) -> Result<ZctaGraph> {
    let k = raw.len();
    if centroids.len() != k {
        return Err(Error::Graph(format!(
            "{} centroids for {k} nodes",
            centroids.len()
        )));
    }
    if k < 2 {
        return Err(Error::Graph("cannot augment a single-node graph".into()));
    }
    let mut edges = raw.edge_set();
    let mut augmented_edges = Vec::new();
    for i in (0..k).filter(|&i| raw.degree(i) == 0) {
        let nearest = (0..k)
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                haversine_km(centroids[i], centroids[a])
                    .total_cmp(&haversine_km(centroids[i], centroids[b]))
                    .then_with(|| raw.zcta_ids[a].cmp(&raw.zcta_ids[b]))
            })
            .expect("k >= 2");
        if edges.insert((i.min(nearest), i.max(nearest))) {
            augmented_edges.push((i, nearest));
        }
    }
    let repaired = RawGraph::from_edge_set(raw.zcta_ids.clone(), &edges);
    Ok(ZctaGraph::from_neighbors(
        repaired.zcta_ids,
        repaired.neighbors,
        augmented_edges,
    ))
}

impl ZctaGraph {
    /// Wraps neighbour lists that are already symmetric, computing the spectrum.
    pub fn from_neighbors(
        zcta_ids: Vec<String>,
        neighbors: Vec<Vec<usize>>,
        augmented_edges: Vec<(usize, usize)>,
    ) -> Self {
        let degrees: Vec<usize> = neighbors.iter().map(Vec::len).collect();
        let k = zcta_ids.len();
        let laplacian = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                degrees[i] as f64
            } else if neighbors[i].binary_search(&j).is_ok() {
                -1.0
            } else {
                0.0
            }
        });
        let mut laplacian_eigenvalues: Vec<f64> = SymmetricEigen::new(laplacian)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        laplacian_eigenvalues.sort_by(f64::total_cmp);
        ZctaGraph {
            zcta_ids,
            neighbors,
            degrees,
            laplacian_eigenvalues,
            augmented_edges,
        }
    }

    pub fn len(&self) -> usize {
        self.zcta_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zcta_ids.is_empty()
    }

    pub fn n_edges(&self) -> usize {
        self.degrees.iter().sum::<usize>() / 2
    }

    /// `Σ_{k'} ω*_{kk'} φ_{k'}`.
    pub fn neighbor_sum(&self, k: usize, phi: &[f64]) -> f64 {
        self.neighbors[k].iter().map(|&j| phi[j]).sum()
    }

    /// `ρ(D - W*) + (1 - ρ)I` evaluated as `φᵀQφ` without forming `Q`.
    pub fn leroux_quadratic_form(&self, phi: &[f64], rho: f64) -> f64 {
        let mut edge_sum = 0.0;
        for (a, ns) in self.neighbors.iter().enumerate() {
            for &b in ns.iter().filter(|&&b| b > a) {
                edge_sum += (phi[a] - phi[b]).powi(2);
            }
        }
        let sq: f64 = phi.iter().map(|v| v * v).sum();
        rho * edge_sum + (1.0 - rho) * sq
    }

    /// `log det Q(ρ)` from the Laplacian spectrum.
    pub fn leroux_logdet(&self, rho: f64) -> Result<f64> {
        if rho == 1.0 {
            return Err(Error::IntrinsicBoundary);
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidParams(format!(
                "rho must lie in [0, 1), got {rho}"
            )));
        }
        Ok(self
            .laplacian_eigenvalues
            .iter()
            .map(|&lambda| ((1.0 - rho) + rho * lambda).ln())
            .sum())
    }

    /// Dense 0/1 adjacency.
    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        let k = self.len();
        let mut w = DMatrix::zeros(k, k);
        for (a, ns) in self.neighbors.iter().enumerate() {
            for &b in ns {
                w[(a, b)] = 1.0;
            }
        }
        w
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (a, ns) in self.neighbors.iter().enumerate() {
            if ns.contains(&a) {
                return Err(Error::Graph(format!("self-loop at node {a}")));
            }
            if ns.is_empty() {
                return Err(Error::Graph(format!("node {a} has no neighbours")));
            }
            for &b in ns {
                if self.neighbors[b].binary_search(&a).is_err() {
                    return Err(Error::Graph(format!("asymmetric edge {a} -> {b}")));
                }
            }
        }
        let min = self.laplacian_eigenvalues.first().copied().unwrap_or(0.0);
        if min.abs() > 1e-9 || self.laplacian_eigenvalues.iter().any(|&l| l < -1e-9) {
            return Err(Error::Graph(format!(
                "Laplacian spectrum invalid (min {min})"
            )));
        }
        Ok(())
    }

    pub fn write_diagnostics(
        &self,
        degrees_path: impl AsRef<Path>,
        eigen_path: impl AsRef<Path>,
    ) -> Result<()> {
        let mut w = csv::Writer::from_path(degrees_path.as_ref())?;
        w.write_record(["zcta_id", "degree", "augmented"])?;
        let augmented: HashSet<usize> = self.augmented_edges.iter().map(|e| e.0).collect();
        for (k, id) in self.zcta_ids.iter().enumerate() {
            w.write_record([
                id.clone(),
                self.degrees[k].to_string(),
                augmented.contains(&k).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(degrees_path.as_ref(), e))?;
        let mut w = csv::Writer::from_path(eigen_path.as_ref())?;
        w.write_record(["index", "laplacian_eigenvalue"])?;
        for (i, l) in self.laplacian_eigenvalues.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(eigen_path.as_ref(), e))
    }
}

/// `log det(Q(ρ)/τ²) = Σ log((1-ρ) + ρλ_m) - K log τ²`.
pub fn logdet_precision(rho: f64, tau2: f64, graph: &ZctaGraph) -> Result<f64> {
    if !(tau2 > 0.0) {
        return Err(Error::InvalidParams(format!(
            "tau2 must be > 0, got {tau2}"
        )));
    }
    Ok(graph.leroux_logdet(rho)? - graph.len() as f64 * tau2.ln())
}
