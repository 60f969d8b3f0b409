//! Attributed graphs, disjoint-union batching, JSON-lines I/O and the
//! synthetic dataset generator.

mod batch;
mod io;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use batch::{batch_graphs, GraphBatch};
pub use io::{parse_graph_file, parse_graph_lines, serialize_graphs, write_graph_file};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

/// An undirected attributed graph stored as mirrored directed edges.
///
/// Undirected pair `k` occupies directed slots `2k` (u→v) and `2k + 1`
/// (v→u); edge-feature rows follow the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_feat: Matrix,
    edges: Vec<(usize, usize)>,
    edge_feat: Option<Matrix>,
}

impl Graph {
    /// Builds a graph from undirected pairs, mirroring edges and their
    /// features.
    pub fn new(
        node_feat: Matrix,
        undirected: &[(usize, usize)],
        undirected_edge_feat: Option<Matrix>,
    ) -> Result<Self> {
        let n = node_feat.rows();
        if n == 0 {
            return Err(Error::validation("graph must have at least one node"));
        }
        if let Some(&(u, v)) = undirected.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::validation(format!(
                "edge [{u}, {v}] out of range for {n} nodes"
            )));
        }
        let mut edges = Vec::with_capacity(undirected.len() * 2);
        for &(u, v) in undirected {
            edges.push((u, v));
            edges.push((v, u));
        }
        let edge_feat = match undirected_edge_feat {
            None => None,
            Some(f) => {
                if f.rows() != undirected.len() {
                    return Err(Error::validation(format!(
                        "{} edge-feature rows for {} edges",
                        f.rows(),
                        undirected.len()
                    )));
                }
                let mut mirrored = Matrix::zeros(edges.len(), f.cols());
                for k in 0..f.rows() {
                    mirrored.row_mut(2 * k).copy_from_slice(f.row(k));
                    mirrored.row_mut(2 * k + 1).copy_from_slice(f.row(k));
                }
                Some(mirrored)
            }
        };
        Ok(Self {
            node_feat,
            edges,
            edge_feat,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_feat.rows()
    }

    pub fn node_feat(&self) -> &Matrix {
        &self.node_feat
    }

    pub fn node_dim(&self) -> usize {
        self.node_feat.cols()
    }

    /// Directed edges, mirrored pairs adjacent.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_feat(&self) -> Option<&Matrix> {
        self.edge_feat.as_ref()
    }

    pub fn edge_dim(&self) -> Option<usize> {
        self.edge_feat.as_ref().map(Matrix::cols)
    }

    /// The undirected pairs the graph was built from.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().step_by(2).copied()
    }

    /// Number of incoming directed edges per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(_, t) in &self.edges {
            deg[t] += 1;
        }
        deg
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract("permute_nodes needs a permutation of 0..n"));
        }
        let mut feat = Matrix::zeros(n, self.node_dim());
        for (old, &new) in perm.iter().enumerate() {
            feat.row_mut(new).copy_from_slice(self.node_feat.row(old));
        }
        let pairs: Vec<_> = self.undirected_edges().map(|(u, v)| (perm[u], perm[v])).collect();
        let edge_feat = self
            .edge_feat
            .as_ref()
            .map(|f| Matrix::from_fn(pairs.len(), f.cols(), |k, c| f.get(2 * k, c)));
        Graph::new(feat, &pairs, edge_feat)
    }
}

/// δ: mean over all nodes of `ln(degree + 1)`.
pub fn degree_statistics<G: AsRef<Graph>>(graphs: &[G]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for g in graphs {
        for d in g.as_ref().in_degrees() {
            total += ((d + 1) as f64).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("degree statistics need a non-empty dataset"));
    }
    Ok(total / count as f64)
}

/// Train/validation partition of a dataset by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Seeded shuffle; holds out `round(n * fraction)` graphs, at least one
    /// and leaving at least one for training when `n >= 2`.
    pub fn new(n: usize, validation_fraction: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::contract(format!(
                "need at least 2 graphs to split, got {n}"
            )));
        }
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::contract(format!(
                "validation fraction must be in [0, 1), got {validation_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
        let validation = order[..n_val].to_vec();
        let train = order[n_val..].to_vec();
        Ok(Self {
            train,
            validation,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn path3() -> Graph {
        Graph::new(Matrix::filled(3, 1, 1.0), &[(0, 1), (1, 2)], None).unwrap()
    }

    #[test]
    fn degree_statistics_examples() {
        let d = degree_statistics(&[path3()]).unwrap();
        let expect = (2f64.ln() + 3f64.ln() + 2f64.ln()) / 3.0;
        assert!((d - expect).abs() < 1e-15);
        assert!((d - 0.8283).abs() < 1e-4);

        let single = Graph::new(Matrix::zeros(1, 2), &[], None).unwrap();
        assert_eq!(degree_statistics(&[single]).unwrap(), 0.0);

        let tri = Graph::new(Matrix::zeros(3, 1), &[(0, 1), (1, 2), (2, 0)], None).unwrap();
        assert!((degree_statistics(&[tri]).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!(degree_statistics::<Graph>(&[]).is_err());
    }

    #[test]
    fn edges_are_mirrored_with_features() {
        let ef = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let g = Graph::new(Matrix::zeros(2, 1), &[(0, 1)], Some(ef)).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 0)]);
        assert_eq!(g.edge_feat().unwrap().row(1), &[1.0, 2.0]);
        assert_eq!(g.undirected_edges().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn invalid_graphs_rejected() {
        assert!(Graph::new(Matrix::zeros(0, 2), &[], None).is_err());
        assert!(Graph::new(Matrix::zeros(2, 2), &[(0, 5)], None).is_err());
        assert!(Graph::new(Matrix::zeros(2, 2), &[(0, 1)], Some(Matrix::zeros(2, 1))).is_err());
    }

    #[test]
    fn split_is_disjoint_cover() {
        let s = DatasetSplit::new(50, 0.1, 3).unwrap();
        assert_eq!(s.validation.len(), 5);
        let mut all: Vec<_> = s.train.iter().chain(&s.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(s, DatasetSplit::new(50, 0.1, 3).unwrap());
        assert_ne!(s, DatasetSplit::new(50, 0.1, 4).unwrap());
    }

    #[test]
    fn permutation_relabels_consistently() {
        let g = path3();
        let p = g.permute_nodes(&[2, 0, 1]).unwrap();
        assert_eq!(p.undirected_edges().collect::<Vec<_>>(), vec![(2, 0), (0, 1)]);
        assert_eq!(p.in_degrees(), vec![2, 1, 1]);
        assert!(g.permute_nodes(&[0, 0, 1]).is_err());
    }
}
