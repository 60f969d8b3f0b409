use std::sync::Arc;

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Disjoint union of several graphs with per-node segment ids.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    node_feat: Matrix,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    edge_feat: Option<Matrix>,
    segment_ids: Arc<[usize]>,
    graph_count: usize,
    in_degree: Vec<usize>,
}

/// Stacks graphs in input order, offsetting edge endpoints by the cumulative
/// node count.
pub fn batch_graphs<G: AsRef<Graph>>(graphs: &[G]) -> Result<GraphBatch> {
    let Some(first) = graphs.first().map(AsRef::as_ref) else {
        return Err(Error::contract("cannot batch an empty list of graphs"));
    };
    let d_x = first.node_dim();
    let d_e = first.edge_dim();
    let total_nodes: usize = graphs.iter().map(|g| g.as_ref().num_nodes()).sum();
    let total_edges: usize = graphs.iter().map(|g| g.as_ref().edges().len()).sum();

    let mut feat = Vec::with_capacity(total_nodes * d_x);
    let mut src = Vec::with_capacity(total_edges);
    let mut dst = Vec::with_capacity(total_edges);
    let mut efeat = d_e.map(|w| Vec::with_capacity(total_edges * w));
    let mut segment_ids = Vec::with_capacity(total_nodes);
    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        let g = g.as_ref();
        if g.node_dim() != d_x {
            return Err(Error::Shape {
                op: "batch_graphs node features",
                lhs: (total_nodes, d_x),
                rhs: g.node_feat().shape(),
            });
        }
        if g.edge_dim() != d_e {
            return Err(Error::Shape {
                op: "batch_graphs edge features",
                lhs: (total_edges, d_e.unwrap_or(0)),
                rhs: (g.edges().len(), g.edge_dim().unwrap_or(0)),
            });
        }
        feat.extend_from_slice(g.node_feat().data());
        for &(s, t) in g.edges() {
            src.push(s + offset);
            dst.push(t + offset);
        }
        if let (Some(acc), Some(ef)) = (efeat.as_mut(), g.edge_feat()) {
            acc.extend_from_slice(ef.data());
        }
        segment_ids.extend(std::iter::repeat(gi).take(g.num_nodes()));
        offset += g.num_nodes();
    }

    let mut in_degree = vec![0; total_nodes];
    for &t in &dst {
        in_degree[t] += 1;
    }
    Ok(GraphBatch {
        node_feat: Matrix::from_vec(total_nodes, d_x, feat)?,
        src: src.into(),
        dst: dst.into(),
        edge_feat: match (efeat, d_e) {
            (Some(data), Some(w)) => Some(Matrix::from_vec(total_edges, w, data)?),
            _ => None,
        },
        segment_ids: segment_ids.into(),
        graph_count: graphs.len(),
        in_degree,
    })
}

impl GraphBatch {
    pub fn node_feat(&self) -> &Matrix {
        &self.node_feat
    }

    pub fn num_nodes(&self) -> usize {
        self.node_feat.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn src(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn dst(&self) -> &Arc<[usize]> {
        &self.dst
    }

    pub fn edge_feat(&self) -> Option<&Matrix> {
        self.edge_feat.as_ref()
    }

    pub fn segment_ids(&self) -> &Arc<[usize]> {
        &self.segment_ids
    }

    pub fn graph_count(&self) -> usize {
        self.graph_count
    }

    pub fn in_degree(&self) -> &[usize] {
        &self.in_degree
    }
}

impl AsRef<Graph> for Graph {
    fn as_ref(&self) -> &Graph {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)], base: f64) -> Graph {
        Graph::new(
            Matrix::from_fn(n, 2, |r, c| base + r as f64 + 0.5 * c as f64),
            edges,
            None,
        )
        .unwrap()
    }

    #[test]
    fn offsets_and_segments() {
        let a = graph(3, &[(0, 1), (1, 2)], 0.0);
        let b = graph(2, &[(0, 1)], 10.0);
        let batch = batch_graphs(&[a, b]).unwrap();
        assert_eq!(&batch.segment_ids()[..], &[0, 0, 0, 1, 1]);
        assert_eq!(batch.src()[4], 3);
        assert_eq!(batch.dst()[4], 4);
        assert_eq!(batch.graph_count(), 2);
        assert_eq!(batch.node_feat().row(3), &[10.0, 10.5]);
    }

    #[test]
    fn single_graph_is_identity() {
        let a = graph(3, &[(0, 1), (1, 2)], 0.0);
        let batch = batch_graphs(&[&a]).unwrap();
        assert_eq!(batch.node_feat(), a.node_feat());
        assert!(batch.segment_ids().iter().all(|&s| s == 0));
        let pairs: Vec<_> = batch
            .src()
            .iter()
            .copied()
            .zip(batch.dst().iter().copied())
            .collect();
        assert_eq!(pairs, a.edges());
    }

    #[test]
    fn mixed_widths_rejected() {
        let a = graph(2, &[(0, 1)], 0.0);
        let b = Graph::new(Matrix::zeros(2, 3), &[(0, 1)], None).unwrap();
        assert!(matches!(batch_graphs(&[a.clone(), b]), Err(Error::Shape { .. })));
        let c = Graph::new(Matrix::zeros(2, 2), &[(0, 1)], Some(Matrix::zeros(1, 1))).unwrap();
        assert!(batch_graphs(&[a, c]).is_err());
        assert!(batch_graphs::<Graph>(&[]).is_err());
    }
}
