use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One line of a graph file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    num_nodes: usize,
    node_feat: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_feat: Option<Vec<Vec<f64>>>,
}

impl GraphRecord {
    fn into_graph(self) -> Result<Graph> {
        if self.node_feat.len() != self.num_nodes {
            return Err(Error::validation(format!(
                "num_nodes is {} but node_feat has {} rows",
                self.num_nodes,
                self.node_feat.len()
            )));
        }
        let node_feat = Matrix::from_rows(&self.node_feat).map_err(|e| Error::validation(e.to_string()))?;
        let edge_feat = match self.edge_feat {
            Some(rows) => {
                if rows.is_empty() && !self.edges.is_empty() {
                    return Err(Error::validation("edge_feat is empty but edges are present"));
                }
                Some(Matrix::from_rows(&rows).map_err(|e| Error::validation(e.to_string()))?)
            }
            None => None,
        };
        let pairs: Vec<_> = self.edges.iter().map(|&[u, v]| (u, v)).collect();
        Graph::new(node_feat, &pairs, edge_feat)
    }

    fn from_graph(g: &Graph) -> Self {
        Self {
            num_nodes: g.num_nodes(),
            node_feat: g.node_feat().to_rows(),
            edges: g.undirected_edges().map(|(u, v)| [u, v]).collect(),
            edge_feat: g
                .edge_feat()
                .map(|f| (0..f.rows()).step_by(2).map(|r| f.row(r).to_vec()).collect()),
        }
    }
}

/// Parses JSON-lines graph records from a reader. Blank lines are skipped.
pub fn parse_graph_lines(reader: impl BufRead) -> Result<Vec<Graph>> {
    let mut graphs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let graph = record.into_graph().map_err(|e| match e {
            Error::Validation { message, .. } => Error::Validation {
                line: Some(line_no),
                message,
            },
            other => Error::Validation {
                line: Some(line_no),
                message: other.to_string(),
            },
        })?;
        graphs.push(graph);
    }
    Ok(graphs)
}

pub fn parse_graph_file(path: impl AsRef<Path>) -> Result<Vec<Graph>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_graph_lines(BufReader::new(file))
}

/// Renders graphs as JSON lines, one record per graph, undirected pairs once.
pub fn serialize_graphs(graphs: &[Graph]) -> String {
    let mut out = String::new();
    for g in graphs {
        let line = serde_json::to_string(&GraphRecord::from_graph(g)).expect("record serializes");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_graph_file(path: impl AsRef<Path>, graphs: &[Graph]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(serialize_graphs(graphs).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<Graph>> {
        parse_graph_lines(s.as_bytes())
    }

    #[test]
    fn minimal_record() {
        let gs = parse(r#"{"num_nodes":2, "node_feat":[[1,0],[0,1]], "edges":[[0,1]]}"#).unwrap();
        assert_eq!(gs.len(), 1);
        assert_eq!(gs[0].num_nodes(), 2);
        assert_eq!(gs[0].edges().len(), 2);
    }

    #[test]
    fn empty_input_is_empty_list() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn out_of_range_edge_reports_line() {
        let text = concat!(
            r#"{"num_nodes":1, "node_feat":[[1]], "edges":[]}"#,
            "\n",
            r#"{"num_nodes":2, "node_feat":[[1,0],[0,1]], "edges":[[0,5]]}"#
        );
        match parse(text) {
            Err(Error::Validation { line: Some(2), .. }) => {}
            other => panic!("expected validation error on line 2, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_unknown_keys_rejected() {
        assert!(matches!(parse("{not json"), Err(Error::Parse { line: 1, .. })));
        let unknown = r#"{"num_nodes":1, "node_feat":[[1]], "edges":[], "label":3}"#;
        assert!(matches!(parse(unknown), Err(Error::Parse { line: 1, .. })));
        let mismatch = r#"{"num_nodes":3, "node_feat":[[1]], "edges":[]}"#;
        assert!(matches!(
            parse(mismatch),
            Err(Error::Validation { line: Some(1), .. })
        ));
    }

    #[test]
    fn edge_features_round_trip() {
        let text = r#"{"num_nodes":3,"node_feat":[[1.0],[2.0],[3.5]],"edges":[[0,1],[2,1]],"edge_feat":[[1.0,0.0],[0.0,1.0]]}"#;
        let gs = parse(text).unwrap();
        assert_eq!(gs[0].edge_feat().unwrap().rows(), 4);
        assert_eq!(serialize_graphs(&gs).trim_end(), text);
    }
}
