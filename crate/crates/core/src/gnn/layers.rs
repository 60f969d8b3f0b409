//! Message-passing layers over a [`GraphBatch`], expressed with tape
//! primitives so every layer is differentiable end to end.

use std::sync::Arc;

use super::spec::{Aggregator, Scaler};
use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::tensor::{Matrix, SegmentReduce, Tape, Var};

/// `x W (+ b)` with the bias broadcast over rows.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

/// Linear layers with relu between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = l.apply(tape, h)?;
        }
        Ok(h)
    }
}

fn check_rows(tape: &Tape, h: Var, batch: &GraphBatch, op: &'static str) -> Result<()> {
    let shape = tape.shape(h);
    if shape.0 != batch.num_nodes() {
        return Err(Error::Shape {
            op,
            lhs: shape,
            rhs: (batch.num_nodes(), shape.1),
        });
    }
    Ok(())
}

/// Symmetric-normalized propagation with self-loops:
/// `relu(D^-1/2 (A + I) D^-1/2 h W)`.
pub fn gcn_layer_forward(tape: &mut Tape, h: Var, batch: &GraphBatch, weight: Var) -> Result<Var> {
    check_rows(tape, h, batch, "gcn_layer_forward")?;
    let n = batch.num_nodes();
    let deg = batch.in_degree();
    let e = batch.num_edges();
    let mut src = Vec::with_capacity(e + n);
    let mut dst = Vec::with_capacity(e + n);
    src.extend_from_slice(batch.src());
    dst.extend_from_slice(batch.dst());
    src.extend(0..n);
    dst.extend(0..n);
    let coef: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(&s, &t)| 1.0 / (((deg[s] + 1) * (deg[t] + 1)) as f64).sqrt())
        .collect();
    let coef = tape.constant(Matrix::from_vec(coef.len(), 1, coef)?);

    let hw = tape.matmul(h, weight)?;
    let msgs = tape.gather_rows(hw, src.into())?;
    let msgs = tape.mul(msgs, coef)?;
    let agg = tape.segment_reduce(msgs, dst.into(), n, SegmentReduce::Sum)?;
    tape.relu(agg)
}

/// `relu(MLP((1 + eps) h + sum of neighbour rows))`.
pub fn gin_layer_forward(tape: &mut Tape, h: Var, batch: &GraphBatch, mlp: &Mlp, eps: Var) -> Result<Var> {
    check_rows(tape, h, batch, "gin_layer_forward")?;
    let neigh = tape.gather_rows(h, batch.src().clone())?;
    let neigh = tape.segment_reduce(neigh, batch.dst().clone(), batch.num_nodes(), SegmentReduce::Sum)?;
    let one_plus_eps = tape.add_scalar(eps, 1.0)?;
    let own = tape.mul(h, one_plus_eps)?;
    let z = tape.add(own, neigh)?;
    let out = mlp.apply(tape, z)?;
    tape.relu(out)
}

/// Weights of one PNA layer. The first message layer's weight stacks the
/// source-node, target-node and (optionally) edge-feature blocks by row.
#[derive(Debug, Clone)]
pub struct PnaWeights {
    pub message: Mlp,
    pub update: Linear,
}

/// Aggregator and scaler choices plus the degree normalizer δ.
#[derive(Debug, Clone)]
pub struct PnaConfig<'a> {
    pub aggregators: &'a [Aggregator],
    pub scalers: &'a [Scaler],
    pub delta: f64,
}

/// Per-edge messages `MLP([h_src, h_dst, e])`.
pub fn pna_messages(
    tape: &mut Tape,
    h: Var,
    batch: &GraphBatch,
    edge_feat: Option<Var>,
    message: &Mlp,
) -> Result<Var> {
    let hidden = tape.shape(h).1;
    let first = message
        .layers
        .first()
        .ok_or_else(|| Error::contract("PNA message MLP has no layers"))?;
    let w_rows = tape.shape(first.weight).0;
    let expected = 2 * hidden + edge_feat.map_or(0, |e| tape.shape(e).1);
    if w_rows != expected {
        return Err(Error::Shape {
            op: "pna message input",
            lhs: (batch.num_edges(), expected),
            rhs: tape.shape(first.weight),
        });
    }
    // [h_s, h_t, e] W = h_s W_s + h_t W_t + e W_e; projecting per node first
    // avoids materializing the concatenation per edge.
    let w_src = tape.row_slice(first.weight, 0, hidden)?;
    let w_dst = tape.row_slice(first.weight, hidden, 2 * hidden)?;
    let p_src = tape.matmul(h, w_src)?;
    let p_dst = tape.matmul(h, w_dst)?;
    let m_src = tape.gather_rows(p_src, batch.src().clone())?;
    let m_dst = tape.gather_rows(p_dst, batch.dst().clone())?;
    let mut m = tape.add(m_src, m_dst)?;
    if let Some(e) = edge_feat {
        let w_edge = tape.row_slice(first.weight, 2 * hidden, w_rows)?;
        let pe = tape.matmul(e, w_edge)?;
        m = tape.add(m, pe)?;
    }
    if let Some(b) = first.bias {
        m = tape.add(m, b)?;
    }
    let rest = Mlp {
        layers: message.layers[1..].to_vec(),
    };
    if rest.layers.is_empty() {
        return Ok(m);
    }
    let m = tape.relu(m)?;
    rest.apply(tape, m)
}

/// Applies every aggregator to the incoming messages of each node, scales
/// each aggregate by every scaler and concatenates the blocks
/// aggregator-major.
pub fn pna_aggregate(
    tape: &mut Tape,
    messages: Var,
    batch: &GraphBatch,
    config: &PnaConfig<'_>,
) -> Result<Var> {
    let n = batch.num_nodes();
    let deg = batch.in_degree();
    let mut scale_cols = Vec::with_capacity(config.scalers.len());
    for &s in config.scalers {
        scale_cols.push(match s {
            Scaler::Identity => None,
            _ => {
                let col: Vec<f64> = deg.iter().map(|&d| s.factor(d, config.delta)).collect();
                Some(tape.constant(Matrix::from_vec(n, 1, col)?))
            }
        });
    }
    let dst: Arc<[usize]> = batch.dst().clone();
    let mut blocks = Vec::with_capacity(config.aggregators.len() * config.scalers.len());
    for &a in config.aggregators {
        let agg = tape.segment_reduce(messages, dst.clone(), n, a.reduce())?;
        for col in &scale_cols {
            blocks.push(match col {
                None => agg,
                Some(c) => tape.mul(agg, *c)?,
            });
        }
    }
    tape.concat_columns(&blocks)
}

/// `pna_aggregate(messages) U + b` computed without materializing the
/// `|A|·|S|` block concatenation. Scalers act on rows, so the blocks sharing a
/// scaler are multiplied by their slice of `U` first and scaled once.
pub fn pna_update(
    tape: &mut Tape,
    messages: Var,
    batch: &GraphBatch,
    config: &PnaConfig<'_>,
    update: &Linear,
) -> Result<Var> {
    let n = batch.num_nodes();
    let hidden = tape.shape(messages).1;
    let (n_agg, n_scale) = (config.aggregators.len(), config.scalers.len());
    let u_shape = tape.shape(update.weight);
    if u_shape.0 != n_agg * n_scale * hidden || n_agg == 0 || n_scale == 0 {
        return Err(Error::Shape {
            op: "pna update",
            lhs: (n, n_agg * n_scale * hidden),
            rhs: u_shape,
        });
    }
    let dst: Arc<[usize]> = batch.dst().clone();
    let mut aggs = Vec::with_capacity(n_agg);
    for &a in config.aggregators {
        aggs.push(tape.segment_reduce(messages, dst.clone(), n, a.reduce())?);
    }
    let x = tape.concat_columns(&aggs)?;
    let deg = batch.in_degree();
    let mut total: Option<Var> = None;
    for (si, &s) in config.scalers.iter().enumerate() {
        let rows: Vec<usize> = (0..n_agg)
            .flat_map(|ai| {
                let block = ai * n_scale + si;
                block * hidden..(block + 1) * hidden
            })
            .collect();
        let u_s = tape.gather_rows(update.weight, rows.into())?;
        let mut y = tape.matmul(x, u_s)?;
        if s != Scaler::Identity {
            let col: Vec<f64> = deg.iter().map(|&d| s.factor(d, config.delta)).collect();
            let col = tape.constant(Matrix::from_vec(n, 1, col)?);
            y = tape.mul(y, col)?;
        }
        total = Some(match total {
            None => y,
            Some(t) => tape.add(t, y)?,
        });
    }
    let out = total.expect("at least one scaler");
    match update.bias {
        Some(b) => tape.add(out, b),
        None => Ok(out),
    }
}

/// `h + relu(aggregates U + b)`.
pub fn pna_layer_forward(
    tape: &mut Tape,
    h: Var,
    batch: &GraphBatch,
    edge_feat: Option<Var>,
    weights: &PnaWeights,
    config: &PnaConfig<'_>,
) -> Result<Var> {
    check_rows(tape, h, batch, "pna_layer_forward")?;
    let messages = pna_messages(tape, h, batch, edge_feat, &weights.message)?;
    let update = pna_update(tape, messages, batch, config, &weights.update)?;
    let update = tape.relu(update)?;
    tape.add(h, update)
}

/// Per-graph mean of node rows followed by a linear projection.
pub fn readout(tape: &mut Tape, h: Var, batch: &GraphBatch, projection: &Linear) -> Result<Var> {
    check_rows(tape, h, batch, "readout")?;
    let pooled = tape.segment_reduce(
        h,
        batch.segment_ids().clone(),
        batch.graph_count(),
        SegmentReduce::Mean,
    )?;
    projection.apply(tape, pooled)
}
