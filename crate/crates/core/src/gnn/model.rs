use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    gcn_layer_forward, gin_layer_forward, pna_layer_forward, readout, Linear, Mlp, PnaConfig, PnaWeights,
};
use super::spec::{Architecture, ModelSpec};
use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::tensor::{Matrix, Parameter, Tape, Var};

#[derive(Debug, Clone, Copy)]
struct LinearSlot {
    weight: usize,
    bias: Option<usize>,
}

impl LinearSlot {
    fn bind(&self, vars: &[Var]) -> Linear {
        Linear {
            weight: vars[self.weight],
            bias: self.bias.map(|b| vars[b]),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerSlots {
    Gcn {
        weight: usize,
    },
    Gin {
        eps: usize,
        mlp: Vec<LinearSlot>,
    },
    Pna {
        message: Vec<LinearSlot>,
        update: LinearSlot,
    },
}

/// A competitor network with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    delta: f64,
    node_dim: usize,
    edge_dim: Option<usize>,
    params: Vec<Parameter>,
    encoder: LinearSlot,
    layers: Vec<LayerSlots>,
    projection: LinearSlot,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
}

impl Builder {
    fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..limit));
        self.params.push(Parameter::new(name, w));
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.params.push(Parameter::new(name, Matrix::zeros(rows, cols)));
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> LinearSlot {
        let weight = self.glorot(format!("{prefix}.weight"), fan_in, fan_out);
        let bias = bias.then(|| self.zeros(format!("{prefix}.bias"), 1, fan_out));
        LinearSlot { weight, bias }
    }

    fn mlp(&mut self, prefix: &str, fan_in: usize, width: usize, depth: usize) -> Vec<LinearSlot> {
        (0..depth)
            .map(|j| {
                let input = if j == 0 { fan_in } else { width };
                self.linear(&format!("{prefix}.{j}"), input, width, true)
            })
            .collect()
    }
}

/// Builds a model for inputs with `node_dim` node features and, when the spec
/// uses them, `edge_dim` edge features. `delta` is the PNA degree normalizer.
pub fn build_model(spec: &ModelSpec, delta: f64, node_dim: usize, edge_dim: Option<usize>) -> Result<Model> {
    spec.validate()?;
    if spec.use_edge_features && edge_dim.is_none() {
        return Err(Error::validation(
            "use_edge_features is set but the dataset has no edge features",
        ));
    }
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::contract(format!(
            "degree normalizer must be finite and >= 0, got {delta}"
        )));
    }
    let edge_dim = if spec.use_edge_features { edge_dim } else { None };
    let h = spec.hidden_dim;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.init_seed),
        params: Vec::new(),
    };
    let encoder = b.linear("encoder", node_dim, h, true);
    let layers = (0..spec.layers)
        .map(|i| match spec.architecture {
            Architecture::Gcn => LayerSlots::Gcn {
                weight: b.glorot(format!("layers.{i}.weight"), h, h),
            },
            Architecture::Gin => LayerSlots::Gin {
                eps: b.zeros(format!("layers.{i}.eps"), 1, 1),
                mlp: b.mlp(&format!("layers.{i}.mlp"), h, h, spec.mlp_depth),
            },
            Architecture::Pna => LayerSlots::Pna {
                message: b.mlp(
                    &format!("layers.{i}.message"),
                    2 * h + edge_dim.unwrap_or(0),
                    h,
                    spec.mlp_depth,
                ),
                update: b.linear(&format!("layers.{i}.update"), spec.update_input_width(), h, true),
            },
        })
        .collect();
    let projection = b.linear("readout", h, spec.output_dim, true);
    Ok(Model {
        spec: spec.clone(),
        delta,
        node_dim,
        edge_dim,
        params: b.params,
        encoder,
        layers,
        projection,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape`; pass the result to
    /// [`forward`](Self::forward) and [`collect_gradients`](Self::collect_gradients).
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| p.bind(tape)).collect()
    }

    /// Graph embeddings, `graph_count x output_dim`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &GraphBatch) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "model has {} parameters, {} bound",
                self.params.len(),
                vars.len()
            )));
        }
        if batch.node_feat().cols() != self.node_dim {
            return Err(Error::Shape {
                op: "model input",
                lhs: batch.node_feat().shape(),
                rhs: (batch.num_nodes(), self.node_dim),
            });
        }
        let edge_feat = match self.edge_dim {
            None => None,
            Some(w) => {
                let ef = batch
                    .edge_feat()
                    .ok_or_else(|| Error::contract("model uses edge features but the batch has none"))?;
                if ef.cols() != w {
                    return Err(Error::Shape {
                        op: "model edge input",
                        lhs: ef.shape(),
                        rhs: (batch.num_edges(), w),
                    });
                }
                Some(tape.constant(ef.clone()))
            }
        };

        let x = tape.constant(batch.node_feat().clone());
        let mut h = self.encoder.bind(vars).apply(tape, x)?;
        let pna = PnaConfig {
            aggregators: &self.spec.aggregators,
            scalers: &self.spec.scalers,
            delta: self.delta,
        };
        for layer in &self.layers {
            h = match layer {
                LayerSlots::Gcn { weight } => gcn_layer_forward(tape, h, batch, vars[*weight])?,
                LayerSlots::Gin { eps, mlp } => {
                    let mlp = Mlp {
                        layers: mlp.iter().map(|s| s.bind(vars)).collect(),
                    };
                    gin_layer_forward(tape, h, batch, &mlp, vars[*eps])?
                }
                LayerSlots::Pna { message, update } => {
                    let weights = PnaWeights {
                        message: Mlp {
                            layers: message.iter().map(|s| s.bind(vars)).collect(),
                        },
                        update: update.bind(vars),
                    };
                    pna_layer_forward(tape, h, batch, edge_feat, &weights, &pna)?
                }
            };
        }
        readout(tape, h, batch, &self.projection.bind(vars))
    }

    /// Forward pass on a private tape, returning the embedding matrix.
    pub fn embed(&self, batch: &GraphBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Adds the tape gradients of the bound parameters into each
    /// parameter's gradient slot.
    pub fn collect_gradients(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            p.collect(tape, *v);
        }
    }

    pub fn zero_gradients(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}
