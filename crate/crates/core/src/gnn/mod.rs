//! Competitor GNNs: GCN, GIN and PNA layers with mean-pool readout.

mod layers;
mod model;
mod spec;

pub use layers::{
    gcn_layer_forward, gin_layer_forward, pna_aggregate, pna_layer_forward, pna_messages, pna_update,
    readout, Linear, Mlp, PnaConfig, PnaWeights,
};
pub use model::{build_model, Model};
pub use spec::{Aggregator, Architecture, ModelSpec, Scaler, SCALER_FLOOR};
