use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SegmentReduce;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "GCN")]
    Gcn,
    #[serde(rename = "GIN")]
    Gin,
    #[serde(rename = "PNA")]
    Pna,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Gcn => "GCN",
            Architecture::Gin => "GIN",
            Architecture::Pna => "PNA",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Max,
    Mean,
    Sum,
}

impl Aggregator {
    pub fn reduce(self) -> SegmentReduce {
        match self {
            Aggregator::Max => SegmentReduce::Max,
            Aggregator::Mean => SegmentReduce::Mean,
            Aggregator::Sum => SegmentReduce::Sum,
        }
    }
}

/// Degree-dependent multiplier applied to PNA aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaler {
    Identity,
    Amplification,
    Attenuation,
}

/// Floor for the logarithmic degree terms in PNA scalers.
pub const SCALER_FLOOR: f64 = 1e-6;

impl Scaler {
    /// Multiplier for a node of in-degree `degree` under normalizer `delta`.
    pub fn factor(self, degree: usize, delta: f64) -> f64 {
        let log_deg = ((degree + 1) as f64).ln();
        match self {
            Scaler::Identity => 1.0,
            Scaler::Amplification => log_deg / delta.max(SCALER_FLOOR),
            Scaler::Attenuation => delta / log_deg.max(SCALER_FLOOR),
        }
    }
}

fn default_mlp_depth() -> usize {
    2
}

/// Declarative description of one competitor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aggregators: Vec<Aggregator>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scalers: Vec<Scaler>,
    #[serde(default)]
    pub use_edge_features: bool,
    #[serde(default = "default_mlp_depth")]
    pub mlp_depth: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    /// PNA with all three aggregators and all three scalers.
    pub fn pna(layers: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            architecture: Architecture::Pna,
            layers,
            hidden_dim,
            output_dim,
            aggregators: vec![Aggregator::Max, Aggregator::Mean, Aggregator::Sum],
            scalers: vec![Scaler::Identity, Scaler::Amplification, Scaler::Attenuation],
            use_edge_features: false,
            mlp_depth: 2,
            init_seed: 0,
        }
    }

    pub fn gcn(layers: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            architecture: Architecture::Gcn,
            aggregators: vec![],
            scalers: vec![],
            ..Self::pna(layers, hidden_dim, output_dim)
        }
    }

    pub fn gin(layers: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            architecture: Architecture::Gin,
            ..Self::gcn(layers, hidden_dim, output_dim)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    /// Width of the concatenated, scaled PNA aggregates feeding the update.
    pub fn update_input_width(&self) -> usize {
        self.aggregators.len() * self.scalers.len() * self.hidden_dim
    }

    /// Checks every field and reports all offending ones at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layers == 0 {
            problems.push("layers must be >= 1".to_string());
        }
        if self.hidden_dim == 0 {
            problems.push("hidden_dim must be >= 1".to_string());
        }
        if self.output_dim == 0 {
            problems.push("output_dim must be >= 1".to_string());
        }
        if self.mlp_depth == 0 {
            problems.push("mlp_depth must be >= 1".to_string());
        }
        match self.architecture {
            Architecture::Pna => {
                if self.aggregators.is_empty() {
                    problems.push("aggregators: PNA needs at least one".to_string());
                }
                if self.scalers.is_empty() {
                    problems.push("scalers: PNA needs at least one".to_string());
                }
                if has_duplicates(&self.aggregators) {
                    problems.push("aggregators: duplicate entries".to_string());
                }
                if has_duplicates(&self.scalers) {
                    problems.push("scalers: duplicate entries".to_string());
                }
            }
            arch @ (Architecture::Gcn | Architecture::Gin) => {
                if !self.aggregators.is_empty() {
                    problems.push(format!("aggregators: not used by {arch}"));
                }
                if !self.scalers.is_empty() {
                    problems.push(format!("scalers: not used by {arch}"));
                }
                if self.use_edge_features {
                    problems.push(format!(
                        "use_edge_features: only PNA consumes edge features, not {arch}"
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "invalid model spec: {}",
                problems.join("; ")
            )))
        }
    }

    /// Short human-readable label such as `PNA-4L-32h`.
    pub fn label(&self) -> String {
        let mut s = format!("{}-{}L-{}h", self.architecture, self.layers, self.hidden_dim);
        if self.architecture == Architecture::Pna && self.aggregators.len() < 3 {
            let aggs: Vec<_> = self
                .aggregators
                .iter()
                .map(|a| format!("{a:?}").to_lowercase())
                .collect();
            s.push_str(&format!("-[{}]", aggs.join(",")));
        }
        if self.use_edge_features {
            s.push_str("-ef");
        }
        s
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcn_with_aggregators_rejected() {
        let mut spec = ModelSpec::gcn(2, 8, 4);
        spec.aggregators = vec![Aggregator::Sum];
        spec.scalers = vec![Scaler::Identity];
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("aggregators") && msg.contains("scalers"), "{msg}");
    }

    #[test]
    fn pna_needs_aggregators_and_scalers() {
        let mut spec = ModelSpec::pna(2, 8, 4);
        spec.aggregators.clear();
        spec.layers = 0;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("aggregators") && msg.contains("layers"), "{msg}");
        assert!(ModelSpec::pna(2, 8, 4).validate().is_ok());
    }

    #[test]
    fn update_width_is_aggregator_scaler_product() {
        assert_eq!(ModelSpec::pna(4, 64, 64).update_input_width(), 9 * 64);
    }

    #[test]
    fn json_shape() {
        let spec = ModelSpec::pna(4, 32, 64);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains(r#""architecture":"PNA""#), "{json}");
        assert!(json.contains(r#""aggregators":["max","mean","sum"]"#), "{json}");
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);

        let minimal: ModelSpec =
            serde_json::from_str(r#"{"architecture":"GIN","layers":2,"hidden_dim":8,"output_dim":4}"#)
                .unwrap();
        assert_eq!(minimal.mlp_depth, 2);
        assert!(serde_json::from_str::<ModelSpec>(
            r#"{"architecture":"GIN","layers":2,"hidden_dim":8,"output_dim":4,"dropout":0.1}"#
        )
        .is_err());
    }

    #[test]
    fn scaler_factors() {
        let delta = 2f64.ln();
        assert!((Scaler::Amplification.factor(1, delta) - 1.0).abs() < 1e-15);
        assert!((Scaler::Attenuation.factor(1, delta) - 1.0).abs() < 1e-15);
        assert_eq!(Scaler::Identity.factor(7, delta), 1.0);
        assert!(Scaler::Attenuation.factor(0, delta).is_finite());
    }
}
