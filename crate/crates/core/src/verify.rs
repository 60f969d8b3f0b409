//! Self-check suites: gradients against finite differences, loss
//! identities, permutation invariance and collapse diagnostics.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arena::{train_pair, TrainConfig};
use crate::error::{Error, Result};
use crate::gnn::{build_model, ModelSpec};
use crate::graph::{batch_graphs, generate_synthetic_dataset, Graph, SyntheticConfig};
use crate::losses::{
    barlow_twins_loss, competitive_bt_losses, covariance_term, cross_correlation, graphac_losses,
    variance_term, vicreg_invariance, LossConfig,
};
use crate::tensor::{finite_diff_check, Matrix, Tape, Var, DEFAULT_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    LossIdentities,
    Permutation,
    Collapse,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Gradcheck,
        Suite::LossIdentities,
        Suite::Permutation,
        Suite::Collapse,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Gradcheck => "gradcheck",
            Suite::LossIdentities => "loss-identities",
            Suite::Permutation => "permutation",
            Suite::Collapse => "collapse",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .ok_or_else(|| Error::validation(format!("unknown suite {s:?}")))
    }
}

/// One property: worst residual over all instances against its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub instances: usize,
    pub residual: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.residual.is_finite() && self.residual < self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<16} {:<34} residual {:.3e} (< {:.0e}, {} instances)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.residual,
            self.tolerance,
            self.instances
        )
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Small random graph with density 0.4 and optional edge features.
pub fn random_graph(rng: &mut impl Rng, n: usize, node_dim: usize, edge_dim: Option<usize>) -> Result<Graph> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(0.4) {
                edges.push((u, v));
            }
        }
    }
    let ef = edge_dim.map(|w| random_matrix(rng, edges.len(), w, 1.0));
    Graph::new(random_matrix(rng, n, node_dim, 1.0), &edges, ef)
}

type LossBuilder = fn(&mut Tape, Var, Var, &LossConfig) -> Result<Var>;

fn loss_builders() -> Vec<(&'static str, LossBuilder)> {
    vec![
        ("barlow-twins", |t, x, y, c| {
            let cc = cross_correlation(t, x, y)?;
            barlow_twins_loss(t, cc, c.lambda)
        }),
        ("competitive-bt-a", |t, x, y, c| {
            let cc = cross_correlation(t, x, y)?;
            Ok(competitive_bt_losses(t, cc, c.lambda, c.mu)?.loss_a)
        }),
        ("competitive-bt-b", |t, x, y, c| {
            let cc = cross_correlation(t, x, y)?;
            Ok(competitive_bt_losses(t, cc, c.lambda, c.mu)?.loss_b)
        }),
        ("covariance", |t, x, _, _| covariance_term(t, x)),
        ("variance", |t, x, _, _| {
            // shrink so the hinge is active for some columns
            let small = t.scale(x, 0.2)?;
            variance_term(t, small)
        }),
        ("vicreg-invariance", |t, x, y, _| vicreg_invariance(t, x, y)),
        ("composite-a", |t, x, y, c| Ok(graphac_losses(t, x, y, c)?.loss_a)),
        ("composite-b", |t, x, y, c| Ok(graphac_losses(t, x, y, c)?.loss_b)),
    ]
}

fn layer_specs() -> Vec<(&'static str, ModelSpec, Option<usize>)> {
    let mut pna_edge = ModelSpec::pna(2, 5, 4);
    pna_edge.use_edge_features = true;
    vec![
        ("gcn", ModelSpec::gcn(2, 5, 4), None),
        ("gin", ModelSpec::gin(2, 5, 4), None),
        ("pna", ModelSpec::pna(2, 5, 4), None),
        ("pna-edge-features", pna_edge, Some(2)),
    ]
}

/// Finite-difference checks of every loss and every layer type, each over
/// `instances` random inputs.
pub fn gradcheck(instances: usize) -> Result<Vec<Check>> {
    let cfg = LossConfig {
        vicreg_invariance: Some(0.5),
        vicreg_variance: Some(0.7),
        lambda: 0.3,
        ..LossConfig::default()
    };
    let mut checks = Vec::new();
    for (name, build) in loss_builders() {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let (n, d) = (rng.gen_range(4..9), rng.gen_range(2..5));
            let x0 = random_matrix(&mut rng, n, d, 2.0);
            let other = random_matrix(&mut rng, n, d, 2.0);
            let err = finite_diff_check(
                |t, x| {
                    let y = t.constant(other.clone());
                    build(t, x, y, &cfg)
                },
                &x0,
                DEFAULT_STEP,
            )?;
            worst = worst.max(err);
        }
        checks.push(Check {
            suite: Suite::Gradcheck,
            name: format!("loss {name}"),
            instances,
            residual: worst,
            tolerance: 1e-4,
        });
    }
    for (name, spec, edge_dim) in layer_specs() {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + k as u64);
            let graphs = (0..2)
                .map(|_| {
                    let n = rng.gen_range(3..7);
                    random_graph(&mut rng, n, 3, edge_dim)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = batch_graphs(&graphs)?;
            let mut model = build_model(&spec.clone().with_seed(k as u64), 0.9, 3, edge_dim)?;
            // zero biases leave isolated nodes on a relu kink
            for p in model.parameters_mut() {
                if p.name.ends_with("bias") {
                    p.value = random_matrix(&mut rng, p.value.rows(), p.value.cols(), 1.0);
                }
            }
            for (idx, p) in model.parameters().iter().enumerate() {
                let err = finite_diff_check(
                    |t, x| {
                        let mut vars = model.bind(t);
                        vars[idx] = x;
                        let out = model.forward(t, &vars, &batch)?;
                        t.sum_of_squares(out)
                    },
                    &p.value,
                    DEFAULT_STEP,
                )?;
                worst = worst.max(err);
            }
        }
        checks.push(Check {
            suite: Suite::Gradcheck,
            name: format!("layer {name}"),
            instances,
            residual: worst,
            tolerance: 1e-4,
        });
    }
    Ok(checks)
}

fn scalar(t: &Tape, v: Var) -> Result<f64> {
    t.value(v).item()
}

/// Swap anti-symmetry, the mu = 1 cancellation, the mu = -1 reduction to
/// Barlow Twins, and boundedness of the correlation matrix.
pub fn loss_identities(instances: usize) -> Result<Vec<Check>> {
    let cfg = LossConfig::default();
    let (mut swap, mut cancel, mut bt, mut bound) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + k as u64);
        let (n, d) = (rng.gen_range(3..16), rng.gen_range(1..7));
        let mut t = Tape::new();
        let a = t.constant(random_matrix(&mut rng, n, d, 3.0));
        let b = t.constant(random_matrix(&mut rng, n, d, 3.0));
        let ab = graphac_losses(&mut t, a, b, &cfg)?;
        let ba = graphac_losses(&mut t, b, a, &cfg)?;
        swap = swap
            .max((scalar(&t, ab.loss_a)? - scalar(&t, ba.loss_b)?).abs())
            .max((scalar(&t, ab.loss_b)? - scalar(&t, ba.loss_a)?).abs());
        bound = bound.max((t.value(ab.correlation).max_abs() - 1.0).max(0.0));

        let lambda = rng.gen_range(1e-4..1.0);
        let c = t.constant(random_matrix(&mut rng, d, d, 1.0));
        let plus = competitive_bt_losses(&mut t, c, lambda, 1.0)?;
        let sum = scalar(&t, plus.loss_a)? + scalar(&t, plus.loss_b)?;
        cancel = cancel.max((sum - 2.0 * scalar(&t, plus.invariance)?).abs());
        let minus = competitive_bt_losses(&mut t, c, lambda, -1.0)?;
        let reference = barlow_twins_loss(&mut t, c, lambda)?;
        let r = scalar(&t, reference)?;
        bt = bt
            .max((scalar(&t, minus.loss_a)? - r).abs())
            .max((scalar(&t, minus.loss_b)? - r).abs());
    }
    let check = |name: &str, residual, tolerance| Check {
        suite: Suite::LossIdentities,
        name: name.to_string(),
        instances,
        residual,
        tolerance,
    };
    Ok(vec![
        check("swap anti-symmetry", swap, 1e-12),
        check("mu=1 cancellation", cancel, 1e-10),
        check("mu=-1 equals barlow twins", bt, 1e-12),
        check("correlation bounded by 1", bound, 1e-12),
    ])
}

/// Graph embeddings are unchanged by relabelling nodes, for every
/// architecture.
pub fn permutation(instances: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, spec, edge_dim) in layer_specs() {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + k as u64);
            let n = rng.gen_range(2..9);
            let g = random_graph(&mut rng, n, 3, edge_dim)?;
            let model = build_model(&spec.clone().with_seed(k as u64), 0.9, 3, edge_dim)?;
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let pg = g.permute_nodes(&perm)?;
            let e1 = model.embed(&batch_graphs(&[&g])?)?;
            let e2 = model.embed(&batch_graphs(&[&pg])?)?;
            worst = worst.max(e1.max_abs_diff(&e2));
        }
        checks.push(Check {
            suite: Suite::Permutation,
            name: format!("embedding {name}"),
            instances,
            residual: worst,
            tolerance: 1e-9,
        });
    }
    Ok(checks)
}

/// A short match on a small synthetic set must keep both models' validation
/// embeddings spread over more than one principal direction.
pub fn collapse() -> Result<Vec<Check>> {
    let data = generate_synthetic_dataset(&SyntheticConfig {
        count: 160,
        ..SyntheticConfig::default()
    })?;
    let config = TrainConfig {
        epochs: 3,
        batch_size: 32,
        learning_rate: 1e-3,
        seeds: vec![0],
        eval_window: 1,
        ..TrainConfig::desk()
    };
    let spec = ModelSpec::gin(2, 16, 16);
    let result = train_pair(&spec, &spec.clone().with_seed(1), &data, &config)?;
    Ok(vec![Check {
        suite: Suite::Collapse,
        name: "top pca fraction after training".into(),
        instances: 1,
        residual: result.max_top_pca_fraction(),
        tolerance: 0.9,
    }])
}

pub fn run_suite(suite: Suite, instances: usize) -> Result<Vec<Check>> {
    match suite {
        Suite::Gradcheck => gradcheck(instances),
        Suite::LossIdentities => loss_identities(instances),
        Suite::Permutation => permutation(instances),
        Suite::Collapse => collapse(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn quick_suites_pass() {
        for suite in Suite::ALL {
            for c in run_suite(suite, 2).unwrap() {
                assert!(c.passed(), "{c}");
            }
        }
    }
}
