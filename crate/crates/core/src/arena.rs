//! Paired adversarial-collaboration training: two models share one batch
//! stream and are updated simultaneously under their own composite loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{build_model, Model, ModelSpec};
use crate::graph::{batch_graphs, degree_statistics, DatasetSplit, Graph, GraphBatch};
use crate::losses::{graphac_losses, LossConfig};
use crate::tensor::{column_means, AdamConfig, AdamState, Matrix, Tape};

/// Hyper-parameters of one match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    /// One full training run per seed; the reported difference is the
    /// mean and sample std over these runs.
    pub seeds: Vec<u64>,
    /// Number of final epochs averaged into a run's loss difference.
    pub eval_window: usize,
    /// Treat the opponent's embedding as a constant in each model's loss.
    pub detach_opponent: bool,
    pub validation_fraction: f64,
    /// Seed of the train/validation partition, shared by every run.
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            learning_rate: 5e-5,
            loss: LossConfig::default(),
            seeds: vec![0, 1, 2],
            eval_window: 5,
            detach_opponent: true,
            validation_fraction: 0.2,
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single workstation.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".to_string());
        }
        if self.batch_size < 2 {
            bad.push(format!("batch_size must be >= 2 (got {})", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if self.seeds.is_empty() {
            bad.push("seeds must list at least one seed".to_string());
        }
        if self.eval_window == 0 || self.eval_window > self.epochs {
            bad.push(format!(
                "eval_window must be in 1..=epochs (got {} with {} epochs)",
                self.eval_window, self.epochs
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bad.push(format!(
                "validation_fraction must be in (0, 1) (got {})",
                self.validation_fraction
            ));
        }
        if let Err(e) = self.loss.validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "invalid train config: {}",
                bad.join("; ")
            )))
        }
    }
}

/// Validation-split measurements after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    /// `loss_a - loss_b`; negative means model A won.
    pub diff: f64,
    pub inv_term: f64,
    pub upper_tri: f64,
    pub lower_tri: f64,
    pub cov_term: f64,
}

/// One training run of a match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub trajectory: Vec<EpochRecord>,
    /// Mean `diff` over the final eval window.
    pub final_diff: f64,
    /// Explained-variance fractions of each model's final validation
    /// embeddings.
    pub pca_a: Vec<f64>,
    pub pca_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub spec_a: ModelSpec,
    pub spec_b: ModelSpec,
    pub runs: Vec<SeedRun>,
    /// Mean of the per-run final differences.
    pub diff_mean: f64,
    /// Sample std of the per-run final differences (0 for a single run).
    pub diff_std: f64,
}

impl MatchResult {
    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }

    /// Largest top-component fraction over both models and all runs.
    pub fn max_top_pca_fraction(&self) -> f64 {
        self.runs
            .iter()
            .flat_map(|r| [r.pca_a.first(), r.pca_b.first()])
            .flatten()
            .fold(0.0, |m, &v| m.max(v))
    }

    /// Trajectory of one run as CSV.
    pub fn trajectory_csv(run: &SeedRun) -> String {
        let mut s = String::from("epoch,loss_a,loss_b,diff,inv_term,upper_tri,lower_tri,cov_term\n");
        for r in &run.trajectory {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.loss_a, r.loss_b, r.diff, r.inv_term, r.upper_tri, r.lower_tri, r.cov_term
            ));
        }
        s
    }
}

/// Sample mean and unbiased std; std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

// SplitMix64 finalizer; decorrelates init seeds derived from small integers.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A dataset prepared for matches: the split, the validation batch and the
/// degree normalizer, all computed once and shared by every match.
#[derive(Debug, Clone)]
pub struct PreparedData<'a> {
    graphs: &'a [Graph],
    split: DatasetSplit,
    validation: GraphBatch,
    delta: f64,
    node_dim: usize,
    edge_dim: Option<usize>,
}

impl<'a> PreparedData<'a> {
    pub fn new(graphs: &'a [Graph], config: &TrainConfig) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::contract("dataset is empty"))?;
        let node_dim = first.node_dim();
        let edge_dim = first.edge_dim();
        if let Some((i, _)) = graphs
            .iter()
            .enumerate()
            .find(|(_, g)| g.node_dim() != node_dim || g.edge_dim() != edge_dim)
        {
            return Err(Error::validation(format!(
                "graph {i} has feature widths differing from graph 0"
            )));
        }
        let split = DatasetSplit::new(graphs.len(), config.validation_fraction, config.split_seed)?;
        if split.validation.len() < 2 {
            return Err(Error::contract("validation split needs at least 2 graphs"));
        }
        if split.train.len() < 2 {
            return Err(Error::contract("training split needs at least 2 graphs"));
        }
        let train: Vec<&Graph> = split.train.iter().map(|&i| &graphs[i]).collect();
        let delta = degree_statistics(&train)?;
        let validation = batch_graphs(&split.validation.iter().map(|&i| &graphs[i]).collect::<Vec<_>>())?;
        Ok(Self {
            graphs,
            split,
            validation,
            delta,
            node_dim,
            edge_dim,
        })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

struct Measured {
    record: EpochRecord,
    emb_a: Matrix,
    emb_b: Matrix,
}

fn evaluate(a: &Model, b: &Model, batch: &GraphBatch, loss: &LossConfig, epoch: usize) -> Result<Measured> {
    let emb_a = a.embed(batch)?;
    let emb_b = b.embed(batch)?;
    let mut tape = Tape::new();
    let ha = tape.constant(emb_a.clone());
    let hb = tape.constant(emb_b.clone());
    let l = graphac_losses(&mut tape, ha, hb, loss)?;
    let v = |x| tape.value(x).data()[0];
    let (loss_a, loss_b) = (v(l.loss_a), v(l.loss_b));
    if !(loss_a.is_finite() && loss_b.is_finite()) {
        return Err(Error::NonFinite {
            what: "validation loss",
        });
    }
    Ok(Measured {
        record: EpochRecord {
            epoch,
            loss_a,
            loss_b,
            diff: loss_a - loss_b,
            inv_term: v(l.invariance),
            upper_tri: v(l.upper),
            lower_tri: v(l.lower),
            cov_term: v(l.covariance),
        },
        emb_a,
        emb_b,
    })
}

/// One optimisation step of both models on a shared batch.
fn train_step(
    a: &mut Model,
    b: &mut Model,
    opt_a: &mut AdamState,
    opt_b: &mut AdamState,
    batch: &GraphBatch,
    config: &TrainConfig,
) -> Result<()> {
    let mut tape = Tape::new();
    let va = a.bind(&mut tape);
    let vb = b.bind(&mut tape);
    let ha = a.forward(&mut tape, &va, batch)?;
    let hb = b.forward(&mut tape, &vb, batch)?;
    let (loss_a, loss_b) = if config.detach_opponent {
        let hb_const = tape.detach(hb);
        let ha_const = tape.detach(ha);
        let la = graphac_losses(&mut tape, ha, hb_const, &config.loss)?.loss_a;
        let lb = graphac_losses(&mut tape, ha_const, hb, &config.loss)?.loss_b;
        (la, lb)
    } else {
        let l = graphac_losses(&mut tape, ha, hb, &config.loss)?;
        (l.loss_a, l.loss_b)
    };
    tape.backward(loss_a)?;
    tape.backward(loss_b)?;
    a.zero_gradients();
    b.zero_gradients();
    a.collect_gradients(&tape, &va);
    b.collect_gradients(&tape, &vb);
    opt_a.step(a.parameters_mut())?;
    opt_b.step(b.parameters_mut())
}

fn run_seed(
    spec_a: &ModelSpec,
    spec_b: &ModelSpec,
    data: &PreparedData<'_>,
    config: &TrainConfig,
    seed: u64,
) -> Result<SeedRun> {
    let build = |spec: &ModelSpec| {
        let spec = spec.clone().with_seed(mix(spec.init_seed, seed));
        build_model(&spec, data.delta, data.node_dim, data.edge_dim)
    };
    let mut a = build(spec_a)?;
    let mut b = build(spec_b)?;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut opt_a = AdamState::new(adam, a.parameters());
    let mut opt_b = AdamState::new(adam, b.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed));
    let mut order = data.split.train.clone();
    let batch_size = config.batch_size.min(order.len());

    let mut trajectory = Vec::with_capacity(config.epochs);
    let mut last = None;
    for epoch in 1..=config.epochs {
        let collapse = |e: Error| match e {
            e @ (Error::DegenerateScale { .. } | Error::NonFinite { .. }) => Error::Collapse {
                epoch,
                source: Box::new(e),
            },
            other => other,
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(batch_size) {
            let members: Vec<&Graph> = chunk.iter().map(|&i| &data.graphs[i]).collect();
            let batch = batch_graphs(&members)?;
            train_step(&mut a, &mut b, &mut opt_a, &mut opt_b, &batch, config).map_err(collapse)?;
        }
        let m = evaluate(&a, &b, &data.validation, &config.loss, epoch).map_err(collapse)?;
        log::debug!(
            "{} vs {} seed {seed} epoch {epoch}: diff {:.6}",
            spec_a.label(),
            spec_b.label(),
            m.record.diff
        );
        trajectory.push(m.record);
        last = Some((m.emb_a, m.emb_b));
    }
    let (emb_a, emb_b) = last.expect("epochs >= 1");
    let window = &trajectory[trajectory.len() - config.eval_window..];
    let final_diff = window.iter().map(|r| r.diff).sum::<f64>() / window.len() as f64;
    Ok(SeedRun {
        seed,
        trajectory,
        final_diff,
        pca_a: pca_explained_variance(&emb_a)?,
        pca_b: pca_explained_variance(&emb_b)?,
    })
}

/// Trains `spec_a` against `spec_b` once per configured seed.
pub fn train_pair(
    spec_a: &ModelSpec,
    spec_b: &ModelSpec,
    dataset: &[Graph],
    config: &TrainConfig,
) -> Result<MatchResult> {
    config.validate()?;
    let data = PreparedData::new(dataset, config)?;
    train_pair_prepared(spec_a, spec_b, &data, config)
}

/// [`train_pair`] on a dataset that was already split and batched.
pub fn train_pair_prepared(
    spec_a: &ModelSpec,
    spec_b: &ModelSpec,
    data: &PreparedData<'_>,
    config: &TrainConfig,
) -> Result<MatchResult> {
    config.validate()?;
    spec_a.validate()?;
    spec_b.validate()?;
    if spec_a.output_dim != spec_b.output_dim {
        return Err(Error::validation(format!(
            "competitors must share the embedding width: {} vs {}",
            spec_a.output_dim, spec_b.output_dim
        )));
    }
    let runs = config
        .seeds
        .iter()
        .map(|&s| run_seed(spec_a, spec_b, data, config, s))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = runs.iter().map(|r| r.final_diff).collect();
    let (diff_mean, diff_std) = mean_std(&finals);
    Ok(MatchResult {
        spec_a: spec_a.clone(),
        spec_b: spec_b.clone(),
        runs,
        diff_mean,
        diff_std,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, in
/// descending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::Shape {
            op: "symmetric_eigenvalues",
            lhs: m.shape(),
            rhs: (n, n),
        });
    }
    let mut a = m.clone();
    let scale = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// Descending fractions of variance explained by each principal component
/// of `embeddings` (rows are samples). A fully constant input counts as
/// complete collapse onto one component.
pub fn pca_explained_variance(embeddings: &Matrix) -> Result<Vec<f64>> {
    let (n, d) = embeddings.shape();
    if d == 0 {
        return Err(Error::contract("PCA needs at least one column"));
    }
    if n < 2 {
        return Err(Error::contract("PCA needs at least two rows"));
    }
    let mean = column_means(embeddings);
    let centered = Matrix::from_fn(n, d, |r, c| embeddings.get(r, c) - mean.get(0, c));
    let cov = centered.transpose().matmul(&centered)?;
    let cov = cov.map(|v| v / (n - 1) as f64);
    let eig: Vec<f64> = symmetric_eigenvalues(&cov)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let total: f64 = eig.iter().sum();
    if total <= 0.0 {
        let mut out = vec![0.0; d];
        out[0] = 1.0;
        return Ok(out);
    }
    Ok(eig.into_iter().map(|v| v / total).collect())
}
