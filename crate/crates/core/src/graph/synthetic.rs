//! Seeded generator of small molecule-like graphs.
//!
//! Graphs grow from a single atom by attaching chain atoms, rings (fused on a
//! bond or grown from an atom) and small branched groups. `motif_complexity`
//! is the probability that a growth step places a motif instead of a single
//! chain atom, so higher values give graphs whose differences live in ring
//! and branching structure rather than in atom types alone.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_VALENCE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub count: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// One-hot atom-type channels.
    pub node_categories: usize,
    pub node_continuous: usize,
    /// One-hot bond-type channels; zero together with `edge_continuous`
    /// means no edge features.
    pub edge_categories: usize,
    pub edge_continuous: usize,
    pub motif_complexity: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 2000,
            min_nodes: 10,
            max_nodes: 30,
            node_categories: 8,
            node_continuous: 2,
            edge_categories: 4,
            edge_continuous: 1,
            motif_complexity: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::contract("synthetic dataset count must be >= 1"));
        }
        if self.min_nodes > self.max_nodes {
            return Err(Error::contract(format!(
                "empty size range [{}, {}]",
                self.min_nodes, self.max_nodes
            )));
        }
        if self.min_nodes < 4 || self.max_nodes > 64 {
            return Err(Error::contract(format!(
                "size range [{}, {}] must lie within [4, 64]",
                self.min_nodes, self.max_nodes
            )));
        }
        if self.node_categories == 0 {
            return Err(Error::contract("need at least one node category"));
        }
        if !(0.0..=1.0).contains(&self.motif_complexity) {
            return Err(Error::contract(format!(
                "motif complexity must be in [0, 1], got {}",
                self.motif_complexity
            )));
        }
        Ok(())
    }

    pub fn has_edge_features(&self) -> bool {
        self.edge_categories + self.edge_continuous > 0
    }
}

pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<Vec<Graph>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.count)
        .map(|_| {
            let n = rng.gen_range(config.min_nodes..=config.max_nodes);
            let skeleton = Skeleton::grow(n, config.motif_complexity, &mut rng);
            skeleton.featurize(config, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bond {
    Chain,
    Ring(usize),
}

struct Skeleton {
    adj: Vec<Vec<usize>>,
    edges: Vec<(usize, usize, Bond)>,
}

impl Skeleton {
    fn grow(n: usize, motif_complexity: f64, rng: &mut impl Rng) -> Self {
        let mut s = Skeleton {
            adj: vec![Vec::new()],
            edges: Vec::new(),
        };
        while s.adj.len() < n {
            let remaining = n - s.adj.len();
            let placed = if remaining >= 2 && rng.gen_bool(motif_complexity) {
                if rng.gen_bool(0.7) {
                    s.add_ring(remaining, rng)
                } else {
                    s.add_branch(remaining, rng)
                }
            } else {
                false
            };
            if !placed {
                let anchor = s.pick_anchor(MAX_VALENCE - 1, rng);
                let v = s.add_node();
                s.connect(anchor, v, Bond::Chain);
            }
        }
        s
    }

    fn add_node(&mut self) -> usize {
        self.adj.push(Vec::new());
        self.adj.len() - 1
    }

    fn connect(&mut self, u: usize, v: usize, bond: Bond) {
        self.adj[u].push(v);
        self.adj[v].push(u);
        self.edges.push((u, v, bond));
    }

    /// A node with degree <= `max_deg`, falling back to the least saturated.
    fn pick_anchor(&self, max_deg: usize, rng: &mut impl Rng) -> usize {
        let open: Vec<usize> = (0..self.adj.len())
            .filter(|&i| self.adj[i].len() <= max_deg)
            .collect();
        if open.is_empty() {
            (0..self.adj.len())
                .min_by_key(|&i| self.adj[i].len())
                .expect("skeleton is never empty")
        } else {
            open[rng.gen_range(0..open.len())]
        }
    }

    fn add_ring(&mut self, remaining: usize, rng: &mut impl Rng) -> bool {
        const SIZES: [usize; 5] = [3, 4, 5, 6, 7];
        const WEIGHTS: [u32; 5] = [1, 1, 4, 6, 1];
        let size = SIZES[WeightedIndex::new(WEIGHTS).expect("static weights").sample(rng)];

        let fusable: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|(u, v, _)| self.adj[*u].len() <= 2 && self.adj[*v].len() <= 2)
            .map(|&(u, v, _)| (u, v))
            .collect();
        if !fusable.is_empty() && rng.gen_bool(0.5) {
            // fused on an existing bond: size - 2 new atoms
            let new = size - 2;
            if new > remaining {
                return false;
            }
            let (u, v) = fusable[rng.gen_range(0..fusable.len())];
            let mut prev = u;
            for _ in 0..new {
                let w = self.add_node();
                self.connect(prev, w, Bond::Ring(size));
                prev = w;
            }
            self.connect(prev, v, Bond::Ring(size));
            if let Some(e) = self.edges.iter_mut().find(|e| (e.0, e.1) == (u, v)) {
                e.2 = Bond::Ring(size);
            }
            true
        } else {
            // grown from one atom: size - 1 new atoms
            let new = size - 1;
            if new > remaining {
                return false;
            }
            let anchor = self.pick_anchor(MAX_VALENCE - 2, rng);
            let mut prev = anchor;
            for _ in 0..new {
                let w = self.add_node();
                self.connect(prev, w, Bond::Ring(size));
                prev = w;
            }
            self.connect(prev, anchor, Bond::Ring(size));
            true
        }
    }

    /// A branching centre carrying two or three terminal atoms.
    fn add_branch(&mut self, remaining: usize, rng: &mut impl Rng) -> bool {
        let leaves = if remaining >= 4 && rng.gen_bool(0.5) { 3 } else { 2 };
        if leaves + 1 > remaining {
            return false;
        }
        let anchor = self.pick_anchor(MAX_VALENCE - 1, rng);
        let centre = self.add_node();
        self.connect(anchor, centre, Bond::Chain);
        for _ in 0..leaves {
            let leaf = self.add_node();
            self.connect(centre, leaf, Bond::Chain);
        }
        true
    }

    fn featurize(&self, config: &SyntheticConfig, rng: &mut impl Rng) -> Result<Graph> {
        let n = self.adj.len();
        let cats = config.node_categories;
        let d_x = cats + config.node_continuous;
        let mut feat = Matrix::zeros(n, d_x);
        for i in 0..n {
            let category = atom_type(self.adj[i].len(), cats, rng);
            feat.set(i, category, 1.0);
            for k in 0..config.node_continuous {
                let centre = 0.3 * category as f64 - 0.2 * k as f64;
                feat.set(i, cats + k, centre + gaussian(rng) * 0.5);
            }
        }

        let pairs: Vec<_> = self.edges.iter().map(|&(u, v, _)| (u, v)).collect();
        let edge_feat = if config.has_edge_features() {
            let ecats = config.edge_categories;
            let mut ef = Matrix::zeros(pairs.len(), ecats + config.edge_continuous);
            for (k, &(u, v, bond)) in self.edges.iter().enumerate() {
                if ecats > 0 {
                    let kind = bond_type(bond, self.adj[u].len().max(self.adj[v].len()), rng);
                    ef.set(k, kind.min(ecats - 1), 1.0);
                }
                for c in 0..config.edge_continuous {
                    ef.set(k, ecats + c, gaussian(rng) * 0.5);
                }
            }
            Some(ef)
        } else {
            None
        };
        Graph::new(feat, &pairs, edge_feat)
    }
}

/// Atom types with valences 4, 3, 2, 2, then 1 for the rest; sampled with
/// type 0 dominant and restricted to types whose valence fits the degree.
fn atom_type(degree: usize, categories: usize, rng: &mut impl Rng) -> usize {
    let valence = |c: usize| match c {
        0 => 4,
        1 => 3,
        2 | 3 => 2,
        _ => 1,
    };
    let base = |c: usize| match c {
        0 => 0.70,
        1 => 0.12,
        2 => 0.10,
        3 => 0.03,
        _ => 0.05 / (categories.saturating_sub(4)).max(1) as f64,
    };
    let weights: Vec<f64> = (0..categories)
        .map(|c| if valence(c) >= degree { base(c) } else { 0.0 })
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => 0,
    }
}

/// 0 single, 1 double, 2 triple, 3 aromatic.
fn bond_type(bond: Bond, max_degree: usize, rng: &mut impl Rng) -> usize {
    match bond {
        Bond::Ring(6) if rng.gen_bool(0.6) => 3,
        Bond::Ring(5) if rng.gen_bool(0.3) => 3,
        _ => {
            let r: f64 = rng.gen();
            if r < 0.80 || max_degree > 3 {
                0
            } else if r < 0.95 || max_degree > 2 {
                1
            } else {
                2
            }
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
