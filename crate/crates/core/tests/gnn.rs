use graphac::gnn::{
    build_model, gcn_layer_forward, gin_layer_forward, pna_aggregate, pna_messages, pna_update, readout,
    Aggregator, Architecture, Linear, Mlp, ModelSpec, PnaConfig, Scaler,
};
use graphac::graph::{batch_graphs, Graph, GraphBatch};
use graphac::tensor::{finite_diff_check, Matrix, Tape, DEFAULT_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, d_x: usize, d_e: Option<usize>) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(0.4) {
                edges.push((u, v));
            }
        }
    }
    let ef = d_e.map(|w| random_matrix(rng, edges.len(), w));
    Graph::new(random_matrix(rng, n, d_x), &edges, ef).unwrap()
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn dense_matmul(a: &[Vec<f64>], b: &Matrix) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn assert_close(got: &Matrix, want: &[Vec<f64>], tol: f64) {
    assert_eq!(got.rows(), want.len());
    for (r, row) in want.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            let g = got.get(r, c);
            assert!((g - w).abs() <= tol, "({r},{c}): {g} vs {w}");
        }
    }
}

#[test]
fn gcn_matches_dense_normalized_adjacency() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let g = random_graph(&mut rng, 6, 3, None);
        let batch = batch_graphs(&[&g]).unwrap();
        let w = random_matrix(&mut rng, 3, 4);
        let n = g.num_nodes();
        let deg = g.in_degrees();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 1.0;
        }
        for (u, v) in g.undirected_edges() {
            a[u][v] = 1.0;
            a[v][u] = 1.0;
        }
        let norm: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| a[i][j] / (((deg[i] + 1) * (deg[j] + 1)) as f64).sqrt())
                    .collect()
            })
            .collect();
        let ah = dense_matmul(&norm, g.node_feat());
        let want: Vec<Vec<f64>> = dense_matmul(&ah, &w)
            .into_iter()
            .map(|r| r.into_iter().map(relu).collect())
            .collect();

        let mut t = Tape::new();
        let h = t.constant(g.node_feat().clone());
        let wv = t.constant(w);
        let out = gcn_layer_forward(&mut t, h, &batch, wv).unwrap();
        assert_close(t.value(out), &want, 1e-12);
    }
}

#[test]
fn gcn_isolated_node_keeps_own_row() {
    let g = Graph::new(Matrix::from_rows(&[[2.0, -1.0]]).unwrap(), &[], None).unwrap();
    let batch = batch_graphs(&[&g]).unwrap();
    let mut t = Tape::new();
    let h = t.constant(g.node_feat().clone());
    let w = t.constant(Matrix::identity(2));
    let out = gcn_layer_forward(&mut t, h, &batch, w).unwrap();
    assert_eq!(t.value(out).data(), &[2.0, 0.0]);
}

fn identity_mlp(t: &mut Tape, width: usize) -> Mlp {
    let w = t.constant(Matrix::identity(width));
    Mlp {
        layers: vec![Linear {
            weight: w,
            bias: None,
        }],
    }
}

#[test]
fn gin_star_and_epsilon() {
    // star: centre 0 with leaves 1..=3
    let feat = Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap();
    let g = Graph::new(feat, &[(0, 1), (0, 2), (0, 3)], None).unwrap();
    let batch = batch_graphs(&[&g]).unwrap();
    let mut t = Tape::new();
    let h = t.constant(g.node_feat().clone());
    let mlp = identity_mlp(&mut t, 1);
    let eps = t.constant(Matrix::scalar(0.0));
    let out = gin_layer_forward(&mut t, h, &batch, &mlp, eps).unwrap();
    assert_eq!(t.value(out).data(), &[10.0, 3.0, 4.0, 5.0]);

    // eps = -1 drops the node's own contribution
    let eps = t.constant(Matrix::scalar(-1.0));
    let out = gin_layer_forward(&mut t, h, &batch, &mlp, eps).unwrap();
    assert_eq!(t.value(out).data(), &[9.0, 1.0, 1.0, 1.0]);

    let lone = Graph::new(Matrix::from_rows(&[[5.0]]).unwrap(), &[], None).unwrap();
    let lb = batch_graphs(&[&lone]).unwrap();
    let h = t.constant(lone.node_feat().clone());
    let eps = t.constant(Matrix::scalar(0.5));
    let out = gin_layer_forward(&mut t, h, &lb, &mlp, eps).unwrap();
    assert_eq!(t.value(out).data(), &[7.5]);
}

#[test]
fn gin_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let g = random_graph(&mut rng, 6, 3, None);
        let batch = batch_graphs(&[&g]).unwrap();
        let (w1, b1) = (random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 1, 4));
        let (w2, b2) = (random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 1, 3));
        let eps: f64 = rng.gen_range(-0.5..0.5);
        let x = g.node_feat();
        let n = g.num_nodes();
        let mut z = vec![vec![0.0; 3]; n];
        for i in 0..n {
            for c in 0..3 {
                z[i][c] = (1.0 + eps) * x.get(i, c);
            }
        }
        for &(s, d) in g.edges() {
            for c in 0..3 {
                z[d][c] += x.get(s, c);
            }
        }
        let hid: Vec<Vec<f64>> = dense_matmul(&z, &w1)
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(c, v)| relu(v + b1.get(0, c)))
                    .collect()
            })
            .collect();
        let want: Vec<Vec<f64>> = dense_matmul(&hid, &w2)
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(c, v)| relu(v + b2.get(0, c)))
                    .collect()
            })
            .collect();

        let mut t = Tape::new();
        let h = t.constant(x.clone());
        let mlp = Mlp {
            layers: vec![
                Linear {
                    weight: t.constant(w1),
                    bias: Some(t.constant(b1)),
                },
                Linear {
                    weight: t.constant(w2),
                    bias: Some(t.constant(b2)),
                },
            ],
        };
        let e = t.constant(Matrix::scalar(eps));
        let out = gin_layer_forward(&mut t, h, &batch, &mlp, e).unwrap();
        assert_close(t.value(out), &want, 1e-12);
    }
}

#[test]
fn pna_path_example() {
    // node 1 hears from 0 and 2 with messages 1 and 3
    let feat = Matrix::from_rows(&[[1.0], [0.0], [3.0]]).unwrap();
    let g = Graph::new(feat, &[(0, 1), (1, 2)], None).unwrap();
    let batch = batch_graphs(&[&g]).unwrap();
    let mut t = Tape::new();
    let h = t.constant(g.node_feat().clone());
    // message = h_src
    let w = t.constant(Matrix::from_rows(&[[1.0], [0.0]]).unwrap());
    let mlp = Mlp {
        layers: vec![Linear {
            weight: w,
            bias: None,
        }],
    };
    let msgs = pna_messages(&mut t, h, &batch, None, &mlp).unwrap();
    let aggs = [Aggregator::Max, Aggregator::Mean, Aggregator::Sum];
    let cfg = PnaConfig {
        aggregators: &aggs,
        scalers: &[Scaler::Identity],
        delta: 1.0,
    };
    let out = pna_aggregate(&mut t, msgs, &batch, &cfg).unwrap();
    assert_eq!(t.value(out).row(1), &[3.0, 2.0, 4.0]);
}

fn brute_force_pna(
    g: &Graph,
    layers: &[(Matrix, Matrix)],
    aggs: &[Aggregator],
    scalers: &[Scaler],
    delta: f64,
) -> Vec<Vec<f64>> {
    let x = g.node_feat();
    let n = g.num_nodes();
    let deg = g.in_degrees();
    let ef = g.edge_feat();
    let mut msgs_per_node: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    for (k, &(s, d)) in g.edges().iter().enumerate() {
        let mut input: Vec<f64> = x.row(s).to_vec();
        input.extend_from_slice(x.row(d));
        if let Some(ef) = ef {
            input.extend_from_slice(ef.row(k));
        }
        let mut v = input;
        for (li, (w, b)) in layers.iter().enumerate() {
            if li > 0 {
                v = v.into_iter().map(relu).collect();
            }
            v = (0..w.cols())
                .map(|j| v.iter().enumerate().map(|(i, a)| a * w.get(i, j)).sum::<f64>() + b.get(0, j))
                .collect();
        }
        msgs_per_node[d].push(v);
    }
    let width = layers.last().unwrap().0.cols();
    (0..n)
        .map(|i| {
            let ms = &msgs_per_node[i];
            let mut row = Vec::new();
            for a in aggs {
                let agg: Vec<f64> = (0..width)
                    .map(|c| {
                        if ms.is_empty() {
                            return 0.0;
                        }
                        let col = ms.iter().map(|m| m[c]);
                        match a {
                            Aggregator::Max => col.fold(f64::NEG_INFINITY, f64::max),
                            Aggregator::Mean => col.sum::<f64>() / ms.len() as f64,
                            Aggregator::Sum => col.sum(),
                        }
                    })
                    .collect();
                for s in scalers {
                    let l = ((deg[i] + 1) as f64).ln();
                    let f = match s {
                        Scaler::Identity => 1.0,
                        Scaler::Amplification => l / delta,
                        Scaler::Attenuation => delta / l.max(1e-6),
                    };
                    row.extend(agg.iter().map(|v| v * f));
                }
            }
            row
        })
        .collect()
}

#[test]
fn pna_messages_and_aggregation_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aggs = [Aggregator::Max, Aggregator::Mean, Aggregator::Sum];
    let scalers = [Scaler::Identity, Scaler::Amplification, Scaler::Attenuation];
    for trial in 0..20 {
        let d_e = (trial % 2 == 0).then_some(2);
        let g = random_graph(&mut rng, 6, 3, d_e);
        let batch = batch_graphs(&[&g]).unwrap();
        let layers = vec![
            (
                random_matrix(&mut rng, 6 + d_e.unwrap_or(0), 3),
                random_matrix(&mut rng, 1, 3),
            ),
            (random_matrix(&mut rng, 3, 3), random_matrix(&mut rng, 1, 3)),
        ];
        let delta = 0.8;
        let want = brute_force_pna(&g, &layers, &aggs, &scalers, delta);

        let mut t = Tape::new();
        let h = t.constant(g.node_feat().clone());
        let e = g.edge_feat().map(|m| t.constant(m.clone()));
        let mlp = Mlp {
            layers: layers
                .iter()
                .map(|(w, b)| Linear {
                    weight: t.constant(w.clone()),
                    bias: Some(t.constant(b.clone())),
                })
                .collect(),
        };
        let msgs = pna_messages(&mut t, h, &batch, e, &mlp).unwrap();
        let cfg = PnaConfig {
            aggregators: &aggs,
            scalers: &scalers,
            delta,
        };
        let agg = pna_aggregate(&mut t, msgs, &batch, &cfg).unwrap();
        assert_close(t.value(agg), &want, 1e-10);

        // fused update equals concatenate-then-multiply
        let u = t.constant(random_matrix(&mut rng, 27, 3));
        let b = t.constant(random_matrix(&mut rng, 1, 3));
        let lin = Linear {
            weight: u,
            bias: Some(b),
        };
        let fused = pna_update(&mut t, msgs, &batch, &cfg, &lin).unwrap();
        let plain = lin.apply(&mut t, agg).unwrap();
        assert!(t.value(fused).max_abs_diff(t.value(plain)) < 1e-12);
    }
}

fn small_batch(seed: u64, d_e: Option<usize>) -> (Vec<Graph>, GraphBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs: Vec<Graph> = (0..3).map(|i| random_graph(&mut rng, 4 + i, 3, d_e)).collect();
    let batch = batch_graphs(&graphs).unwrap();
    (graphs, batch)
}

#[test]
fn readout_is_per_graph_mean() {
    let a = Graph::new(Matrix::from_rows(&[[1.0], [3.0]]).unwrap(), &[(0, 1)], None).unwrap();
    let b = Graph::new(Matrix::from_rows(&[[5.0]]).unwrap(), &[], None).unwrap();
    let batch = batch_graphs(&[&a, &b]).unwrap();
    let mut t = Tape::new();
    let h = t.constant(batch.node_feat().clone());
    let proj = Linear {
        weight: t.constant(Matrix::identity(1)),
        bias: None,
    };
    let out = readout(&mut t, h, &batch, &proj).unwrap();
    assert_eq!(t.value(out).data(), &[2.0, 5.0]);
}

fn all_specs(edge: bool) -> Vec<ModelSpec> {
    let mut pna = ModelSpec::pna(2, 5, 4);
    pna.use_edge_features = edge;
    let mut v = vec![pna];
    if !edge {
        v.push(ModelSpec::gcn(2, 5, 4));
        v.push(ModelSpec::gin(2, 5, 4));
    }
    v
}

#[test]
fn embeddings_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for edge in [false, true] {
        for spec in all_specs(edge) {
            let g = random_graph(&mut rng, 6, 3, edge.then_some(2));
            let model = build_model(&spec, 0.9, 3, g.edge_dim()).unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.reverse();
            perm.swap(1, 4);
            let pg = g.permute_nodes(&perm).unwrap();
            let e1 = model.embed(&batch_graphs(&[&g]).unwrap()).unwrap();
            let e2 = model.embed(&batch_graphs(&[&pg]).unwrap()).unwrap();
            assert!(e1.max_abs_diff(&e2) < 1e-9, "{}", spec.label());
        }
    }
}

#[test]
fn identical_graphs_get_identical_embeddings_in_a_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(&mut rng, 5, 3, None);
    let batch = batch_graphs(&[&g, &g]).unwrap();
    for spec in all_specs(false) {
        let e = build_model(&spec, 1.0, 3, None).unwrap().embed(&batch).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }
}

#[test]
fn build_is_deterministic_and_seed_sensitive() {
    let (_, batch) = small_batch(6, None);
    let spec = ModelSpec::pna(2, 6, 4).with_seed(9);
    let a = build_model(&spec, 1.0, 3, None).unwrap();
    let b = build_model(&spec, 1.0, 3, None).unwrap();
    assert_eq!(a.embed(&batch).unwrap(), b.embed(&batch).unwrap());
    let c = build_model(&spec.clone().with_seed(10), 1.0, 3, None).unwrap();
    assert_ne!(a.embed(&batch).unwrap(), c.embed(&batch).unwrap());
}

#[test]
fn pna_update_weight_has_aggregator_scaler_width() {
    let model = build_model(&ModelSpec::pna(4, 64, 64), 1.0, 10, None).unwrap();
    let u = model.parameter("layers.0.update.weight").unwrap();
    assert_eq!(u.value.shape(), (9 * 64, 64));
    let m = model.parameter("layers.0.message.0.weight").unwrap();
    assert_eq!(m.value.shape(), (128, 64));
    assert_eq!(
        model.parameter("layers.0.eps").map(|p| p.value.shape()),
        None,
        "only GIN has eps"
    );
    let gin = build_model(&ModelSpec::gin(2, 8, 4), 1.0, 3, None).unwrap();
    assert_eq!(gin.parameter("layers.1.eps").unwrap().value.data(), &[0.0]);
}

#[test]
fn edge_flag_requires_edge_features() {
    let mut spec = ModelSpec::pna(2, 4, 4);
    spec.use_edge_features = true;
    assert!(build_model(&spec, 1.0, 3, None).is_err());
    let mut gcn = ModelSpec::gcn(2, 4, 4);
    gcn.use_edge_features = true;
    assert!(build_model(&gcn, 1.0, 3, Some(2)).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for edge in [false, true] {
        let (_, batch) = small_batch(7, edge.then_some(2));
        for spec in all_specs(edge) {
            let mut model = build_model(&spec.clone().with_seed(3), 0.9, 3, edge.then_some(2)).unwrap();
            // zero biases put isolated nodes exactly on a relu kink
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for p in model.parameters_mut() {
                if p.name.ends_with("bias") {
                    p.value = random_matrix(&mut rng, p.value.rows(), p.value.cols());
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
                )
                .unwrap();
                assert!(err < 1e-4, "{} {}: {err}", spec.label(), p.name);
            }
        }
    }
}

#[test]
fn architecture_labels() {
    assert_eq!(ModelSpec::pna(4, 32, 64).label(), "PNA-4L-32h");
    assert_eq!(Architecture::Gin.to_string(), "GIN");
}
