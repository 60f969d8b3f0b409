use std::sync::Arc;

use graphac::tensor::{
    finite_diff_check, AdamConfig, AdamState, Matrix, Parameter, SegmentReduce, Tape, Var, DEFAULT_STEP,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
}

/// Contracts `out` with fixed random weights so every entry's gradient is
/// distinct.
fn contract(t: &mut Tape, out: Var, seed: u64) -> graphac::Result<Var> {
    let (r, c) = t.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(&mut rng, r, c));
    let p = t.mul(out, w)?;
    t.sum(p)
}

fn check(x: &Matrix, f: impl Fn(&mut Tape, Var) -> graphac::Result<Var>) -> f64 {
    finite_diff_check(
        |t, v| {
            let out = f(t, v)?;
            contract(t, out, 99)
        },
        x,
        DEFAULT_STEP,
    )
    .unwrap()
}

const SHAPES: [(usize, usize); 4] = [(3, 4), (1, 4), (3, 1), (1, 1)];

proptest! {
    #[test]
    fn broadcast_binary_ops_match_finite_differences(seed in 0u64..1000, op in 0usize..4, shape in 0usize..4, lhs in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = random(&mut rng, 3, 4);
        let (r, c) = SHAPES[shape];
        // keep divisors away from zero
        let small = random(&mut rng, r, c).map(|v| if op == 3 { v.signum() * (v.abs() + 0.5) } else { v });
        let apply = |t: &mut Tape, a: Var, b: Var| match op {
            0 => t.add(a, b),
            1 => t.sub(a, b),
            2 => t.mul(a, b),
            _ => t.div(a, b),
        };
        let err = if lhs {
            check(&full, |t, x| {
                let b = t.constant(small.clone());
                apply(t, x, b)
            })
        } else {
            check(&small, |t, x| {
                let a = t.constant(full.clone());
                apply(t, a, x)
            })
        };
        prop_assert!(err < 1e-6, "op {op} shape {:?} lhs {lhs}: {err}", SHAPES[shape]);
    }

    #[test]
    fn unary_and_structural_ops_match_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 5, 3);
        let other = random(&mut rng, 3, 2);
        let positive = x.map(|v| v.abs() + 0.3);
        let ids: Arc<[usize]> = vec![0, 2, 0, 1, 2].into();
        let idx: Arc<[usize]> = vec![4, 0, 0, 3].into();
        let cases: Vec<(&str, &Matrix, Box<dyn Fn(&mut Tape, Var) -> graphac::Result<Var>>)> = vec![
            ("matmul-left", &x, Box::new(|t, v| { let o = t.constant(other.clone()); t.matmul(v, o) })),
            ("matmul-right", &other, Box::new(|t, v| { let o = t.constant(x.clone()); t.matmul(o, v) })),
            ("scale", &x, Box::new(|t, v| t.scale(v, -1.7))),
            ("add-scalar", &x, Box::new(|t, v| t.add_scalar(v, 0.4))),
            ("transpose", &x, Box::new(|t, v| t.transpose(v))),
            ("exp", &x, Box::new(|t, v| t.exp(v))),
            ("log", &positive, Box::new(|t, v| t.log(v))),
            ("column-mean", &x, Box::new(|t, v| t.column_mean(v))),
            ("column-std", &x, Box::new(|t, v| t.column_std(v))),
            ("sum-of-squares", &x, Box::new(|t, v| t.sum_of_squares(v))),
            ("row-slice", &x, Box::new(|t, v| t.row_slice(v, 1, 4))),
            ("concat", &x, Box::new(|t, v| { let s = t.scale(v, 2.0)?; t.concat_columns(&[v, s, v]) })),
            ("gather", &x, Box::new(|t, v| t.gather_rows(v, idx.clone()))),
            ("segment-sum", &x, Box::new(|t, v| t.segment_reduce(v, ids.clone(), 4, SegmentReduce::Sum))),
            ("segment-mean", &x, Box::new(|t, v| t.segment_reduce(v, ids.clone(), 4, SegmentReduce::Mean))),
            ("segment-max", &x, Box::new(|t, v| t.segment_reduce(v, ids.clone(), 4, SegmentReduce::Max))),
        ];
        for (name, input, f) in &cases {
            let err = check(input, f);
            prop_assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn matmul_matches_naive(seed in 0u64..1000, m in 1usize..7, k in 1usize..7, n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        let want = Matrix::from_fn(m, n, |i, j| (0..k).map(|l| a.get(i, l) * b.get(l, j)).sum());
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let x = Matrix::from_rows(&[[0.5, -0.7], [1.2, -0.1]]).unwrap();
    assert!(check(&x, |t, v| t.relu(v)) < 1e-9);
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut t = Tape::new();
    let x = t.parameter(Matrix::scalar(3.0));
    let y = t.sum_of_squares(x).unwrap();
    let z = t.scale(x, 2.0).unwrap();
    t.backward(y).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[8.0]);
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut params = vec![Parameter::new("w", Matrix::from_rows(&[[2.0, -3.0]]).unwrap())];
    let mut opt = AdamState::new(AdamConfig::with_lr(0.05), &params);
    for _ in 0..2000 {
        let mut t = Tape::new();
        let v = params[0].bind(&mut t);
        let target = t.constant(Matrix::from_rows(&[[0.5, 1.0]]).unwrap());
        let d = t.sub(v, target).unwrap();
        let loss = t.sum_of_squares(d).unwrap();
        t.backward(loss).unwrap();
        params[0].zero_grad();
        params[0].collect(&t, v);
        opt.step(&mut params).unwrap();
    }
    let w = params[0].value.data();
    assert!((w[0] - 0.5).abs() < 1e-3 && (w[1] - 1.0).abs() < 1e-3, "{w:?}");
}
