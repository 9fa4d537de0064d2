use diffmath::{finite_difference_check, DiffError, Graph, Matrix, OpKind, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

fn positive_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.3..2.0))
}

/// Contracts `out` against a fixed random weighting so every output entry
/// contributes a distinct amount to the scalar.
fn contract(g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var, DiffError> {
    let (r, c) = g.value(out).shape();
    let w = g.constant(Matrix::from_fn(r, c, |i, j| weights.get(i % weights.rows(), j % weights.cols())));
    let prod = g.mul(out, w)?;
    g.mean_all(prod)
}

fn all_ops() -> Vec<OpKind> {
    vec![
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Scale(-1.7),
        OpKind::ConcatRows,
        OpKind::SliceRows { start: 1, len: 2 },
        OpKind::ConcatCols,
        OpKind::SliceCols { start: 1, len: 2 },
        OpKind::RowSoftmax,
        OpKind::Log,
        OpKind::Exp,
        OpKind::ElementwiseMul,
        OpKind::MeanAll,
        OpKind::MeanRows,
        OpKind::L2NormalizeRows,
        OpKind::LayerNormRows,
        OpKind::Relu,
        OpKind::Transpose,
    ]
}

/// Relative FD error of a single op applied to random inputs of random shape.
fn op_error(op: &OpKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(3..6);
    let cols = rng.random_range(3..6);
    let inner = rng.random_range(2..5);
    let weights = random_matrix(&mut rng, 8, 8);
    let params: Vec<Matrix> = match op {
        OpKind::Matmul => vec![random_matrix(&mut rng, rows, inner), random_matrix(&mut rng, inner, cols)],
        OpKind::Add | OpKind::ElementwiseMul => {
            // alternate full, row and scalar broadcasting
            let rhs = match seed % 3 {
                0 => random_matrix(&mut rng, rows, cols),
                1 => random_matrix(&mut rng, 1, cols),
                _ => random_matrix(&mut rng, 1, 1),
            };
            vec![random_matrix(&mut rng, rows, cols), rhs]
        }
        OpKind::ConcatRows => vec![random_matrix(&mut rng, rows, cols), random_matrix(&mut rng, inner, cols)],
        OpKind::ConcatCols => vec![random_matrix(&mut rng, rows, cols), random_matrix(&mut rng, rows, inner)],
        OpKind::Log => vec![positive_matrix(&mut rng, rows, cols)],
        _ => vec![random_matrix(&mut rng, rows, cols)],
    };
    let op = op.clone();
    let builder = move |g: &mut Graph, p: &[Var]| {
        let out = g.apply(op.clone(), p)?;
        contract(g, out, &weights)
    };
    finite_difference_check(&builder, &params, 1e-6).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for op in all_ops() {
            let err = op_error(&op, seed);
            prop_assert!(err < 1e-5, "{} error {err:e} at seed {seed}", op.name());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_fn(4, 7, |_, _| rng.random_range(-40.0..40.0)));
        let s = g.row_softmax(x).unwrap();
        let v = g.value(s);
        for r in 0..v.rows() {
            prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(v.row(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn normalised_rows_have_unit_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(random_matrix(&mut rng, 5, 6));
        let n = g.l2_normalize_rows(x).unwrap();
        let v = g.value(n);
        for r in 0..v.rows() {
            let norm = v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}

/// Chain of five ops mixing every structural kind used by the encoders.
#[test]
fn random_five_op_graphs_match_at_1e6() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 3, 5), random_matrix(&mut rng, 1, 5)];
        let weights = random_matrix(&mut rng, 4, 5);
        let builder = |g: &mut Graph, p: &[Var]| {
            let h = g.matmul(p[0], p[1])?;
            let h = g.add(h, p[2])?;
            let h = g.layer_norm_rows(h)?;
            let h = g.row_softmax(h)?;
            let h = g.log(h)?;
            contract(g, h, &weights)
        };
        let err = finite_difference_check(&builder, &params, 1e-5).unwrap();
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn quadratic_loss_matches_closed_form() {
    // L = mean((x - c)^2); dL/dx = 2(x - c)/n, checked both ways.
    let x = Matrix::from_rows(&[&[0.3, -1.2, 2.0], &[0.7, 0.1, -0.4]]);
    let c = Matrix::from_rows(&[&[1.0, 0.0, -1.0], &[0.5, 0.5, 0.5]]);
    let c2 = c.clone();
    let builder = move |g: &mut Graph, p: &[Var]| {
        let cv = g.constant(c2.clone());
        let d = g.sub(p[0], cv)?;
        let sq = g.mul(d, d)?;
        g.mean_all(sq)
    };
    let err = finite_difference_check(&builder, &[x.clone()], 1e-5).unwrap();
    assert!(err < 1e-7, "{err:e}");

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = builder(&mut g, &[xv]).unwrap();
    let grad = g.backward(loss).unwrap();
    let expected = Matrix::from_fn(2, 3, |r, k| 2.0 * (x.get(r, k) - c.get(r, k)) / 6.0);
    for (a, b) in grad.get(xv).unwrap().data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

/// Gradient through `concat_rows` must land on the right source: padding the
/// prompt block with zeros and weighting only token rows leaves the prompt
/// gradient exactly zero, and vice versa.
#[test]
fn concat_routes_gradient_to_its_source() {
    let prompts = Matrix::filled(3, 4, 0.5);
    let tokens = Matrix::filled(5, 4, -0.25);
    for (mask_prompt, mask_token) in [(0.0, 1.0), (1.0, 0.0)] {
        let mut g = Graph::new();
        let p = g.param(prompts.clone());
        let t = g.param(tokens.clone());
        let seq = g.concat_rows(&[p, t]).unwrap();
        let mask = g.constant(Matrix::from_fn(8, 4, |r, _| if r < 3 { mask_prompt } else { mask_token }));
        let sel = g.mul(seq, mask).unwrap();
        let loss = g.mean_all(sel).unwrap();
        let grads = g.backward(loss).unwrap();
        let gp = grads.get(p).unwrap();
        let gt = grads.get(t).unwrap();
        assert!(gp.data().iter().all(|&v| v == mask_prompt / 32.0));
        assert!(gt.data().iter().all(|&v| v == mask_token / 32.0));
    }
}
