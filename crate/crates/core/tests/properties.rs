use diffmath::{Graph, Matrix};
use proptest::prelude::*;
use ptat::atpg::{LinearMap, PromptSet};
use ptat::data::{generate_domain, SequenceConfig};
use ptat::eval::recall_at_k;
use ptat::losses::{
    contrastive_directions, contrastive_loss, feature_distillation_loss, kl_alignment_loss, similarity_distillation_loss,
    similarity_matrices, BatchEmbeddings,
};

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v.into_iter().map(|x| x * scale).collect()).unwrap())
}

fn unit_rows(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.get(r, c) / n
    })
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Row-averaged KL(softmax(x) || softmax(y)) by direct summation.
fn kl_oracle(x: &Matrix, y: &Matrix) -> f64 {
    let mut total = 0.0;
    for r in 0..x.rows() {
        let (p, q) = (softmax(x.row(r)), softmax(y.row(r)));
        total += p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>();
    }
    total / x.rows() as f64
}

fn sims(a: &Matrix, t: &Matrix, tau: f64) -> Matrix {
    Matrix::from_fn(a.rows(), t.rows(), |i, j| a.row(i).iter().zip(t.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau)
}

fn ce_diag_oracle(c: &Matrix) -> f64 {
    -(0..c.rows()).map(|i| softmax(c.row(i))[i].ln()).sum::<f64>() / c.rows() as f64
}

fn unit_rows_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    matrix(rows, cols, 1.0).prop_filter("rows need a direction", |m| (0..m.rows()).all(|r| m.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-3)).prop_map(|m| unit_rows(&m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn losses_match_direct_summation(
        sa in unit_rows_strategy(4, 6), st in unit_rows_strategy(4, 6),
        ta in unit_rows_strategy(4, 6), tt in unit_rows_strategy(4, 6),
    ) {
        let tau = 0.07;
        let mut g = Graph::new();
        let s = BatchEmbeddings { audio: g.constant(sa.clone()), text: g.constant(st.clone()) };
        let t = BatchEmbeddings { audio: g.constant(ta.clone()), text: g.constant(tt.clone()) };

        let kl = kl_alignment_loss(&mut g, s).unwrap();
        prop_assert!((g.scalar(kl) - (kl_oracle(&sa, &st) + kl_oracle(&st, &sa))).abs() <= 1e-9);

        let fd = feature_distillation_loss(&mut g, s, Some(t)).unwrap();
        prop_assert!((g.scalar(fd) - (kl_oracle(&sa, &ta) + kl_oracle(&st, &tt))).abs() <= 1e-9);

        let sp = similarity_matrices(&mut g, s, tau).unwrap();
        let tp = similarity_matrices(&mut g, t, tau).unwrap();
        let (c, ct) = (sims(&sa, &st, tau), sims(&st, &sa, tau));
        let (tc, tct) = (sims(&ta, &tt, tau), sims(&tt, &ta, tau));
        let sd = similarity_distillation_loss(&mut g, sp, Some(tp)).unwrap();
        prop_assert!((g.scalar(sd) - (kl_oracle(&ct, &tct) + kl_oracle(&c, &tc))).abs() <= 1e-9);

        let (t2a, a2t) = contrastive_directions(&mut g, sp).unwrap();
        prop_assert!((g.scalar(t2a) - ce_diag_oracle(&ct)).abs() <= 1e-9);
        prop_assert!((g.scalar(a2t) - ce_diag_oracle(&c)).abs() <= 1e-9);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal_inputs(x in matrix(3, 5, 4.0), y in matrix(3, 5, 4.0)) {
        let mut g = Graph::new();
        let (vx, vy) = (g.constant(x), g.constant(y));
        let d = ptat::losses::mean_row_kl(&mut g, vx, vy).unwrap();
        prop_assert!(g.scalar(d) >= -1e-15);
        let z = ptat::losses::mean_row_kl(&mut g, vx, vx).unwrap();
        prop_assert!(g.scalar(z).abs() <= 1e-9);
    }

    #[test]
    fn swapping_modalities_swaps_directions(a in unit_rows_strategy(5, 4), t in unit_rows_strategy(5, 4), shift in -5.0..5.0f64) {
        let mut g = Graph::new();
        let (va, vt) = (g.constant(a), g.constant(t));
        let fwd = similarity_matrices(&mut g, BatchEmbeddings { audio: va, text: vt }, 0.07).unwrap();
        let rev = similarity_matrices(&mut g, BatchEmbeddings { audio: vt, text: va }, 0.07).unwrap();
        let (f_t2a, f_a2t) = contrastive_directions(&mut g, fwd).unwrap();
        let (r_t2a, r_a2t) = contrastive_directions(&mut g, rev).unwrap();
        prop_assert!((g.scalar(f_t2a) - g.scalar(r_a2t)).abs() <= 1e-12);
        prop_assert!((g.scalar(f_a2t) - g.scalar(r_t2a)).abs() <= 1e-12);
        let (lf, lr) = (contrastive_loss(&mut g, fwd).unwrap(), contrastive_loss(&mut g, rev).unwrap());
        prop_assert!((g.scalar(lf) - g.scalar(lr)).abs() <= 1e-12);

        let s = g.constant(Matrix::filled(5, 5, shift));
        let a2t = g.add(fwd.a2t, s).unwrap();
        let t2a = g.add(fwd.t2a, s).unwrap();
        let shifted = contrastive_loss(&mut g, ptat::losses::SimilarityPair { a2t, t2a }).unwrap();
        prop_assert!((g.scalar(lf) - g.scalar(shifted)).abs() <= 1e-9);
    }

    #[test]
    fn recall_grows_with_k_and_depends_only_on_ranks(c in matrix(12, 12, 3.0), k1 in 1usize..12, k2 in 1usize..12) {
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        prop_assert!(recall_at_k(&c, lo).unwrap() <= recall_at_k(&c, hi).unwrap());
        let warped = Matrix::from_fn(12, 12, |r, col| (2.0 * c.get(r, col)).exp() + c.get(r, col).powi(3));
        for k in [1, 5, 10] {
            prop_assert_eq!(recall_at_k(&c, k).unwrap(), recall_at_k(&warped, k).unwrap());
        }
    }

    #[test]
    fn text_prompts_are_linear_in_the_audio_prompts(
        a1 in matrix(3, 4, 1.0), a2 in matrix(3, 4, 1.0),
        w1 in matrix(4, 4, 1.0), w2 in matrix(4, 4, 1.0),
        alpha in -2.0..2.0f64, beta in -2.0..2.0f64,
    ) {
        let zero = Matrix::zeros(1, 4);
        let set = |a: Matrix| PromptSet {
            prompts: a,
            s_pre: LinearMap { weight: w1.clone(), bias: zero.clone() },
            s_post: LinearMap { weight: w2.clone(), bias: zero.clone() },
            inject_layer: 1,
        };
        let mix = Matrix::from_fn(3, 4, |r, c| alpha * a1.get(r, c) + beta * a2.get(r, c));
        let (pre, post) = set(mix).text_prompts().unwrap();
        let (pre1, post1) = set(a1.clone()).text_prompts().unwrap();
        let (pre2, post2) = set(a2.clone()).text_prompts().unwrap();
        for r in 0..3 {
            for c in 0..4 {
                prop_assert!((pre.get(r, c) - (alpha * pre1.get(r, c) + beta * pre2.get(r, c))).abs() <= 1e-12);
                prop_assert!((post.get(r, c) - (alpha * post1.get(r, c) + beta * post2.get(r, c))).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pairs_regenerate_and_splits_stay_disjoint(seed in 0u64..1000, overlap in 0.0..=1.0f64, k in 2usize..8) {
        let seq = SequenceConfig { num_domains: 2, num_train: 20, num_test: 8, overlap, latent_dim: k, seed, ..Default::default() };
        for spec in seq.build(64).unwrap().domains {
            let data = generate_domain(&spec).unwrap();
            let train: std::collections::HashSet<u64> = data.train.samples.iter().map(|p| p.id).collect();
            prop_assert!(data.test.samples.iter().all(|p| !train.contains(&p.id)));
            for p in data.train.samples.iter().chain(&data.test.samples) {
                let (a, t) = spec.regenerate(p.id).unwrap();
                prop_assert!(a == p.audio && t == p.text);
            }
        }
    }
}
